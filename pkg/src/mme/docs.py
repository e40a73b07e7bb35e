"""API documentation corpus: parsing, serialization and sentence normalization.

The corpus is a UTF-8 line-delimited file, one JSON object per line with
fields ``api``, ``header``, ``class``, ``description``, ``params`` (list of
``{"name": ..., "dir": "in"|"out"}``) and ``other``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DuplicateApi, MalformedRecord

_PARAM_DIRS = ("in", "out")

# A sentence ends at . ! or ? followed by whitespace or end of text.
_SENT_BREAK = re.compile(r"(?<=[.!?])(?:\s+|$)")
_TOKEN = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

# Leading placeholders rewritten to the owning API name, longest first.
_PRONOUN_PLACEHOLDERS = ("This function", "This method", "It")


@dataclass(frozen=True)
class ApiDocRecord:
    """One parsed documentation unit for a single API."""

    api_name: str
    header: str = ""
    class_name: str = ""
    description: str = ""
    syntax_params: tuple[tuple[str, str], ...] = ()
    other_text: str = ""

    def __post_init__(self):
        if not self.api_name:
            raise ValueError("api_name must be non-empty")
        for name, direction in self.syntax_params:
            if not name:
                raise ValueError(f"{self.api_name}: empty parameter name")
            if direction not in _PARAM_DIRS:
                raise ValueError(
                    f"{self.api_name}: parameter {name} has direction {direction!r}"
                )


@dataclass(frozen=True)
class Sentence:
    """A normalized sentence together with the API names it mentions."""

    text: str
    api_mentions: tuple[str, ...]
    source_api: str


def parse_doc_corpus(path) -> list[ApiDocRecord]:
    """Parse a line-delimited documentation corpus.

    Raises MalformedRecord for undecodable or ill-shaped lines and
    DuplicateApi when two records share an api name.  I/O failures
    propagate as OSError.
    """
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, str(exc)) from exc
            if not isinstance(raw, dict):
                raise MalformedRecord(line_no, "record is not an object")
            try:
                record = _record_from_json(raw)
            except (KeyError, TypeError, AttributeError, ValueError) as exc:
                raise MalformedRecord(line_no, str(exc)) from exc
            if record.api_name in seen:
                raise DuplicateApi(record.api_name)
            seen.add(record.api_name)
            records.append(record)
    return records


def _record_from_json(raw) -> ApiDocRecord:
    params = []
    for p in raw.get("params", []):
        params.append((str(p["name"]).strip(), str(p["dir"]).strip()))
    return ApiDocRecord(
        api_name=str(raw["api"]).strip(),
        header=str(raw.get("header", "")).strip(),
        class_name=str(raw.get("class", "")).strip(),
        description=str(raw.get("description", "")).strip(),
        syntax_params=tuple(params),
        other_text=str(raw.get("other", "")).strip(),
    )


def serialize_doc_corpus(records, path) -> None:
    """Write records in the line-delimited corpus format (parse round-trips)."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "api": r.api_name,
                "header": r.header,
                "class": r.class_name,
                "description": r.description,
                "params": [{"name": n, "dir": d} for n, d in r.syntax_params],
                "other": r.other_text,
            }
            fh.write(json.dumps(obj) + "\n")


def split_sentences(text: str) -> list[str]:
    """Split free text on sentence terminators (. ! ?) followed by space or end."""
    parts = _SENT_BREAK.split(text.strip())
    return [p.strip() for p in parts if p.strip()]


def normalize_sentences(record: ApiDocRecord, corpus_names) -> list[Sentence]:
    """Split a record's free text into subject-normalized sentences.

    Three rewrite rules stand in for full coreference resolution: a leading
    pronoun placeholder is replaced by the owning API name; a sentence with
    no API mention at all is prefixed with the owning API name; mentions are
    exact case-sensitive token matches against the corpus names.
    """
    corpus_names = set(corpus_names)
    out = []
    for raw_text in (record.description, record.other_text):
        for sent in split_sentences(raw_text):
            text = _replace_leading_pronoun(sent, record.api_name)
            mentions = _find_mentions(text, corpus_names)
            if not mentions:
                text = f"{record.api_name} {text}"
                mentions = _find_mentions(text, corpus_names)
            out.append(
                Sentence(text=text, api_mentions=tuple(mentions),
                         source_api=record.api_name)
            )
    return out


def _replace_leading_pronoun(text: str, api_name: str) -> str:
    for placeholder in _PRONOUN_PLACEHOLDERS:
        if text.startswith(placeholder):
            rest = text[len(placeholder):]
            if rest == "" or not rest[0].isalnum():
                return api_name + rest
    return text


def _find_mentions(text: str, corpus_names) -> list[str]:
    mentions = []
    for token in _TOKEN.findall(text):
        if token in corpus_names and token not in mentions:
            mentions.append(token)
    return mentions
