"""Trace model and sequence embedding: one row per call, name vector
concatenated with the hashed argument vector, truncated/zero-padded to a
fixed length.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyTrace
from .hashing import DEFAULT_BINS, DEFAULT_HASH_SEED, embed_call_arguments
from .transe import EmbeddingTable, api_vector

DEFAULT_MAX_LEN = 200

_TIMESTAMP = re.compile(r"^\d{4}-(0[1-9]|1[0-2])$")


@dataclass(frozen=True)
class ApiCallEvent:
    """One hooked call: api name plus (type tag, value) arguments."""

    api_name: str
    arguments: tuple = ()

    def __post_init__(self):
        if not self.api_name:
            raise ValueError("api_name must be non-empty")


@dataclass(frozen=True)
class ApiTrace:
    """One sample: ordered calls, binary label, family label, year-month stamp."""

    trace_id: str
    calls: tuple
    y: int
    family: int
    timestamp: str

    def __post_init__(self):
        if not self.calls:
            raise EmptyTrace(f"trace {self.trace_id} has no calls")
        if (self.y == 0) != (self.family == 0):
            raise ValueError(f"trace {self.trace_id}: y and family disagree")
        if self.y not in (0, 1) or self.family < 0:
            raise ValueError(f"trace {self.trace_id}: bad labels")
        if not _TIMESTAMP.match(self.timestamp):
            raise ValueError(f"trace {self.trace_id}: bad timestamp {self.timestamp!r}")


@dataclass
class EmbeddedSequence:
    """max_len x (dim + n_bins) matrix; rows past true_length are zero padding."""

    matrix: np.ndarray
    true_length: int


def embed_call(call: ApiCallEvent, table: EmbeddingTable,
               n_bins: int = DEFAULT_BINS,
               hash_seed: int = DEFAULT_HASH_SEED) -> np.ndarray:
    """[name vector || hashed argument vector]; unknown APIs embed as zeros."""
    return np.concatenate([
        api_vector(table, call.api_name),
        embed_call_arguments(call, n_bins, hash_seed),
    ])


def embed_sequence(trace: ApiTrace, table: EmbeddingTable,
                   n_bins: int = DEFAULT_BINS,
                   max_len: int = DEFAULT_MAX_LEN,
                   hash_seed: int = DEFAULT_HASH_SEED,
                   dedup_consecutive: bool = False) -> EmbeddedSequence:
    """Embed the first max_len calls in order; zero-pad; record true length.

    ``dedup_consecutive`` collapses runs of identical consecutive call
    events before truncation (off by default).
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    calls = list(trace.calls)
    if not calls:
        raise EmptyTrace(trace.trace_id)
    if dedup_consecutive:
        calls = [c for i, c in enumerate(calls) if i == 0 or c != calls[i - 1]]
    kept = calls[:max_len]
    width = table.dim + n_bins
    matrix = np.zeros((max_len, width), dtype=np.float64)
    for row, call in enumerate(kept):
        matrix[row] = embed_call(call, table, n_bins, hash_seed)
    return EmbeddedSequence(matrix=matrix, true_length=len(kept))


# --- trace file format -----------------------------------------------------

def load_traces(path) -> list[ApiTrace]:
    """Read line-delimited trace records {id, y, family, timestamp, calls}."""
    traces = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            calls = tuple(
                ApiCallEvent(
                    api_name=c["api"],
                    arguments=tuple((a["t"], a["v"]) for a in c.get("args", [])),
                )
                for c in raw["calls"]
            )
            traces.append(ApiTrace(
                trace_id=str(raw["id"]),
                calls=calls,
                y=int(raw["y"]),
                family=int(raw["family"]),
                timestamp=str(raw["timestamp"]),
            ))
    return traces


def save_traces(traces, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            obj = {
                "id": t.trace_id,
                "y": t.y,
                "family": t.family,
                "timestamp": t.timestamp,
                "calls": [
                    {"api": c.api_name,
                     "args": [{"t": tag, "v": value} for tag, value in c.arguments]}
                    for c in t.calls
                ],
            }
            fh.write(json.dumps(obj) + "\n")


# --- embedded dataset (matrix form used by the model and the harness) ------

@dataclass
class EmbeddedDataset:
    """Embedded traces stacked into arrays, indexable by trace id."""

    ids: list[str]
    X: np.ndarray          # (n, max_len, dim + n_bins)
    lengths: np.ndarray    # (n,)
    y: np.ndarray          # (n,) in {0, 1}
    family: np.ndarray     # (n,)
    id_index: dict[str, int] = field(repr=False, default=None)

    def __post_init__(self):
        if self.id_index is None:
            self.id_index = {tid: i for i, tid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, trace_ids) -> "EmbeddedDataset":
        rows = np.array([self.id_index[t] for t in trace_ids], dtype=int)
        return EmbeddedDataset(
            ids=[self.ids[i] for i in rows],
            X=self.X[rows],
            lengths=self.lengths[rows],
            y=self.y[rows],
            family=self.family[rows],
        )


def embed_dataset(traces, table: EmbeddingTable,
                  n_bins: int = DEFAULT_BINS,
                  max_len: int = DEFAULT_MAX_LEN,
                  hash_seed: int = DEFAULT_HASH_SEED) -> EmbeddedDataset:
    n = len(traces)
    width = table.dim + n_bins
    X = np.zeros((n, max_len, width), dtype=np.float64)
    lengths = np.zeros(n, dtype=np.int64)
    y = np.zeros(n, dtype=np.int64)
    family = np.zeros(n, dtype=np.int64)
    ids = []
    for i, trace in enumerate(traces):
        seq = embed_sequence(trace, table, n_bins, max_len, hash_seed)
        X[i] = seq.matrix
        lengths[i] = seq.true_length
        y[i] = trace.y
        family[i] = trace.family
        ids.append(trace.trace_id)
    return EmbeddedDataset(ids=ids, X=X, lengths=lengths, y=y, family=family)


def save_dataset(dataset: EmbeddedDataset, path) -> None:
    np.savez(
        path,
        X=dataset.X,
        lengths=dataset.lengths,
        y=dataset.y,
        family=dataset.family,
        ids=np.array(dataset.ids, dtype=np.str_),
    )


def load_dataset(path) -> EmbeddedDataset:
    with np.load(path, allow_pickle=False) as data:
        return EmbeddedDataset(
            ids=[str(i) for i in data["ids"]],
            X=data["X"],
            lengths=data["lengths"],
            y=data["y"],
            family=data["family"],
        )
