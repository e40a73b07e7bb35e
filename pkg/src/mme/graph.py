"""Heterogeneous API knowledge graph: entities, typed relations, construction.

Six entity kinds (API, header, class, parameter, action, prototype) and
eight relation types.  Structural relations come straight from parsed doc
records; bundled_with/replaced_by come from regex templates applied to
normalized sentences that mention at least two APIs.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .docs import ApiDocRecord, Sentence, normalize_sentences, split_sentences
from .errors import InvalidTemplate, SchemaViolation

ENTITY_KINDS = ("API", "header", "class", "parameter", "action", "prototype")

RELATIONS = (
    "function_of",
    "inheritance",
    "input",
    "output",
    "use_action",
    "extend_from",
    "bundled_with",
    "replaced_by",
)

# Allowed (head kind, tail kind) pairs per relation.
SCHEMA = {
    "function_of": {("API", "header"), ("API", "class")},
    "inheritance": {("class", "class")},
    "input": {("API", "parameter")},
    "output": {("API", "parameter")},
    "use_action": {("API", "action")},
    "extend_from": {("API", "prototype")},
    "bundled_with": {("API", "API")},
    "replaced_by": {("API", "API")},
}

# Suffix tokens repeatedly stripped from API names, longest first at each step.
_PROTOTYPE_SUFFIXES = ("Transacted", "Advanced", "Ex", "A", "W",
                       "0", "1", "2", "3", "4", "5", "6", "7", "8", "9")

_API_TOKEN = r"([A-Za-z_][A-Za-z0-9_]*)"
_INHERITS = re.compile(rf"{_API_TOKEN} inherits from {_API_TOKEN}")


def entity_id(kind: str, name: str) -> str:
    return f"{kind}:{name}"


@dataclass(frozen=True)
class Entity:
    kind: str
    name: str

    @property
    def id(self) -> str:
        return entity_id(self.kind, self.name)


@dataclass(frozen=True)
class Triple:
    head: str  # entity id
    relation: str
    tail: str  # entity id


class KnowledgeGraph:
    """Directed heterogeneous graph with schema-checked typed triples."""

    def __init__(self):
        self.entities: dict[str, Entity] = {}
        self.triples: list[Triple] = []
        self._triple_set: set[Triple] = set()

    def add_entity(self, kind: str, name: str) -> Entity:
        if kind not in ENTITY_KINDS:
            raise SchemaViolation(f"unknown entity kind {kind!r}")
        if not name:
            raise SchemaViolation(f"empty name for {kind} entity")
        eid = entity_id(kind, name)
        ent = self.entities.get(eid)
        if ent is None:
            ent = Entity(kind, name)
            self.entities[eid] = ent
        return ent

    def add_triple(self, head: Entity, relation: str, tail: Entity) -> None:
        if relation not in SCHEMA:
            raise SchemaViolation(f"unknown relation {relation!r}")
        if (head.kind, tail.kind) not in SCHEMA[relation]:
            raise SchemaViolation(
                f"{relation} cannot connect {head.kind} to {tail.kind}"
            )
        for ent in (head, tail):
            if ent.id not in self.entities:
                raise SchemaViolation(f"triple endpoint {ent.id} not in graph")
        triple = Triple(head.id, relation, tail.id)
        if triple not in self._triple_set:
            self._triple_set.add(triple)
            self.triples.append(triple)

    def has_triple(self, head_id: str, relation: str, tail_id: str) -> bool:
        return Triple(head_id, relation, tail_id) in self._triple_set

    def entities_of_kind(self, kind: str) -> list[Entity]:
        return [e for e in self.entities.values() if e.kind == kind]

    def api_names(self) -> list[str]:
        return [e.name for e in self.entities_of_kind("API")]

    def neighbors(self, eid: str) -> set[str]:
        """Entity ids adjacent to eid, ignoring direction."""
        out = set()
        for t in self.triples:
            if t.head == eid:
                out.add(t.tail)
            elif t.tail == eid:
                out.add(t.head)
        return out

    def validate(self) -> None:
        for t in self.triples:
            head = self.entities.get(t.head)
            tail = self.entities.get(t.tail)
            if head is None or tail is None:
                raise SchemaViolation(f"dangling endpoint in {t}")
            if (head.kind, tail.kind) not in SCHEMA[t.relation]:
                raise SchemaViolation(f"schema violation in {t}")


@dataclass(frozen=True)
class RelationTemplate:
    """A two-slot regex pattern extracting an API-to-API relation.

    ``pattern`` contains exactly two ``{API}`` placeholders; ``head_slot``
    (1 or 2) says which placeholder binds the head of the emitted triple.
    """

    relation: str
    pattern: str
    head_slot: int
    compiled: re.Pattern = field(compare=False, repr=False, default=None)

    @staticmethod
    def make(relation: str, pattern: str, head_slot: int) -> "RelationTemplate":
        if relation not in ("bundled_with", "replaced_by"):
            raise InvalidTemplate(pattern, f"unsupported relation {relation!r}")
        if pattern.count("{API}") != 2:
            raise InvalidTemplate(pattern, "needs exactly two {API} placeholders")
        if head_slot not in (1, 2):
            raise InvalidTemplate(pattern, "head_slot must be 1 or 2")
        regex = pattern.replace("{API}", _API_TOKEN)
        try:
            compiled = re.compile(regex)
        except re.error as exc:
            raise InvalidTemplate(pattern, str(exc)) from exc
        return RelationTemplate(relation, pattern, head_slot, compiled)


def load_templates(path) -> list[RelationTemplate]:
    """Load templates from a line-delimited file of {relation, pattern, head_slot}."""
    templates = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            templates.append(
                RelationTemplate.make(raw["relation"], raw["pattern"],
                                      int(raw["head_slot"]))
            )
    return templates


def derive_prototype(api_name: str) -> str:
    """Strip adaptation suffixes (A, W, Ex, Transacted, Advanced, digits).

    Longest matching token is removed at each step; stripping stops when no
    token matches or would leave an empty name.  Idempotent.
    """
    name = api_name
    while True:
        for suffix in _PROTOTYPE_SUFFIXES:
            if name.endswith(suffix) and len(name) > len(suffix):
                name = name[: -len(suffix)]
                break
        else:
            return name


def extract_action(record: ApiDocRecord, verb_lexicon) -> list[str]:
    """Canonical verbs of the first description sentence, in occurrence order.

    Tokens are stem-normalized with crude suffix rules (s/es/ed/ing) and
    matched case-insensitively against the lexicon of base forms.
    """
    sentences = split_sentences(record.description)
    if not sentences:
        return []
    lower_lexicon = {v.lower(): v for v in verb_lexicon}
    found = []
    for token in re.findall(r"[A-Za-z]+", sentences[0]):
        for stem in _stem_candidates(token):
            canonical = lower_lexicon.get(stem.lower())
            if canonical is not None:
                if canonical not in found:
                    found.append(canonical)
                break
    return found


def _stem_candidates(token: str):
    yield token
    if token.endswith("ing") and len(token) > 4:
        yield token[:-3]
        yield token[:-3] + "e"
    if token.endswith("ed") and len(token) > 3:
        yield token[:-2]
        yield token[:-1]
    if token.endswith("es") and len(token) > 3:
        yield token[:-2]
    if token.endswith("s") and len(token) > 2:
        yield token[:-1]


def extract_template_relations(sentences, templates) -> list[Triple]:
    """Match templates against sentences that mention at least two APIs.

    Placeholder bindings must be API names mentioned in the sentence; all
    matches are emitted, duplicates removed.  Output order is independent
    of sentence order.
    """
    triples = set()
    for sent in sentences:
        if len(sent.api_mentions) < 2:
            continue
        known = set(sent.api_mentions)
        for template in templates:
            for match in template.compiled.finditer(sent.text):
                first, second = match.group(1), match.group(2)
                if first not in known or second not in known:
                    continue
                head, tail = (first, second) if template.head_slot == 1 else (second, first)
                if head == tail:
                    continue
                triples.add(Triple(entity_id("API", head), template.relation,
                                   entity_id("API", tail)))
    return sorted(triples, key=lambda t: (t.relation, t.head, t.tail))


def build_graph(records, templates, verb_lexicon) -> KnowledgeGraph:
    """Assemble the full knowledge graph from parsed documentation records."""
    g = KnowledgeGraph()
    corpus_names = {r.api_name for r in records}
    known_classes = {r.class_name for r in records if r.class_name}
    all_sentences: list[Sentence] = []

    for record in records:
        api = g.add_entity("API", record.api_name)
        if record.header:
            g.add_triple(api, "function_of", g.add_entity("header", record.header))
        if record.class_name:
            g.add_triple(api, "function_of", g.add_entity("class", record.class_name))
        for pname, direction in record.syntax_params:
            param = g.add_entity("parameter", pname)
            g.add_triple(api, "input" if direction == "in" else "output", param)
        for action in extract_action(record, verb_lexicon):
            g.add_triple(api, "use_action", g.add_entity("action", action))
        prototype = derive_prototype(record.api_name)
        if prototype != record.api_name:
            g.add_triple(api, "extend_from", g.add_entity("prototype", prototype))
        all_sentences.extend(normalize_sentences(record, corpus_names))

    # class-to-class inheritance, mined from raw other_text sentences
    for record in records:
        for sent in split_sentences(record.other_text):
            for match in _INHERITS.finditer(sent):
                derived, base = match.group(1), match.group(2)
                if derived in known_classes and base in known_classes and derived != base:
                    g.add_triple(g.add_entity("class", derived), "inheritance",
                                 g.add_entity("class", base))

    for triple in extract_template_relations(all_sentences, templates):
        head = g.entities[triple.head]
        tail = g.entities[triple.tail]
        g.add_triple(head, triple.relation, tail)

    g.validate()
    return g


def graph_stats(g: KnowledgeGraph) -> dict:
    """Counts per entity kind and per relation type."""
    entity_counts = {kind: 0 for kind in ENTITY_KINDS}
    for ent in g.entities.values():
        entity_counts[ent.kind] += 1
    relation_counts = {rel: 0 for rel in RELATIONS}
    for t in g.triples:
        relation_counts[t.relation] += 1
    return {"entities": entity_counts, "relations": relation_counts}


def save_graph(g: KnowledgeGraph, path) -> None:
    """Write the tab-separated triples file with an entity census header."""
    stats = graph_stats(g)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# mme-graph v1\n")
        fh.write("# entities=%d triples=%d\n" % (len(g.entities), len(g.triples)))
        for kind, count in stats["entities"].items():
            fh.write(f"# {kind}={count}\n")
        for ent in g.entities.values():
            fh.write(f"#E\t{ent.kind}\t{ent.name}\n")
        for t in g.triples:
            head = g.entities[t.head]
            tail = g.entities[t.tail]
            fh.write(f"{head.kind}\t{head.name}\t{t.relation}\t{tail.kind}\t{tail.name}\n")


def load_graph(path) -> KnowledgeGraph:
    g = KnowledgeGraph()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#E\t"):
                _, kind, name = line.split("\t")
                g.add_entity(kind, name)
                continue
            if line.startswith("#"):
                continue
            head_kind, head_name, relation, tail_kind, tail_name = line.split("\t")
            g.add_triple(g.add_entity(head_kind, head_name), relation,
                         g.add_entity(tail_kind, tail_name))
    g.validate()
    return g


def load_verb_lexicon(path) -> set[str]:
    with open(path, encoding="utf-8") as fh:
        return {line.strip() for line in fh if line.strip()}
