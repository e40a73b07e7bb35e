"""Translation-based graph embedding: head + relation ~ tail in R^dim.

Entities and relation types get dense vectors trained with per-triple SGD
on a margin hinge over corrupted triples.  Corruption replaces the head or
tail (fair coin) with a uniformly drawn entity of the same kind, so the
negatives stay type-consistent.  Entity vectors live on the unit sphere.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyGraph, UnknownEntity
from .graph import RELATIONS, KnowledgeGraph, entity_id

_NORM_EPS = 1e-12


@dataclass
class TranseConfig:
    dim: int = 64
    margin_gamma: float = 1.0
    learning_rate: float = 0.01
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.margin_gamma < 0:
            raise ValueError("margin must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class EmbeddingTable:
    """Dense vectors for every graph entity and relation type."""

    dim: int
    seed: int
    entity_ids: list[str]          # "kind:name", sorted
    entity_kinds: list[str]
    vectors: np.ndarray            # (n_entities, dim)
    relation_names: list[str]
    relation_vectors: np.ndarray   # (n_relations, dim)
    index: dict[str, int] = field(repr=False)
    rel_index: dict[str, int] = field(repr=False)
    loss_history: list[float] = field(default_factory=list)

    def entity_vec(self, eid: str) -> np.ndarray:
        row = self.index.get(eid)
        if row is None:
            raise UnknownEntity(eid)
        return self.vectors[row]

    def relation_vec(self, relation: str) -> np.ndarray:
        row = self.rel_index.get(relation)
        if row is None:
            raise UnknownEntity(relation)
        return self.relation_vectors[row]

    def entity_vecs(self) -> dict[str, np.ndarray]:
        return {eid: self.vectors[i] for eid, i in self.index.items()}

    def relation_vecs(self) -> dict[str, np.ndarray]:
        return {r: self.relation_vectors[i] for r, i in self.rel_index.items()}


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    # a zero row cannot be projected; pin it to the first axis
    zero = norms[:, 0] < _NORM_EPS
    if np.any(zero):
        m = m.copy()
        m[zero] = 0.0
        m[zero, 0] = 1.0
        norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / norms


def init_embeddings(g: KnowledgeGraph, cfg: TranseConfig) -> EmbeddingTable:
    """Uniform init in [-6/sqrt(dim), 6/sqrt(dim)], entities projected to unit norm."""
    if not g.entities:
        raise EmptyGraph("cannot embed an empty graph")
    entity_ids = sorted(g.entities)
    entity_kinds = [g.entities[eid].kind for eid in entity_ids]
    rng = np.random.default_rng(cfg.seed)
    bound = 6.0 / np.sqrt(cfg.dim)
    vectors = rng.uniform(-bound, bound, size=(len(entity_ids), cfg.dim))
    relation_vectors = rng.uniform(-bound, bound, size=(len(RELATIONS), cfg.dim))
    return EmbeddingTable(
        dim=cfg.dim,
        seed=cfg.seed,
        entity_ids=entity_ids,
        entity_kinds=entity_kinds,
        vectors=_unit_rows(vectors),
        relation_names=list(RELATIONS),
        relation_vectors=relation_vectors,
        index={eid: i for i, eid in enumerate(entity_ids)},
        rel_index={r: i for i, r in enumerate(RELATIONS)},
    )


def hinge(gamma: float, d_pos: float, d_neg: float) -> float:
    """Margin ranking loss for one triple pair: max(0, gamma + d_pos - d_neg)."""
    return max(0.0, gamma + d_pos - d_neg)


def _distance(h, r, t) -> float:
    return float(np.linalg.norm(h + r - t))


def triple_loss_and_grads(hv, rv, tv, hv2, tv2, gamma):
    """Hinge loss and its subgradients for a positive/corrupted triple pair.

    Returns (loss, (gh, gr, gt, gh2, gt2)); gradients are zero when the
    hinge is inactive or a distance sits exactly at zero.
    """
    delta_pos = hv + rv - tv
    delta_neg = hv2 + rv - tv2
    d_pos = float(np.linalg.norm(delta_pos))
    d_neg = float(np.linalg.norm(delta_neg))
    loss = hinge(gamma, d_pos, d_neg)
    zeros = np.zeros_like(hv)
    if loss <= 0.0:
        return loss, (zeros, zeros, zeros, zeros, zeros)
    u_pos = delta_pos / d_pos if d_pos > 0 else zeros
    u_neg = delta_neg / d_neg if d_neg > 0 else zeros
    gh = u_pos
    gt = -u_pos
    gh2 = -u_neg
    gt2 = u_neg
    gr = u_pos - u_neg
    return loss, (gh, gr, gt, gh2, gt2)


def transe_epoch(table: EmbeddingTable, triples, cfg: TranseConfig, rng) -> float:
    """One SGD pass over the triples in shuffled order; returns summed loss."""
    n = len(triples)
    order = rng.permutation(n)
    kind_pools = _kind_pools(table)
    total = 0.0
    for k in order:
        t = triples[k]
        hi = table.index.get(t.head)
        ti = table.index.get(t.tail)
        ri = table.rel_index[t.relation]
        if hi is None:
            raise UnknownEntity(t.head)
        if ti is None:
            raise UnknownEntity(t.tail)
        corrupt_head = rng.random() < 0.5
        pool = kind_pools[table.entity_kinds[hi if corrupt_head else ti]]
        replacement = int(pool[rng.integers(len(pool))])
        hi2, ti2 = (replacement, ti) if corrupt_head else (hi, replacement)

        loss, (gh, gr, gt, gh2, gt2) = triple_loss_and_grads(
            table.vectors[hi], table.relation_vectors[ri], table.vectors[ti],
            table.vectors[hi2], table.vectors[ti2], cfg.margin_gamma,
        )
        total += loss
        if loss > 0.0:
            lr = cfg.learning_rate
            table.vectors[hi] -= lr * gh
            table.vectors[ti] -= lr * gt
            table.vectors[hi2] -= lr * gh2
            table.vectors[ti2] -= lr * gt2
            table.relation_vectors[ri] -= lr * gr
            for row in {hi, ti, hi2, ti2}:
                table.vectors[row] = _unit_rows(table.vectors[row][None, :])[0]
    return total


def _kind_pools(table: EmbeddingTable) -> dict[str, np.ndarray]:
    pools: dict[str, list[int]] = {}
    for i, kind in enumerate(table.entity_kinds):
        pools.setdefault(kind, []).append(i)
    return {kind: np.asarray(rows) for kind, rows in pools.items()}


def train(g: KnowledgeGraph, cfg: TranseConfig) -> EmbeddingTable:
    """Train embeddings for cfg.epochs; per-epoch summed losses are recorded."""
    table = init_embeddings(g, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    for _ in range(cfg.epochs):
        table.loss_history.append(transe_epoch(table, g.triples, cfg, rng))
    return table


def api_vector(table: EmbeddingTable, name: str) -> np.ndarray:
    """Vector of a known API, or the all-zeros out-of-vocabulary vector."""
    row = table.index.get(entity_id("API", name))
    if row is None:
        return np.zeros(table.dim)
    return table.vectors[row].copy()


def nearest_apis(table: EmbeddingTable, api_name: str, k: int):
    """k nearest API entities by Euclidean distance, self excluded, ties by name."""
    if k < 1:
        raise ValueError("k must be >= 1")
    eid = entity_id("API", api_name)
    if eid not in table.index:
        raise UnknownEntity(eid)
    query = table.vectors[table.index[eid]]
    scored = []
    for i, other in enumerate(table.entity_ids):
        if table.entity_kinds[i] != "API" or other == eid:
            continue
        name = other.split(":", 1)[1]
        scored.append((float(np.linalg.norm(table.vectors[i] - query)), name))
    scored.sort()
    return [(name, dist) for dist, name in scored[:k]]


def save_embeddings(table: EmbeddingTable, path) -> None:
    """Text format: header, then `kind name v1 .. vdim` per entity/relation.

    Floats are written with shortest round-trip representation, so a
    load(save(x)) is bitwise identical.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"mme-embedding v1 dim={table.dim} seed={table.seed}\n")
        for eid, kind in zip(table.entity_ids, table.entity_kinds):
            name = eid.split(":", 1)[1]
            values = " ".join(repr(float(v)) for v in table.vectors[table.index[eid]])
            fh.write(f"{kind} {name} {values}\n")
        for rel in table.relation_names:
            values = " ".join(
                repr(float(v)) for v in table.relation_vectors[table.rel_index[rel]]
            )
            fh.write(f"relation {rel} {values}\n")


def load_embeddings(path) -> EmbeddingTable:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        dim = int(header[2].split("=")[1])
        seed = int(header[3].split("=")[1])
        entity_ids, entity_kinds, entity_rows = [], [], []
        relation_names, relation_rows = [], []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            kind, name = parts[0], parts[1]
            values = np.array([float(v) for v in parts[2:]])
            if kind == "relation":
                relation_names.append(name)
                relation_rows.append(values)
            else:
                entity_ids.append(entity_id(kind, name))
                entity_kinds.append(kind)
                entity_rows.append(values)
    return EmbeddingTable(
        dim=dim,
        seed=seed,
        entity_ids=entity_ids,
        entity_kinds=entity_kinds,
        vectors=np.vstack(entity_rows) if entity_rows else np.zeros((0, dim)),
        relation_names=relation_names,
        relation_vectors=np.vstack(relation_rows) if relation_rows else np.zeros((0, dim)),
        index={eid: i for i, eid in enumerate(entity_ids)},
        rel_index={r: i for i, r in enumerate(relation_names)},
    )
