"""Deterministic synthetic corpus of evolving malicious families plus drifting
benign traces, for desk-scale aging experiments.

Evolution follows three operators: API substitution along graph equivalence
edges (replaced_by, or a shared extend_from prototype), resource leaf
mutation (the last path / leftmost hostname / last octet component is
renamed), and fragment reuse (each trace keeps a contiguous slice of a
previous-month trace's call order).  Noise calls come from a benign API
pool disjoint from the family templates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingEdges
from .graph import KnowledgeGraph
from .sequence import ApiCallEvent, ApiTrace

_SHARED_DIRS = (
    "C:\\Users\\admin\\AppData\\Roaming",
    "C:\\Users\\admin\\AppData\\Local\\Temp",
    "C:\\ProgramData",
    "C:\\Windows\\System32\\Tasks",
)
_SHARED_REG = (
    "HKEY_CURRENT_USER\\Software\\Microsoft\\Windows\\CurrentVersion\\Run",
    "HKEY_LOCAL_MACHINE\\Software\\Microsoft\\Windows\\CurrentVersion\\RunOnce",
    "HKEY_CURRENT_USER\\Software\\Classes\\Applications",
)
_SHARED_DLLS = (
    "C:\\Windows\\System32\\kernel32.dll",
    "C:\\Windows\\System32\\advapi32.dll",
    "C:\\Windows\\System32\\wininet.dll",
    "C:\\Windows\\System32\\crypt32.dll",
    "C:\\Windows\\System32\\user32.dll",
)
_BENIGN_LEAVES = ("settings.ini", "cache.db", "update.log", "readme.txt",
                  "session.tmp", "report.csv")

# benign software updates its resources more slowly than malware evolves
_BENIGN_DRIFT_SCALE = 0.4


@dataclass
class EvolutionConfig:
    families: int = 10
    months: int = 24
    per_family_month: int = 3
    benign_per_month: int = 30
    p_replace: float = 0.09
    p_resource_mutate: float = 0.08
    p_fragment_reuse: float = 0.5
    noise_apis: int = 3
    seed: int = 0
    start_year: int = 2020
    start_month: int = 1
    hostile: bool = False

    def __post_init__(self):
        for p in (self.p_replace, self.p_resource_mutate, self.p_fragment_reuse):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        for c in (self.families, self.months, self.per_family_month,
                  self.benign_per_month):
            if c < 1:
                raise ValueError("counts must be >= 1")

    def month_stamp(self, t: int) -> str:
        total = self.start_month - 1 + (t - 1)
        return f"{self.start_year + total // 12}-{total % 12 + 1:02d}"


@dataclass
class CorpusBundle:
    """Generated traces plus the provenance needed to audit the evolution."""

    traces: list[ApiTrace]
    substitution_log: list[dict]
    family_cores: dict[int, list[str]]
    family_apis: dict[int, list[str]]
    benign_pool: list[str]


def equivalence_neighbors(g: KnowledgeGraph) -> dict[str, list[str]]:
    """APIs reachable by replaced_by edges or a shared extend_from prototype."""
    neighbors: dict[str, set[str]] = {}
    proto_members: dict[str, list[str]] = {}
    for t in g.triples:
        if t.relation == "replaced_by":
            h = t.head.split(":", 1)[1]
            ta = t.tail.split(":", 1)[1]
            neighbors.setdefault(h, set()).add(ta)
            neighbors.setdefault(ta, set()).add(h)
        elif t.relation == "extend_from":
            proto_members.setdefault(t.tail, []).append(t.head.split(":", 1)[1])
    for members in proto_members.values():
        for a in members:
            for b in members:
                if a != b:
                    neighbors.setdefault(a, set()).add(b)
    return {a: sorted(n) for a, n in sorted(neighbors.items()) if n}


@dataclass
class _FamilyState:
    family: int
    template: list  # (original api, arg spec tuple)
    api_map: dict
    resources: dict
    cores: list = field(default_factory=list)   # substitutable seed apis
    orders: list = field(default_factory=list)  # previous month's core orders


def generate_corpus(g: KnowledgeGraph, cfg: EvolutionConfig) -> CorpusBundle:
    """Generate the full corpus; byte-for-byte deterministic under cfg.seed."""
    neighbors = equivalence_neighbors(g)
    if not neighbors:
        raise MissingEdges("graph has no replaced_by or shared-prototype edges")
    rng = np.random.default_rng(cfg.seed)
    all_apis = sorted(g.api_names())
    substitutable = sorted(neighbors)
    benign_pool = [a for a in all_apis if a not in neighbors]
    if not benign_pool:  # degenerate graphs: reuse the tail of the API list
        benign_pool = all_apis[-max(3, len(all_apis) // 4):]

    families = [
        _make_family(f, rng, substitutable, benign_pool)
        for f in range(1, cfg.families + 1)
    ]
    benign_archetypes = _make_benign_archetypes(rng, benign_pool, substitutable)
    benign_vocab = _BenignVocab(rng)

    traces: list[ApiTrace] = []
    substitution_log: list[dict] = []
    for t in range(1, cfg.months + 1):
        stamp = cfg.month_stamp(t)
        for state in families:
            if t > 1:
                _evolve_family(state, t, cfg, rng, neighbors, substitutable,
                               substitution_log)
            new_orders = []
            for k in range(cfg.per_family_month):
                parent = None
                if state.orders:
                    parent = state.orders[int(rng.integers(len(state.orders)))]
                order = _child_order(len(state.template), parent,
                                     cfg.p_fragment_reuse, rng)
                calls = _render(state, order, cfg.noise_apis, benign_pool, rng)
                traces.append(ApiTrace(
                    trace_id=f"m{state.family:02d}-{t:02d}-{k}",
                    calls=tuple(calls),
                    y=1,
                    family=state.family,
                    timestamp=stamp,
                ))
                new_orders.append(order)
            state.orders = new_orders
        if t > 1:
            benign_vocab.drift(cfg.p_resource_mutate * _BENIGN_DRIFT_SCALE, t, rng)
        for k in range(cfg.benign_per_month):
            archetype = benign_archetypes[int(rng.integers(len(benign_archetypes)))]
            calls = _render_benign(archetype, benign_vocab, rng,
                                   cfg.noise_apis, benign_pool)
            traces.append(ApiTrace(
                trace_id=f"b-{t:02d}-{k:03d}",
                calls=tuple(calls),
                y=0,
                family=0,
                timestamp=stamp,
            ))

    return CorpusBundle(
        traces=traces,
        substitution_log=substitution_log,
        family_cores={s.family: list(s.cores) for s in families},
        family_apis={s.family: sorted({orig for orig, _ in s.template}) for s in families},
        benign_pool=benign_pool,
    )


def _make_family(f: int, rng, substitutable, benign_pool) -> _FamilyState:
    picks = rng.choice(len(substitutable), size=min(3, len(substitutable)),
                       replace=False)
    cores = [substitutable[int(i)] for i in picks]
    # one legit housekeeping call appears in malicious templates too
    housekeeping = [benign_pool[int(rng.integers(len(benign_pool)))]]
    apis = cores + housekeeping
    # the only family-distinctive resource component is the mutating leaf;
    # every prefix is shared with the benign population
    resources = {
        "reg": _SHARED_REG[f % len(_SHARED_REG)] + f"\\fam{f:02d}svc",
        "path": _SHARED_DIRS[f % len(_SHARED_DIRS)] + f"\\fam{f:02d}agent.exe",
        "url": f"http://fam{f:02d}c2.example.net/panel",
        "dll": _SHARED_DLLS[f % len(_SHARED_DLLS)],
        "ip": f"203.0.113.{(7 * f) % 250}",
    }
    res_keys = ("reg", "path", "url", "dll", "ip")
    length = 8 + int(rng.integers(5))
    template = []
    for i in range(length):
        if rng.random() < 0.75:
            api = cores[int(rng.integers(len(cores)))]
        else:
            api = housekeeping[int(rng.integers(len(housekeeping)))]
        roll = rng.random()
        if roll < 0.55:
            args = (("res", res_keys[int(rng.integers(len(res_keys)))]),
                    ("int", int(rng.integers(8))))
        elif roll < 0.75:
            args = (("res", res_keys[int(rng.integers(len(res_keys)))]),)
        else:
            args = (("int", int(rng.integers(8))),)
        template.append((api, args))
    # every resource appears at least once per trace
    for i, key in enumerate(res_keys):
        if not any(("res", key) in spec for _, spec in template):
            api = cores[int(rng.integers(len(cores)))]
            template.append((api, (("res", key),)))
    return _FamilyState(family=f, template=template,
                        api_map={a: a for a in apis}, resources=resources,
                        cores=cores)


class _BenignVocab:
    """A drifting vocabulary of benign resources; each trace samples from it,
    so the benign population is too diverse to memorize as templates."""

    def __init__(self, rng):
        self.paths = [
            _SHARED_DIRS[i % len(_SHARED_DIRS)] + "\\"
            + _BENIGN_LEAVES[i % len(_BENIGN_LEAVES)]
            for i in range(8)
        ] + [
            _SHARED_DIRS[int(rng.integers(len(_SHARED_DIRS)))]
            + f"\\app{i:02d}.exe"
            for i in range(8)
        ]
        self.regs = [_SHARED_REG[i % len(_SHARED_REG)] + f"\\vendor{i:02d}"
                     for i in range(10)]
        self.urls = [f"http://vendor{i:02d}dl.example.net/check" for i in range(10)]
        self.dlls = list(_SHARED_DLLS)
        self.ips = [f"203.0.113.{int(rng.integers(1, 250))}" for _ in range(8)]

    def categories(self):
        return (self.paths, self.regs, self.urls, self.dlls, self.ips)

    def sample(self, rng) -> str:
        cats = self.categories()
        cat = cats[int(rng.integers(len(cats)))]
        return cat[int(rng.integers(len(cat)))]

    def drift(self, p_mutate, month, rng):
        for cat in self.categories():
            for i in range(len(cat)):
                if rng.random() < p_mutate:
                    cat[i] = _mutate_leaf(cat[i], month, rng)


def _make_benign_archetypes(rng, benign_pool, substitutable, n_archetypes=10):
    """Call-shape templates; resources are re-sampled per trace."""
    archetypes = []
    for b in range(n_archetypes):
        size = min(3 + int(rng.integers(3)), len(benign_pool))
        picks = rng.choice(len(benign_pool), size=size, replace=False)
        apis = [benign_pool[int(i)] for i in picks]
        # legitimate software also opens files and registry keys
        apis.append(substitutable[int(rng.integers(len(substitutable)))])
        length = 7 + int(rng.integers(6))
        shape = []
        for _ in range(length):
            api = apis[int(rng.integers(len(apis)))]
            shape.append((api, rng.random() < 0.5))  # True: takes a resource arg
        archetypes.append(shape)
    return archetypes


def _render_benign(archetype, vocab: _BenignVocab, rng, noise_apis, benign_pool):
    calls = []
    order = _child_order(len(archetype), None, 0.0, rng)
    for idx in order:
        api, takes_resource = archetype[idx]
        if takes_resource:
            args = (("str", vocab.sample(rng)),)
        else:
            args = (("int", int(rng.integers(8))),)
        calls.append(ApiCallEvent(api_name=api, arguments=args))
    for _ in range(noise_apis):
        api = benign_pool[int(rng.integers(len(benign_pool)))]
        pos = int(rng.integers(len(calls) + 1))
        calls.insert(pos, ApiCallEvent(api_name=api,
                                       arguments=(("int", int(rng.integers(4))),)))
    return calls


def _evolve_family(state: _FamilyState, month: int, cfg: EvolutionConfig, rng,
                   neighbors, substitutable, log) -> None:
    for original in sorted(state.api_map):
        if rng.random() >= cfg.p_replace:
            continue
        current = state.api_map[original]
        if cfg.hostile:
            pool = [a for a in substitutable
                    if a != current and a not in neighbors.get(current, [])]
        else:
            # evolution never reverts: the walk avoids the original name
            pool = [a for a in neighbors.get(current, []) if a != original]
        if not pool:
            continue
        new = pool[int(rng.integers(len(pool)))]
        state.api_map[original] = new
        log.append({"family": state.family, "month": month,
                    "original": original, "from": current, "to": new})
    _mutate_resources(state.resources, cfg.p_resource_mutate, month, rng)


def _mutate_resources(resources: dict, p_mutate: float, month: int, rng) -> None:
    for key in sorted(resources):
        if rng.random() >= p_mutate:
            continue
        resources[key] = _mutate_leaf(resources[key], month, rng)


def _mutate_leaf(value: str, month: int, rng) -> str:
    tag = f"{month:02d}{int(rng.integers(100)):02d}"
    if value.startswith("http"):
        # rename the leftmost hostname label, keep scheme/suffix/path
        scheme, rest = value.split("://", 1)
        host, _, path = rest.partition("/")
        labels = host.split(".")
        labels[0] = f"x{tag}"
        return f"{scheme}://{'.'.join(labels)}/{path}"
    if "\\" in value:
        head, _, leaf = value.rpartition("\\")
        if "." in leaf:  # keep the extension so the kind is preserved
            stem, _, ext = leaf.rpartition(".")
            return f"{head}\\{stem}_{tag}.{ext}"
        return f"{head}\\{leaf}_{tag}"
    if value.count(".") == 3 and all(p.isdigit() for p in value.split(".")):
        parts = value.split(".")
        parts[3] = str(int(rng.integers(1, 255)))
        return ".".join(parts)
    return f"{value}_{tag}"


def _child_order(n: int, parent, p_frag: float, rng) -> list[int]:
    """A permutation of template slots keeping a contiguous slice of the parent."""
    if parent is None or p_frag <= 0.0:
        order = list(range(n))
        # light jitter: a couple of adjacent swaps
        for _ in range(2):
            if n >= 2:
                i = int(rng.integers(n - 1))
                order[i], order[i + 1] = order[i + 1], order[i]
        return order
    k = max(1, int(round(p_frag * n)))
    start = int(rng.integers(0, n - k + 1))
    window = parent[start:start + k]
    rest = [i for i in parent if i not in set(window)]
    rest = [rest[int(j)] for j in rng.permutation(len(rest))]
    pos = int(rng.integers(len(rest) + 1))
    return rest[:pos] + list(window) + rest[pos:]


def _render(state: _FamilyState, order, noise_apis: int, benign_pool, rng):
    calls = []
    for idx in order:
        original, spec = state.template[idx]
        args = []
        for kind, value in spec:
            if kind == "res":
                args.append(("str", state.resources[value]))
            else:
                args.append(("int", value))
        calls.append(ApiCallEvent(api_name=state.api_map[original],
                                  arguments=tuple(args)))
    for _ in range(noise_apis):
        api = benign_pool[int(rng.integers(len(benign_pool)))]
        pos = int(rng.integers(len(calls) + 1))
        calls.insert(pos, ApiCallEvent(api_name=api,
                                       arguments=(("int", int(rng.integers(4))),)))
    return calls
