"""DAG representation, ordering, generators, validity rules, and JSON I/O.

Dags are immutable values: a tuple of node type indices (node ids are the
dense positions 0..n-1) plus a frozenset of directed edges.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

DAG_FORMAT = 1

DOMAIN_NN = "neural-arch"
DOMAIN_BN = "bayes-net"
DOMAIN_GENERIC = "generic"
DOMAINS = (DOMAIN_NN, DOMAIN_BN, DOMAIN_GENERIC)


class CycleError(ValueError):
    def __init__(self, node: int):
        super().__init__(f"graph contains a cycle through node {node}")
        self.node = node


@dataclass(frozen=True)
class Vocab:
    """Ordered node-type vocabulary with designated start/end types.

    When ``virtual_endpoints`` is true the start/end types never appear in
    stored dags; they are attached only while encoding/decoding and are
    stripped from generated dags before validity checks.
    """

    types: tuple
    start: str
    end: str
    virtual_endpoints: bool = False

    def __post_init__(self):
        if len(set(self.types)) != len(self.types):
            raise ValueError("duplicate type names in vocabulary")
        for name in (self.start, self.end):
            if name not in self.types:
                raise ValueError(f"start/end type {name!r} not in vocabulary")

    @property
    def size(self) -> int:
        return len(self.types)

    @property
    def start_index(self) -> int:
        return self.types.index(self.start)

    @property
    def end_index(self) -> int:
        return self.types.index(self.end)

    def index(self, name: str) -> int:
        try:
            return self.types.index(name)
        except ValueError:
            raise KeyError(f"unknown node type {name!r}")

    @property
    def content_types(self) -> tuple:
        """Types that may appear in stored dags."""
        if not self.virtual_endpoints:
            return self.types
        return tuple(t for t in self.types if t not in (self.start, self.end))

    def to_json_obj(self) -> dict:
        return {"types": list(self.types), "start": self.start, "end": self.end,
                "virtual_endpoints": self.virtual_endpoints}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Vocab":
        return cls(tuple(obj["types"]), obj["start"], obj["end"],
                   bool(obj.get("virtual_endpoints", False)))


NN_OPS = ("conv3x3", "conv5x5", "sep3x3", "sep5x5", "maxpool3x3", "avgpool3x3")
NN_VOCAB = Vocab(("input",) + NN_OPS + ("output",), start="input", end="output")
BN_VARIABLES = ("A", "S", "T", "L", "B", "E", "X", "D")
BN_VOCAB = Vocab(("start",) + BN_VARIABLES + ("end",), start="start", end="end",
                 virtual_endpoints=True)


def vocab_for_domain(domain: str) -> Vocab:
    if domain == DOMAIN_NN:
        return NN_VOCAB
    if domain == DOMAIN_BN:
        return BN_VOCAB
    raise ValueError(f"no default vocabulary for domain {domain!r}")


@dataclass(frozen=True)
class Dag:
    """Typed DAG with dense node ids 0..n-1. Acyclicity is not enforced at
    construction (cycle detection is topological_sort's job) but self-loops
    and dangling edge endpoints are rejected."""

    types: tuple
    edges: frozenset
    domain: str = DOMAIN_GENERIC

    def __post_init__(self):
        n = len(self.types)
        for (u, v) in self.edges:
            if u == v:
                raise ValueError(f"self-loop on node {u}")
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u},{v}) references a node outside 0..{n - 1}")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")

    @property
    def n(self) -> int:
        return len(self.types)

    def predecessors(self, v: int) -> list:
        return sorted(u for (u, w) in self.edges if w == v)

    def successors(self, u: int) -> list:
        return sorted(w for (x, w) in self.edges if x == u)


def make_dag(types: Sequence[int], edges: Iterable, domain: str = DOMAIN_GENERIC) -> Dag:
    return Dag(tuple(types), frozenset((int(u), int(v)) for u, v in edges), domain)


def topological_sort(dag: Dag) -> list:
    """Kahn's algorithm with a min-node-id tie-break; deterministic."""
    indeg = [0] * dag.n
    succs = [[] for _ in range(dag.n)]
    for (u, v) in dag.edges:
        indeg[v] += 1
        succs[u].append(v)
    heap = [v for v in range(dag.n) if indeg[v] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        u = heapq.heappop(heap)
        order.append(u)
        for v in succs[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    if len(order) < dag.n:
        on_cycle = min(v for v in range(dag.n) if indeg[v] > 0)
        raise CycleError(on_cycle)
    return order


def is_acyclic(dag: Dag) -> bool:
    try:
        topological_sort(dag)
        return True
    except CycleError:
        return False


def canonicalize(dag: Dag) -> Dag:
    """Relabel nodes so ids follow the deterministic topological order."""
    order = topological_sort(dag)
    new_id = {old: i for i, old in enumerate(order)}
    return make_dag(
        [dag.types[old] for old in order],
        [(new_id[u], new_id[v]) for (u, v) in dag.edges],
        dag.domain,
    )


def ensure_single_endpoints(dag: Dag, vocab: Vocab) -> Dag:
    """Add a virtual start/end node when there are multiple sources/sinks.

    Unchanged when the dag already has exactly one source and one sink.
    """
    sources = [v for v in range(dag.n) if not any(e[1] == v for e in dag.edges)]
    sinks = [v for v in range(dag.n) if not any(e[0] == v for e in dag.edges)]
    types = list(dag.types)
    edges = set(dag.edges)
    if len(sources) != 1:
        s = len(types)
        types.append(vocab.start_index)
        edges.update((s, v) for v in sources)
    if len(sinks) != 1:
        t = len(types)
        types.append(vocab.end_index)
        edges.update((v, t) for v in sinks)
    if len(types) == dag.n:
        return dag
    return make_dag(types, edges, dag.domain)


def with_virtual_endpoints(dag: Dag, vocab: Vocab) -> Dag:
    """Unconditionally wrap a dag with virtual start/end nodes.

    Used for the bayes-net pipeline so every model-facing dag has the same
    start/end framing regardless of how many sources/sinks it happens to have.
    """
    sources = [v for v in range(dag.n) if not any(e[1] == v for e in dag.edges)]
    sinks = [v for v in range(dag.n) if not any(e[0] == v for e in dag.edges)]
    s = dag.n
    t = dag.n + 1
    types = list(dag.types) + [vocab.start_index, vocab.end_index]
    edges = set(dag.edges)
    edges.update((s, v) for v in sources)
    edges.update((v, t) for v in sinks)
    return make_dag(types, edges, dag.domain)


def strip_virtual_endpoints(dag: Dag, vocab: Vocab) -> Dag:
    """Drop start/end-typed nodes (and incident edges), relabeling densely."""
    keep = [v for v in range(dag.n) if dag.types[v] not in (vocab.start_index, vocab.end_index)]
    new_id = {old: i for i, old in enumerate(keep)}
    return make_dag(
        [dag.types[old] for old in keep],
        [(new_id[u], new_id[v]) for (u, v) in dag.edges if u in new_id and v in new_id],
        dag.domain,
    )


# ---------------------------------------------------------------------------
# Validity rules


def validity_check_nn(dag: Dag, vocab: Vocab = NN_VOCAB) -> list:
    """Returns the list of violated rule numbers (empty list = valid).

    1: exactly one input-typed node; 2: exactly one output-typed node;
    3: only the input node may lack predecessors; 4: only the output node
    may lack successors; 5: every node i>0 has an edge from node i-1;
    6: acyclic.
    """
    violations = []
    start_idx, end_idx = vocab.start_index, vocab.end_index
    starts = [v for v in range(dag.n) if dag.types[v] == start_idx]
    ends = [v for v in range(dag.n) if dag.types[v] == end_idx]
    if len(starts) != 1:
        violations.append(1)
    if len(ends) != 1:
        violations.append(2)
    has_pred = {v for (_, v) in dag.edges}
    has_succ = {u for (u, _) in dag.edges}
    if any(v not in has_pred and dag.types[v] != start_idx for v in range(dag.n)):
        violations.append(3)
    if any(v not in has_succ and dag.types[v] != end_idx for v in range(dag.n)):
        violations.append(4)
    if any((i - 1, i) not in dag.edges for i in range(1, dag.n)):
        violations.append(5)
    if not is_acyclic(dag):
        violations.append(6)
    return violations


def validity_check_bn(dag: Dag, vocab: Vocab = BN_VOCAB) -> list:
    """1: exactly 8 nodes; 2: each variable type appears exactly once;
    3: acyclic. Returns violated rule numbers."""
    violations = []
    expected = [vocab.index(t) for t in vocab.content_types]
    if dag.n != len(expected):
        violations.append(1)
    if sorted(dag.types) != sorted(expected):
        violations.append(2)
    if not is_acyclic(dag):
        violations.append(3)
    return violations


def is_valid(dag: Dag, vocab: Optional[Vocab] = None) -> bool:
    if dag.domain == DOMAIN_NN:
        return not validity_check_nn(dag, vocab or NN_VOCAB)
    if dag.domain == DOMAIN_BN:
        return not validity_check_bn(dag, vocab or BN_VOCAB)
    return is_acyclic(dag)


# ---------------------------------------------------------------------------
# Random generators


def random_nn_dag(rng: np.random.Generator, n_layers: int, vocab: Vocab = NN_VOCAB,
                  skip_prob: float = 0.4) -> Dag:
    """Input node, n_layers uniformly-typed op nodes, output node; the main
    path (i-1, i) is mandatory and earlier non-adjacent nodes attach with
    probability skip_prob."""
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    if not 0.0 <= skip_prob <= 1.0:
        raise ValueError("skip_prob must be in [0, 1]")
    op_indices = [vocab.index(t) for t in vocab.types
                  if t not in (vocab.start, vocab.end)]
    types = [vocab.start_index]
    types += [op_indices[rng.integers(len(op_indices))] for _ in range(n_layers)]
    types.append(vocab.end_index)
    n = len(types)
    edges = {(i - 1, i) for i in range(1, n)}
    # Skip edges target operation nodes only; the output node's incoming
    # edges stay exactly the loose ends so sequential generation can
    # reproduce any generated dag.
    for i in range(2, n - 1):
        for j in range(i - 1):
            if rng.random() < skip_prob:
                edges.add((j, i))
    return make_dag(types, edges, DOMAIN_NN)


def random_bn_dag(rng: np.random.Generator, k: int = 8, edge_prob: Optional[float] = None,
                  vocab: Vocab = BN_VOCAB) -> Dag:
    """Node i carries variable type i (fixed topological order); each pair
    (i, j) with i<j gets an edge with probability edge_prob (default 2/(k-1))."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if edge_prob is None:
        edge_prob = 2.0 / (k - 1)
    content = vocab.content_types
    if k > len(content):
        raise ValueError(f"k={k} exceeds the {len(content)} variable types")
    types = [vocab.index(content[i]) for i in range(k)]
    edges = set()
    for i in range(k):
        for j in range(i + 1, k):
            if rng.random() < edge_prob:
                edges.add((i, j))
    return make_dag(types, edges, DOMAIN_BN)


# ---------------------------------------------------------------------------
# Computation-equivalence expansion


def unshare_expand(dag: Dag, node_cap: int = 2000) -> Dag:
    """Unroll shared subpaths into the computation tree feeding the single
    sink: each node is copied once per distinct path from it to the sink.
    The resulting dag realizes the identical composition of operations."""
    sinks = [v for v in range(dag.n) if not any(e[0] == v for e in dag.edges)]
    if len(sinks) != 1:
        raise ValueError(f"unshare_expand needs a single sink, found {len(sinks)}")
    order = topological_sort(dag)
    # copies of v = number of v -> sink paths
    paths = [0] * dag.n
    paths[sinks[0]] = 1
    for v in reversed(order):
        if v != sinks[0]:
            paths[v] = sum(paths[w] for w in dag.successors(v))
    total = sum(paths)
    if total > node_cap:
        raise ValueError(f"unshare_expand would create {total} nodes, exceeding cap {node_cap}")

    types = []
    edges = []
    preds = {v: dag.predecessors(v) for v in range(dag.n)}

    def build(v: int) -> int:
        new = len(types)
        types.append(dag.types[v])
        for u in preds[v]:
            edges.append((build(u), new))
        return new

    build(sinks[0])
    return canonicalize(make_dag(types, edges, dag.domain))


# ---------------------------------------------------------------------------
# Identity and serialization


def dag_key(dag: Dag) -> str:
    """Canonical string; equal iff the node-id-labeled graphs are identical."""
    edge_str = ",".join(f"{u}-{v}" for (u, v) in sorted(dag.edges))
    type_str = ",".join(str(t) for t in dag.types)
    return f"{dag.domain}|{type_str}|{edge_str}"


def to_json_obj(dag: Dag, vocab: Vocab) -> dict:
    return {
        "format": DAG_FORMAT,
        "domain": dag.domain,
        "nodes": [{"id": i, "type": vocab.types[t]} for i, t in enumerate(dag.types)],
        "edges": [[u, v] for (u, v) in sorted(dag.edges)],
    }


def from_json_obj(obj: dict, vocab: Vocab) -> Dag:
    if obj.get("format") != DAG_FORMAT:
        raise ValueError(f"unsupported dag format {obj.get('format')!r}")
    nodes = obj["nodes"]
    n = len(nodes)
    types = [0] * n
    seen = set()
    for entry in nodes:
        i = entry["id"]
        if not (0 <= i < n) or i in seen:
            raise ValueError(f"node ids must be dense 0..{n - 1}, got duplicate or out-of-range id {i}")
        seen.add(i)
        types[i] = vocab.index(entry["type"])
    edges = []
    for pos, (u, v) in enumerate(obj["edges"]):
        if not (0 <= u < n and 0 <= v < n):
            raise ValueError(f"edge #{pos} ({u},{v}) references a node outside 0..{n - 1}")
        edges.append((u, v))
    return make_dag(types, edges, obj.get("domain", DOMAIN_GENERIC))


def to_json(dag: Dag, vocab: Vocab) -> str:
    return json.dumps(to_json_obj(dag, vocab), sort_keys=True, separators=(",", ":"))


def from_json(text: str, vocab: Vocab) -> Dag:
    return from_json_obj(json.loads(text), vocab)


def save_dataset(path, dags: Sequence[Dag], vocab: Vocab,
                 scores: Optional[Sequence[float]] = None):
    """One JSON object per line; optional per-line score field."""
    with open(path, "w") as fh:
        for i, dag in enumerate(dags):
            obj = to_json_obj(dag, vocab)
            if scores is not None:
                obj["score"] = float(scores[i])
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def load_dataset(path, vocab: Vocab):
    """Returns (dags, scores); scores is None unless every line carries one."""
    dags, scores = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON at column {e.colno}: {e.msg}")
            try:
                dags.append(from_json_obj(obj, vocab))
            except (ValueError, KeyError) as e:
                raise ValueError(f"{path}:{lineno}: {e}")
            scores.append(obj.get("score"))
    if any(s is None for s in scores):
        return dags, None
    return dags, [float(s) for s in scores]


def save_vocab(path, vocab: Vocab):
    with open(path, "w") as fh:
        json.dump(vocab.to_json_obj(), fh, sort_keys=True)


def load_vocab(path) -> Vocab:
    with open(path) as fh:
        return Vocab.from_json_obj(json.load(fh))
