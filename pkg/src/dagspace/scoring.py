"""Performance oracles for both domains.

Neural-arch: each operation type is a frozen affine map plus tanh; a dag's
score measures how closely the signal it computes matches a fixed target
computation on frozen probe inputs. Deterministic, and invariant under
computation-preserving rewrites.

Bayes-net: a committed 8-variable ground-truth network generates binary
data by ancestral sampling; candidate structures are scored by the
decomposable BIC (maximized log-likelihood minus a complexity penalty).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import dag as dg

SEMANTICS_SEED = 900451
SIGNAL_DIM = 8
N_PROBES = 16


# ---------------------------------------------------------------------------
# Neural-arch computation semantics


@dataclass(frozen=True)
class OpSemantics:
    """Per-type transfer functions: x -> tanh(A x + b), identity for the
    input/output types. Constants derive from one committed seed."""

    transfer: Dict[str, Tuple[np.ndarray, np.ndarray]]  # type name -> (A, b)
    identity_types: frozenset


def default_semantics(vocab: dg.Vocab = dg.NN_VOCAB, dim: int = SIGNAL_DIM,
                      seed: int = SEMANTICS_SEED) -> OpSemantics:
    rng = np.random.default_rng(seed)
    transfer = {}
    for name in vocab.types:
        if name in (vocab.start, vocab.end):
            continue
        a = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim))
        b = rng.normal(0.0, 0.1, size=dim)
        transfer[name] = (a, b)
    return OpSemantics(transfer, frozenset({vocab.start, vocab.end}))


def eval_computation(d: dg.Dag, x: np.ndarray, vocab: dg.Vocab = dg.NN_VOCAB,
                     semantics: Optional[OpSemantics] = None) -> np.ndarray:
    """Propagate a signal through the dag; each node transforms the
    elementwise mean of its predecessors' outputs, the sink's output is
    returned. Every source node receives the input signal (computation
    trees produced by unshare_expand carry one source per input path), so
    a single sink is required but sources may repeat."""
    semantics = semantics or default_semantics(vocab)
    sinks = [v for v in range(d.n) if not any(e[0] == v for e in d.edges)]
    if len(sinks) != 1:
        raise ValueError(f"eval_computation needs a single sink, got {len(sinks)}")
    x = np.asarray(x, dtype=np.float64)
    out: Dict[int, np.ndarray] = {}

    def apply_op(v: int, signal: np.ndarray) -> np.ndarray:
        name = vocab.types[d.types[v]]
        if name in semantics.identity_types:
            return signal
        if name not in semantics.transfer:
            raise KeyError(f"no semantics for node type {name!r}")
        a, b = semantics.transfer[name]
        return np.tanh(a @ signal + b)

    for v in dg.topological_sort(d):
        preds = d.predecessors(v)
        signal = x if not preds else np.mean([out[u] for u in preds], axis=0)
        out[v] = apply_op(v, signal)
    return out[sinks[0]]


def _target_dag() -> dg.Dag:
    """The fixed generator whose computation defines the proxy targets."""
    types = [dg.NN_VOCAB.index(t) for t in
             ("input", "conv3x3", "sep5x5", "maxpool3x3", "conv5x5",
              "avgpool3x3", "sep3x3", "output")]
    edges = {(i - 1, i) for i in range(1, 8)}
    edges.update({(0, 2), (1, 4), (2, 5), (3, 6), (0, 6)})
    return dg.make_dag(types, edges, dg.DOMAIN_NN)


@lru_cache(maxsize=1)
def _probes_and_targets():
    rng = np.random.default_rng(SEMANTICS_SEED + 1)
    probes = rng.normal(0.0, 1.0, size=(N_PROBES, SIGNAL_DIM))
    target = _target_dag()
    targets = np.stack([eval_computation(target, p) for p in probes])
    return probes, targets


def computation_defined(d: dg.Dag, vocab: dg.Vocab = dg.NN_VOCAB) -> bool:
    """The dag realizes a well-formed computation: acyclic, a single
    sink of the ending type, and every source of the starting type.
    Weaker than full neural-arch validity (which also pins the main-path
    convention): computation-preserving rewrites must keep their score."""
    if not dg.is_acyclic(d):
        return False
    sources = [v for v in range(d.n) if not any(e[1] == v for e in d.edges)]
    sinks = [v for v in range(d.n) if not any(e[0] == v for e in d.edges)]
    if len(sinks) != 1 or d.types[sinks[0]] != vocab.end_index:
        return False
    return all(d.types[v] == vocab.start_index for v in sources)


def nn_proxy_score(d: dg.Dag, vocab: dg.Vocab = dg.NN_VOCAB) -> float:
    """exp(-mean squared probe residual) in [0, 1]; 0 when the dag does
    not define a computation."""
    if not computation_defined(d, vocab):
        return 0.0
    probes, targets = _probes_and_targets()
    sq = 0.0
    for p, t in zip(probes, targets):
        r = eval_computation(d, p, vocab) - t
        sq += float(r @ r)
    return float(np.exp(-sq / len(probes)))


# ---------------------------------------------------------------------------
# Ground-truth Bayesian network and data sampler


@dataclass(frozen=True)
class GroundTruthBn:
    """8 binary variables; cpt[i] has one row per parent configuration
    giving P(X_i = 1 | parents), configurations indexed little-endian over
    the ascending parent list."""

    parents: Tuple[Tuple[int, ...], ...]
    cpt: Tuple[Tuple[float, ...], ...]

    def __post_init__(self):
        for i, (ps, rows) in enumerate(zip(self.parents, self.cpt)):
            if len(rows) != 2 ** len(ps):
                raise ValueError(f"node {i}: {len(rows)} CPT rows for {len(ps)} parents")

    def structure(self, domain: str = dg.DOMAIN_BN) -> dg.Dag:
        edges = [(p, i) for i, ps in enumerate(self.parents) for p in ps]
        types = [dg.BN_VOCAB.index(t) for t in dg.BN_VARIABLES]
        return dg.make_dag(types, edges, domain)


# Classic A,S,T,L,B,E,X,D topology; CPT values are committed constants
# chosen away from 0.5 so the structure is learnable from samples.
DEFAULT_GROUND_TRUTH = GroundTruthBn(
    parents=(
        (),        # A
        (),        # S
        (0,),      # T | A
        (1,),      # L | S
        (1,),      # B | S
        (2, 3),    # E | T, L
        (5,),      # X | E
        (4, 5),    # D | B, E
    ),
    cpt=(
        (0.10,),
        (0.30,),
        (0.05, 0.60),
        (0.10, 0.70),
        (0.20, 0.80),
        (0.02, 0.90, 0.90, 0.97),
        (0.05, 0.85),
        (0.10, 0.60, 0.75, 0.95),
    ),
)


BN_DATA_SEED = 314159
BN_DATA_SIZE = 5000


def sample_bn_data(gt: GroundTruthBn, n: int, seed: int) -> np.ndarray:
    """Ancestral sampling in index order; returns an (n, 8) 0/1 array."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    k = len(gt.parents)
    data = np.zeros((n, k), dtype=np.int8)
    for i in range(k):
        ps = gt.parents[i]
        if ps:
            idx = np.zeros(n, dtype=np.intp)
            for bit, p in enumerate(ps):
                idx += data[:, p].astype(np.intp) << bit
            p1 = np.asarray(gt.cpt[i])[idx]
        else:
            p1 = gt.cpt[i][0]
        data[:, i] = rng.random(n) < p1
    return data


@lru_cache(maxsize=1)
def committed_bn_data() -> np.ndarray:
    """The fixed dataset every bayes-net score is measured against."""
    data = sample_bn_data(DEFAULT_GROUND_TRUTH, BN_DATA_SIZE, BN_DATA_SEED)
    data.setflags(write=False)
    return data


def save_bn_data(path, data: np.ndarray, names: Sequence[str] = dg.BN_VARIABLES):
    with open(path, "w") as fh:
        fh.write(" ".join(names) + "\n")
        for row in data:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def load_bn_data(path) -> np.ndarray:
    with open(path) as fh:
        names = fh.readline().split()
        rows = [[int(v) for v in line.split()] for line in fh if line.strip()]
    data = np.asarray(rows, dtype=np.int8)
    if data.ndim != 2 or data.shape[1] != len(names):
        raise ValueError(f"{path}: rows do not match header width {len(names)}")
    return data


# ---------------------------------------------------------------------------
# BIC scoring


def bic_local(data: np.ndarray, child: int, parents: Sequence[int]) -> float:
    """Local BIC term for one binary child given a parent index set.

    Maximized log-likelihood sum N_ijk ln(N_ijk / N_ij) minus
    (ln N / 2) * 2^|parents| free parameters; empty counts contribute 0
    but every parent configuration still counts toward the penalty.
    """
    parents = sorted(parents)
    n = data.shape[0]
    q = 2 ** len(parents)
    idx = np.zeros(n, dtype=np.intp)
    for bit, p in enumerate(parents):
        idx += data[:, p].astype(np.intp) << bit
    counts = np.bincount(idx * 2 + data[:, child].astype(np.intp),
                         minlength=2 * q).reshape(q, 2).astype(np.float64)
    row_tot = counts.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = counts * (np.log(counts) - np.log(row_tot)[:, None])
    ll = float(np.where(counts > 0, terms, 0.0).sum())
    penalty = 0.5 * np.log(n) * q
    return ll - penalty


def bic_score(d: dg.Dag, data: np.ndarray, vocab: dg.Vocab = dg.BN_VOCAB) -> float:
    """Sum of local terms over all nodes; higher is better. Invalid dags
    score -inf (reported distinctly, never fed to a surrogate)."""
    if dg.validity_check_bn(d, vocab):
        return float("-inf")
    # Map node ids to variable columns via their types.
    content = [vocab.index(t) for t in vocab.content_types]
    col = {t: i for i, t in enumerate(content)}
    total = 0.0
    for v in range(d.n):
        parents = [col[d.types[u]] for u in d.predecessors(v)]
        total += bic_local(data, col[d.types[v]], parents)
    return total


def make_oracle(domain: str, bn_data: Optional[np.ndarray] = None):
    """Returns dag -> float for the given domain (invalid dags get -inf/0)."""
    if domain == dg.DOMAIN_NN:
        return nn_proxy_score
    if domain == dg.DOMAIN_BN:
        if bn_data is None:
            raise ValueError("bayes-net oracle needs a dataset")
        return lambda d: bic_score(d, bn_data)
    raise ValueError(f"no oracle for domain {domain!r}")
