"""Sequential DAG generation from latent vectors, plus the teacher-forced
negative log-likelihood used for training.

Generation adds one node at a time: sample its type from the current graph
state, then decide incoming edges from existing nodes in reverse creation
order, refreshing the new node's state after every accepted edge. Edges
always point at the newest node, so generated graphs are acyclic by
construction.

The teacher-forced loss runs the same decision sequence with every outcome
forced to the ground truth; same-sized dags are processed as one batched
pass (masked updates keep per-dag histories separate).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import dag as dg
from .autodiff import Tensor
from .encoder import PreparedBatch, aggregator_input_dim, prepare_batch
from .nn import GatedSum, GruCell, Mlp2, Module


class DecoderParams(Module):
    def __init__(self, rng: np.random.Generator, vocab_size: int, hidden: int,
                 latent: int, variant: str = "plain", max_nodes: int = 32):
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.latent = latent
        self.variant = variant
        self.max_nodes = max_nodes
        agg_in = aggregator_input_dim(variant, hidden, vocab_size, max_nodes)
        self.init_net = Mlp2(rng, latent, hidden, "dec.init")
        self.gru = GruCell(rng, vocab_size, hidden, "dec.gru")
        self.f_add_vertex = Mlp2(rng, hidden, vocab_size, "dec.add_vertex")
        # Bayes-net node states are built from parent-type messages only, so
        # the edge scorer additionally reads h0 to stay conditioned on the
        # latent code throughout generation.
        edge_in = 3 * hidden if variant == dg.DOMAIN_BN else 2 * hidden
        self.f_add_edge = Mlp2(rng, edge_in, 1, "dec.add_edge")
        self.agg = GatedSum(rng, agg_in, hidden, "dec.agg")


def _onehot(idx: int, size: int) -> np.ndarray:
    x = np.zeros((1, size))
    x[0, idx] = 1.0
    return x


def _msg_input(params: DecoderParams, node_id: int, h: Tensor, type_idx: int) -> Tensor:
    if params.variant == "plain":
        return h
    if params.variant == dg.DOMAIN_NN:
        if node_id >= params.max_nodes:
            raise ValueError(f"node id {node_id} >= node cap {params.max_nodes}")
        return ad.concat([h, Tensor(_onehot(node_id, params.max_nodes))], axis=1)
    return Tensor(_onehot(type_idx, params.vocab_size))


# ---------------------------------------------------------------------------
# Step-by-step generation (single dag)


@dataclass
class GenerationState:
    """Partial dag under construction plus per-node hidden states."""

    params: DecoderParams
    vocab: dg.Vocab
    domain: str
    h0: Tensor
    types: list = field(default_factory=list)
    edges: set = field(default_factory=set)
    hidden: list = field(default_factory=list)  # per node (1, H) tensor
    msgs: list = field(default_factory=list)  # finalized aggregator messages
    finished: bool = False

    @property
    def n(self) -> int:
        return len(self.types)

    def graph_state(self) -> Tensor:
        """h0 before any node exists; afterwards the last node's state, or
        the sum of all node states for the bayes-net variant."""
        if self.params.variant == dg.DOMAIN_BN:
            if not self.hidden:
                return Tensor(np.zeros((1, self.params.hidden)))
            out = self.hidden[0]
            for h in self.hidden[1:]:
                out = ad.add(out, h)
            return out
        return self.h0 if not self.hidden else self.hidden[-1]

    def to_dag(self) -> dg.Dag:
        return dg.make_dag(self.types, self.edges, self.domain)


def init_state(z, params: DecoderParams, vocab: dg.Vocab, domain: str) -> GenerationState:
    """Map z to the initial hidden state pending for the first node."""
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64).reshape(1, -1))
    if z.data.shape[-1] != params.latent:
        raise ad.ShapeError(f"latent size {z.data.shape[-1]} != expected {params.latent}")
    return GenerationState(params, vocab, domain, h0=params.init_net(z))


def step_add_vertex(state: GenerationState,
                    rng: Optional[np.random.Generator] = None,
                    forced_type: Optional[int] = None):
    """Sample (or force) the next node's type.

    Returns (type_index, type_probabilities). On the ending type the
    generation stops and all loose ends are connected to the new node. A
    first-step ending type is kept as a regular node so the output always
    has at least two nodes.
    """
    if state.finished:
        raise RuntimeError("generation already finished")
    params, vocab = state.params, state.vocab
    logits = params.f_add_vertex(state.graph_state())
    probs = ad.softmax(logits, axis=1)
    if forced_type is not None:
        t = int(forced_type)
    else:
        t = int(rng.choice(params.vocab_size, p=probs.data[0] / probs.data[0].sum()))
    i = state.n
    if t == vocab.end_index and i > 0:
        loose = [v for v in range(i) if not any(e[0] == v for e in state.edges)]
        state.types.append(t)
        state.edges.update((v, i) for v in loose)
        state.finished = True
        return t, probs
    state.types.append(t)
    # A node with no predecessors (yet) consumes h0 as its incoming state,
    # so the latent code conditions every node phase, not only the first.
    # Accepted edges replace it with the aggregated message (step_add_edges).
    state.hidden.append(params.gru(Tensor(_onehot(t, params.vocab_size)), state.h0))
    state.msgs.append(None)  # finalized after the edge phase
    return t, probs


def step_add_edges(state: GenerationState,
                   rng: Optional[np.random.Generator] = None,
                   forced_preds: Optional[set] = None):
    """Decide incoming edges for the newest node, newest candidates first.

    Returns the list of (j, probability, accepted) decisions. For the
    neural-arch domain the main-path edge (i-1, i) is always accepted.
    After each accepted edge the node's state is recomputed from its
    enlarged predecessor set. The node's aggregator message is finalized
    at the end of the phase.
    """
    if state.finished:
        raise RuntimeError("generation already finished")
    params = state.params
    i = state.n - 1
    h_i = state.hidden[i]
    x_i = Tensor(_onehot(state.types[i], params.vocab_size))
    agg_sum = Tensor(np.zeros((1, params.hidden)))
    decisions = []
    bn = params.variant == dg.DOMAIN_BN
    for j in range(i - 1, -1, -1):
        parts = [state.hidden[j], h_i] + ([state.h0] if bn else [])
        logit = params.f_add_edge(ad.concat(parts, axis=1))
        p = ad.sigmoid(logit)
        if forced_preds is not None:
            accept = j in forced_preds
        elif state.domain == dg.DOMAIN_NN and j == i - 1:
            accept = True
        else:
            accept = bool(rng.random() < p.data[0, 0])
        decisions.append((j, float(p.data[0, 0]), accept))
        if accept:
            state.edges.add((j, i))
            agg_sum = ad.add(agg_sum, state.msgs[j])
            h_i = params.gru(x_i, agg_sum)
    state.hidden[i] = h_i
    state.msgs[i] = params.agg.message(_msg_input(params, i, h_i, state.types[i]))
    return decisions


def decode_sample(z, params: DecoderParams, rng: np.random.Generator,
                  node_cap: int, vocab: dg.Vocab, domain: str) -> dg.Dag:
    """Sample one dag from a latent point; terminates within node_cap nodes."""
    if node_cap < 2:
        raise ValueError("node_cap must be >= 2")
    with ad.no_grad():
        state = init_state(z, params, vocab, domain)
        while not state.finished:
            forced = vocab.end_index if state.n >= node_cap - 1 else None
            t, _ = step_add_vertex(state, rng, forced_type=forced)
            if not state.finished:
                step_add_edges(state, rng)
    return state.to_dag()


# ---------------------------------------------------------------------------
# Teacher-forced negative log-likelihood (batched)


def _prepare_targets(targets: Sequence[dg.Dag], vocab: dg.Vocab) -> PreparedBatch:
    prep = prepare_batch(targets, vocab)
    # Teacher forcing requires the last position to be the single ending
    # node; prepare_batch's canonical topological relabeling guarantees it.
    return prep


def teacher_forcing_nll_batch(z: Tensor, targets: Sequence[dg.Dag],
                              params: DecoderParams, vocab: dg.Vocab) -> Tensor:
    """Summed reconstruction NLL over a batch of same-sized target dags.

    Every type and edge decision is forced to the ground truth; the loss is
    the sum of per-step negative log-probabilities, differentiable w.r.t.
    z and all decoder parameters.
    """
    prep = _prepare_targets(targets, vocab)
    n, batch = prep.n, prep.batch
    if z.data.shape != (batch, params.latent):
        raise ad.ShapeError(f"z shape {z.data.shape} != ({batch}, {params.latent})")
    h0 = params.init_net(z)
    zero_h = np.zeros((batch, params.hidden))

    states: list = [None] * n
    msgs: list = [None] * n
    loss = None

    def add_loss(term):
        nonlocal loss
        loss = term if loss is None else ad.add(loss, term)

    bn = params.variant == dg.DOMAIN_BN
    hg_sum = None
    for i in range(n):
        if bn:
            hg = Tensor(zero_h) if hg_sum is None else hg_sum
        else:
            hg = h0 if i == 0 else states[i - 1]
        logp = ad.log_softmax(params.f_add_vertex(hg), axis=1)
        add_loss(ad.scale(ad.sum_(ad.pick(logp, prep.type_idx[i])), -1.0))
        if i == n - 1:
            break  # ending node: loose ends connect deterministically
        x_i = Tensor(prep.x[i])
        # Predecessor-less nodes consume h0 (see step_add_vertex); accepted
        # edges switch the state to one built from the aggregated message.
        h_i = params.gru(x_i, h0)
        if i > 0:
            agg_sum = Tensor(zero_h)
            for j in range(i - 1, -1, -1):
                parts = [states[j], h_i] + ([h0] if bn else [])
                logit = params.f_add_edge(ad.concat(parts, axis=1))
                target = prep.adj[:, j, i].astype(np.float64)[:, None]
                add_loss(ad.sum_(ad.bce_with_logits(logit, target)))
                if target.any():
                    agg_sum = ad.add(agg_sum, ad.mul(msgs[j], Tensor(target)))
                    h_cand = params.gru(x_i, agg_sum)
                    h_i = ad.where_const(target.astype(bool), h_cand, h_i)
        states[i] = h_i
        msgs[i] = params.agg.message(_batch_msg_input(params, prep, i, h_i))
        if bn:
            hg_sum = h_i if hg_sum is None else ad.add(hg_sum, h_i)
    return loss


def _batch_msg_input(params: DecoderParams, prep: PreparedBatch, i: int, h_i: Tensor) -> Tensor:
    if params.variant == "plain":
        return h_i
    if params.variant == dg.DOMAIN_NN:
        if i >= params.max_nodes:
            raise ValueError(f"node id {i} >= node cap {params.max_nodes}")
        onehot = np.zeros((prep.batch, params.max_nodes))
        onehot[:, i] = 1.0
        return ad.concat([h_i, Tensor(onehot)], axis=1)
    return Tensor(prep.x[i])


def teacher_forcing_nll(z, target: dg.Dag, params: DecoderParams, vocab: dg.Vocab) -> Tensor:
    """Reconstruction NLL for a single target dag."""
    if not dg.is_valid(target, vocab) and target.domain != dg.DOMAIN_GENERIC:
        raise ValueError(f"target dag is invalid for domain {target.domain}")
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64).reshape(1, -1))
    return teacher_forcing_nll_batch(z, [target], params, vocab)


def reconstruct_with_forcing(z, target: dg.Dag, params: DecoderParams,
                             vocab: dg.Vocab) -> dg.Dag:
    """Drive the step API with the target's own decisions; used to check
    that forced generation rebuilds the target exactly."""
    wrapped = target
    if target.domain == dg.DOMAIN_BN or vocab.virtual_endpoints:
        wrapped = dg.with_virtual_endpoints(target, vocab)
    else:
        wrapped = dg.ensure_single_endpoints(target, vocab)
    wrapped = dg.canonicalize(wrapped)
    with ad.no_grad():
        state = init_state(z, params, vocab, target.domain)
        for i in range(wrapped.n):
            step_add_vertex(state, forced_type=wrapped.types[i])
            if state.finished:
                break
            step_add_edges(state, forced_preds=set(wrapped.predecessors(i)))
    return state.to_dag()
