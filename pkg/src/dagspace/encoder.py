"""Message-passing encoder producing posterior parameters over the latent space.

Node states are computed strictly in dependency order; a node's incoming
message is a gated sum over its predecessors. Three aggregator variants:

* ``plain``      — gated sum of predecessor hidden states
* ``neural-arch``— hidden states concatenated with global-id one-hots
                   (order-aware, for concatenation-style layer inputs)
* ``bayes-net``  — gated sum of predecessor *type* one-hots; the output
                   state is the sum over all node states

Batches of same-sized dags share one forward pass; a single dag is a
batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import dag as dg
from .autodiff import Tensor
from .nn import GatedSum, GruCell, Linear, Module

VARIANTS = ("plain", dg.DOMAIN_NN, dg.DOMAIN_BN)


@dataclass
class LatentPoint:
    """Posterior mean and log-variance of a dag's embedding."""

    mu: np.ndarray
    logvar: np.ndarray


def variant_for_domain(domain: str) -> str:
    return domain if domain in (dg.DOMAIN_NN, dg.DOMAIN_BN) else "plain"


def aggregator_input_dim(variant: str, hidden: int, vocab_size: int, max_nodes: int) -> int:
    if variant == "plain":
        return hidden
    if variant == dg.DOMAIN_NN:
        return hidden + max_nodes
    if variant == dg.DOMAIN_BN:
        return vocab_size
    raise ValueError(f"unknown aggregator variant {variant!r}")


class EncoderParams(Module):
    def __init__(self, rng: np.random.Generator, vocab_size: int, hidden: int,
                 latent: int, variant: str = "plain", bidirectional: bool = False,
                 max_nodes: int = 32):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.latent = latent
        self.variant = variant
        self.bidirectional = bidirectional
        self.max_nodes = max_nodes
        agg_in = aggregator_input_dim(variant, hidden, vocab_size, max_nodes)
        self.gru = GruCell(rng, vocab_size, hidden, "enc.gru")
        self.agg = GatedSum(rng, agg_in, hidden, "enc.agg")
        self.mu_head = Linear(rng, hidden, latent, "enc.mu")
        self.logvar_head = Linear(rng, hidden, latent, "enc.logvar")
        if bidirectional:
            self.gru_rev = GruCell(rng, vocab_size, hidden, "enc.gru_rev")
            self.agg_rev = GatedSum(rng, agg_in, hidden, "enc.agg_rev")
            self.fuse = Linear(rng, 2 * hidden, hidden, "enc.fuse")


# ---------------------------------------------------------------------------
# Spec-level aggregator entry points (single vectors, exercised by tests)


def aggregate_plain(hiddens: Sequence[Tensor], params: EncoderParams) -> Tensor:
    """Gated sum of predecessor hidden states; empty input gives zeros."""
    if not hiddens:
        return Tensor(np.zeros((1, params.hidden)))
    out = params.agg.message(hiddens[0])
    for h in hiddens[1:]:
        out = ad.add(out, params.agg.message(h))
    return out


def aggregate_nn(entries: Sequence, params: EncoderParams) -> Tensor:
    """Entries are (hidden, global_id) pairs; ids are one-hot concatenated."""
    if not entries:
        return Tensor(np.zeros((1, params.hidden)))
    out = None
    for h, uid in entries:
        if uid >= params.max_nodes:
            raise ValueError(f"global id {uid} >= node cap {params.max_nodes}")
        onehot = np.zeros((h.data.shape[0], params.max_nodes))
        onehot[:, uid] = 1.0
        msg = params.agg.message(ad.concat([h, Tensor(onehot)], axis=1))
        out = msg if out is None else ad.add(out, msg)
    return out


def aggregate_bn(type_onehots: Sequence[Tensor], params: EncoderParams) -> Tensor:
    """Gated sum over predecessor type one-hots."""
    if not type_onehots:
        return Tensor(np.zeros((1, params.hidden)))
    out = params.agg.message(type_onehots[0])
    for x in type_onehots[1:]:
        out = ad.add(out, params.agg.message(x))
    return out


# ---------------------------------------------------------------------------
# Batched forward pass


@dataclass
class PreparedBatch:
    """Same-sized dags relabeled so processing order is 0..n-1."""

    n: int
    batch: int
    x: list  # per position: (batch, vocab_size) one-hot array
    type_idx: list  # per position: (batch,) int array
    adj: np.ndarray  # (batch, n, n) bool, adj[b, u, v] = edge u->v


def prepare_batch(dags: Sequence[dg.Dag], vocab: dg.Vocab,
                  orders: Optional[Sequence[Sequence[int]]] = None,
                  wrap: bool = True) -> PreparedBatch:
    """Wrap endpoints, relabel to a topological order, stack one-hots/masks.

    All dags must have the same node count after endpoint wrapping. An
    explicit per-dag processing order may be supplied (it must be a valid
    topological order of the wrapped dag). ``wrap=False`` processes dags
    exactly as given, which is what computation-equivalence comparisons
    need (a virtual start node would alter the computation structure).
    """
    wrapped = []
    for d in dags:
        if not wrap:
            wrapped.append(d)
        elif d.domain == dg.DOMAIN_BN or vocab.virtual_endpoints:
            wrapped.append(dg.with_virtual_endpoints(d, vocab))
        else:
            wrapped.append(dg.ensure_single_endpoints(d, vocab))
    sizes = {w.n for w in wrapped}
    if len(sizes) != 1:
        raise ValueError(f"batch mixes node counts {sorted(sizes)}")
    n = sizes.pop()
    batch = len(wrapped)
    if orders is None:
        relabeled = [dg.canonicalize(w) for w in wrapped]
    else:
        relabeled = []
        for w, order in zip(wrapped, orders):
            pos = {old: i for i, old in enumerate(order)}
            for (u, v) in w.edges:
                if pos[u] >= pos[v]:
                    raise ValueError(f"supplied order violates edge ({u},{v})")
            relabeled.append(dg.make_dag(
                [w.types[old] for old in order],
                [(pos[u], pos[v]) for (u, v) in w.edges],
                w.domain,
            ))
    x = []
    type_idx = []
    for i in range(n):
        onehot = np.zeros((batch, vocab.size))
        idx = np.array([r.types[i] for r in relabeled], dtype=np.intp)
        onehot[np.arange(batch), idx] = 1.0
        x.append(onehot)
        type_idx.append(idx)
    adj = np.zeros((batch, n, n), dtype=bool)
    for b, r in enumerate(relabeled):
        for (u, v) in r.edges:
            adj[b, u, v] = True
    return PreparedBatch(n, batch, x, type_idx, adj)


def _message_input(prep: PreparedBatch, u: int, h_u: Tensor, variant: str,
                   vocab_size: int, max_nodes: int) -> Tensor:
    if variant == "plain":
        return h_u
    if variant == dg.DOMAIN_NN:
        if u >= max_nodes:
            raise ValueError(f"node id {u} >= node cap {max_nodes}")
        onehot = np.zeros((prep.batch, max_nodes))
        onehot[:, u] = 1.0
        return ad.concat([h_u, Tensor(onehot)], axis=1)
    return Tensor(prep.x[u])  # bayes-net: type one-hot


def _direction_pass(prep: PreparedBatch, gru: GruCell, agg: GatedSum, variant: str,
                    adj: np.ndarray, order: range, hidden: int, vocab_size: int,
                    max_nodes: int) -> list:
    """One sweep over the given position order; adj[b, u, v] must mean
    'u's message feeds v' in that order. Returns per-position states."""
    batch = prep.batch
    states: list = [None] * prep.n
    msgs: list = [None] * prep.n
    zero = np.zeros((batch, hidden))
    for i in order:
        h_in = None
        col_any = adj[:, :, i]
        for u in np.flatnonzero(col_any.any(axis=0)):
            mask = col_any[:, u].astype(np.float64)[:, None]
            term = ad.mul(msgs[u], Tensor(mask))
            h_in = term if h_in is None else ad.add(h_in, term)
        if h_in is None:
            h_in = Tensor(zero)
        h_i = gru(Tensor(prep.x[i]), h_in)
        states[i] = h_i
        msgs[i] = agg.message(_message_input(prep, i, h_i, variant, vocab_size, max_nodes))
    return states


def encode_forward(prep: PreparedBatch, params: EncoderParams) -> tuple:
    """Forward sweep; returns (per-node states, output state)."""
    states = _direction_pass(prep, params.gru, params.agg, params.variant,
                             prep.adj, range(prep.n), params.hidden,
                             params.vocab_size, params.max_nodes)
    if params.variant == dg.DOMAIN_BN:
        out = states[0]
        for h in states[1:]:
            out = ad.add(out, h)
    else:
        out = states[prep.n - 1]
    return states, out


def encode_batch(dags: Sequence[dg.Dag], params: EncoderParams, vocab: dg.Vocab,
                 orders: Optional[Sequence[Sequence[int]]] = None,
                 wrap: bool = True) -> tuple:
    """Encode same-sized dags; returns (mu, logvar) tensors of shape (B, latent)."""
    prep = prepare_batch(dags, vocab, orders, wrap=wrap)
    _, out = encode_forward(prep, params)
    if params.bidirectional:
        rev_adj = prep.adj.transpose(0, 2, 1)
        rev_states = _direction_pass(prep, params.gru_rev, params.agg_rev,
                                     params.variant, rev_adj,
                                     range(prep.n - 1, -1, -1), params.hidden,
                                     params.vocab_size, params.max_nodes)
        if params.variant == dg.DOMAIN_BN:
            rev_out = rev_states[0]
            for h in rev_states[1:]:
                rev_out = ad.add(rev_out, h)
        else:
            rev_out = rev_states[0]  # ending node of the reversed dag
        out = params.fuse(ad.concat([out, rev_out], axis=1))
    mu = params.mu_head(out)
    logvar = params.logvar_head(out)
    return mu, logvar


def encode(d: dg.Dag, params: EncoderParams, vocab: dg.Vocab,
           order: Optional[Sequence[int]] = None, wrap: bool = True) -> LatentPoint:
    """Encode one dag to its posterior parameters (no gradients recorded)."""
    with ad.no_grad():
        mu, logvar = encode_batch([d], params, vocab,
                                  orders=None if order is None else [order],
                                  wrap=wrap)
    return LatentPoint(mu.data[0].copy(), logvar.data[0].copy())


def encode_many(dags: Sequence[dg.Dag], params: EncoderParams, vocab: dg.Vocab,
                group: int = 256) -> np.ndarray:
    """Posterior means for a list of same-sized dags, batched for speed."""
    mus = []
    with ad.no_grad():
        for i in range(0, len(dags), group):
            mu, _ = encode_batch(dags[i:i + group], params, vocab)
            mus.append(mu.data)
    return np.concatenate(mus, axis=0)
