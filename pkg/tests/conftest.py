"""Shared fixtures and graph helpers for the test suite."""

import numpy as np
import pytest

from dagspace import dag as dg
from dagspace import encoder as enc_mod


_PYTEST_CONFIG = None


def pytest_configure(config):
    global _PYTEST_CONFIG
    _PYTEST_CONFIG = config


def print_uncaptured(line: str):
    """Print to the real terminal even under pytest's fd-level capture."""
    capman = (_PYTEST_CONFIG.pluginmanager.getplugin("capturemanager")
              if _PYTEST_CONFIG else None)
    if capman is not None:
        with capman.global_and_fixture_disabled():
            print(line, flush=True)
    else:
        print(line, flush=True)


def relabel(d: dg.Dag, perm) -> dg.Dag:
    """Apply a node-id permutation: node old becomes node perm[old]."""
    perm = list(perm)
    types = [0] * d.n
    for old in range(d.n):
        types[perm[old]] = d.types[old]
    edges = [(perm[u], perm[v]) for (u, v) in d.edges]
    return dg.make_dag(types, edges, d.domain)


def random_relabel(d: dg.Dag, rng: np.random.Generator) -> dg.Dag:
    return relabel(d, rng.permutation(d.n))


def random_topo_order(d: dg.Dag, rng: np.random.Generator) -> list:
    """A uniformly-randomized (not uniform-distribution) topological order."""
    indeg = [0] * d.n
    succs = [[] for _ in range(d.n)]
    for (u, v) in d.edges:
        indeg[v] += 1
        succs[u].append(v)
    avail = [v for v in range(d.n) if indeg[v] == 0]
    order = []
    while avail:
        v = avail.pop(int(rng.integers(len(avail))))
        order.append(v)
        for w in succs[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                avail.append(w)
    if len(order) != d.n:
        raise dg.CycleError(0)
    return order


def diamond(domain=dg.DOMAIN_GENERIC) -> dg.Dag:
    return dg.make_dag([0, 1, 2, 3], [(0, 1), (0, 2), (1, 3), (2, 3)], domain)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_bn_encoder():
    r = np.random.default_rng(42)
    return enc_mod.EncoderParams(r, dg.BN_VOCAB.size, hidden=12, latent=5,
                                 variant=dg.DOMAIN_BN)


@pytest.fixture
def small_nn_encoder():
    r = np.random.default_rng(42)
    return enc_mod.EncoderParams(r, dg.NN_VOCAB.size, hidden=12, latent=5,
                                 variant=dg.DOMAIN_NN, max_nodes=24)


@pytest.fixture
def small_plain_encoder():
    r = np.random.default_rng(42)
    return enc_mod.EncoderParams(r, dg.NN_VOCAB.size, hidden=12, latent=5,
                                 variant="plain")
