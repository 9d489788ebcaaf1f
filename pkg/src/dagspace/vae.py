"""VAE objective, reparameterized training loop, and the basic-ability
metrics (reconstruction, prior validity, uniqueness, novelty)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import dag as dg
from . import decoder as dec_mod
from . import encoder as enc_mod
from .autodiff import AdamState, Parameter, Tensor


@dataclass
class TrainConfig:
    domain: str = dg.DOMAIN_BN
    alpha: float = 0.005  # KLD weight
    lr: float = 1e-4
    plateau_patience: int = 10
    lr_decay: float = 0.1
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    hidden: int = 64
    latent: int = 16
    bidirectional: Optional[bool] = None  # default: on for neural-arch only
    max_nodes: int = 32

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 < self.lr_decay < 1.0:
            raise ValueError("lr_decay must be in (0, 1)")
        if self.bidirectional is None:
            self.bidirectional = self.domain == dg.DOMAIN_NN

    def to_json_obj(self) -> dict:
        return {k: getattr(self, k) for k in (
            "domain", "alpha", "lr", "plateau_patience", "lr_decay",
            "batch_size", "epochs", "seed", "hidden", "latent",
            "bidirectional", "max_nodes")}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass
class Model:
    encoder: enc_mod.EncoderParams
    decoder: dec_mod.DecoderParams
    vocab: dg.Vocab
    domain: str
    node_cap: int

    def parameters(self) -> List[Parameter]:
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    @classmethod
    def build(cls, config: TrainConfig, vocab: Optional[dg.Vocab] = None,
              node_cap: Optional[int] = None) -> "Model":
        vocab = vocab or dg.vocab_for_domain(config.domain)
        variant = enc_mod.variant_for_domain(config.domain)
        rng = np.random.default_rng(config.seed)
        encoder = enc_mod.EncoderParams(
            rng, vocab.size, config.hidden, config.latent, variant,
            bidirectional=config.bidirectional, max_nodes=config.max_nodes)
        decoder = dec_mod.DecoderParams(
            rng, vocab.size, config.hidden, config.latent, variant,
            max_nodes=config.max_nodes)
        return cls(encoder, decoder, vocab, config.domain,
                   node_cap=node_cap or config.max_nodes)

    def decode(self, z: np.ndarray, rng: np.random.Generator) -> dg.Dag:
        return dec_mod.decode_sample(z, self.decoder, rng, self.node_cap,
                                     self.vocab, self.domain)


# ---------------------------------------------------------------------------
# Objective


def kld_standard_normal(mu, logvar) -> Tensor:
    """Closed-form KL(N(mu, diag exp(logvar)) || N(0, I)), summed."""
    mu = mu if isinstance(mu, Tensor) else Tensor(np.atleast_2d(mu))
    logvar = logvar if isinstance(logvar, Tensor) else Tensor(np.atleast_2d(logvar))
    if mu.data.shape != logvar.data.shape:
        raise ad.ShapeError(f"mu shape {mu.data.shape} != logvar shape {logvar.data.shape}")
    inner = ad.sub(ad.add(ad.add_const(logvar, 1.0), ad.scale(ad.square(mu), -1.0)),
                   ad.exp(logvar))
    return ad.scale(ad.sum_(inner), -0.5)


def reparameterize(mu: Tensor, logvar: Tensor, eps: np.ndarray) -> Tensor:
    """z = mu + exp(logvar/2) * eps, with logvar clamped to [-10, 10]."""
    sigma = ad.exp(ad.scale(ad.clip(logvar, -10.0, 10.0), 0.5))
    return ad.add(mu, ad.mul(sigma, Tensor(eps)))


def elbo_loss_batch(dags: Sequence[dg.Dag], model: Model, eps: np.ndarray,
                    alpha: float) -> tuple:
    """Summed loss over a batch plus (nll, kld) component values."""
    mu, logvar = enc_mod.encode_batch(dags, model.encoder, model.vocab)
    kld = kld_standard_normal(mu, logvar)
    z = reparameterize(mu, logvar, eps)
    nll = dec_mod.teacher_forcing_nll_batch(z, dags, model.decoder, model.vocab)
    loss = ad.add(nll, ad.scale(kld, alpha))
    return loss, float(nll.data), float(kld.data)


def elbo_loss(d: dg.Dag, model: Model, rng: np.random.Generator,
              alpha: float = 0.005) -> Tensor:
    """Reparameterized single-dag loss: reconstruction NLL + alpha * KLD."""
    eps = rng.standard_normal((1, model.encoder.latent))
    loss, _, _ = elbo_loss_batch([d], model, eps, alpha)
    return loss


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainState:
    model: Model
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0
    best_loss: float = math.inf
    epochs_since_improvement: int = 0
    history: List[float] = field(default_factory=list)


def init_train_state(dataset: Sequence[dg.Dag], config: TrainConfig,
                     vocab: Optional[dg.Vocab] = None) -> TrainState:
    vocab = vocab or dg.vocab_for_domain(config.domain)
    wrapped_n = max(
        (dg.with_virtual_endpoints(d, vocab) if d.domain == dg.DOMAIN_BN
         else dg.ensure_single_endpoints(d, vocab)).n
        for d in dataset)
    model = Model.build(config, vocab, node_cap=wrapped_n + 2)
    adam = AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    return TrainState(model, adam, rng)


def train_epoch(state: TrainState, dataset: Sequence[dg.Dag],
                config: TrainConfig) -> float:
    """One pass of mini-batch Adam; returns the epoch mean per-dag loss."""
    model = state.model
    params = model.parameters()
    rng = state.rng
    perm = rng.permutation(len(dataset))
    total = 0.0
    for lo in range(0, len(dataset), config.batch_size):
        idx = perm[lo:lo + config.batch_size]
        batch = [dataset[i] for i in idx]
        eps = rng.standard_normal((len(batch), config.latent))
        with ad.Tape() as tape:
            loss, _, _ = elbo_loss_batch(batch, model, eps, config.alpha)
            batch_loss = float(loss.data)
            if not math.isfinite(batch_loss):
                raise FloatingPointError(
                    f"non-finite training loss {batch_loss} at epoch {state.epoch}")
            mean_loss = ad.scale(loss, 1.0 / len(batch))
            ad.backward(mean_loss, tape)
        ad.adam_step(state.adam, params)
        total += batch_loss
    return total / len(dataset)


def _update_schedule(state: TrainState, config: TrainConfig, epoch_loss: float):
    # "does not decrease" means: no improvement on the best epoch loss by
    # at least 1e-4 for plateau_patience consecutive epochs
    if epoch_loss < state.best_loss - 1e-4:
        state.best_loss = epoch_loss
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= config.plateau_patience:
            state.adam.lr *= config.lr_decay
            state.epochs_since_improvement = 0


def train(dataset: Sequence[dg.Dag], config: TrainConfig,
          state: Optional[TrainState] = None,
          on_epoch: Optional[Callable[[TrainState], None]] = None) -> tuple:
    """Train to config.epochs; returns (model, per-epoch mean loss history).

    Pass a resumed TrainState to continue an interrupted run; given the
    same seed the result is identical to an uninterrupted run.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    for d in dataset:
        if not dg.is_valid(d):
            raise ValueError(f"dataset contains an invalid {d.domain} dag")
    if state is None:
        state = init_train_state(dataset, config)
    while state.epoch < config.epochs:
        epoch_loss = train_epoch(state, dataset, config)
        state.epoch += 1
        state.history.append(epoch_loss)
        _update_schedule(state, config, epoch_loss)
        if on_epoch is not None:
            on_epoch(state)
    return state.model, state.history


# ---------------------------------------------------------------------------
# Checkpoint round-trip


def checkpoint_extra(state: TrainState, config: TrainConfig) -> dict:
    return {
        "config": config.to_json_obj(),
        "vocab": state.model.vocab.to_json_obj(),
        "node_cap": state.model.node_cap,
        "train": {
            "epoch": state.epoch,
            "best_loss": state.best_loss,
            "epochs_since_improvement": state.epochs_since_improvement,
            "history": state.history,
            "adam": state.adam.state_dict(),
            "rng": state.rng.bit_generator.state,
        },
    }


def save_train_checkpoint(path, state: TrainState, config: TrainConfig):
    ad.save_checkpoint(path, state.model.parameters(),
                       extra=checkpoint_extra(state, config))


def load_train_checkpoint(path) -> tuple:
    """Returns (TrainState, TrainConfig) restored from a checkpoint file."""
    doc = ad.load_checkpoint(path)
    extra = doc["extra"]
    config = TrainConfig.from_json_obj(extra["config"])
    vocab = dg.Vocab.from_json_obj(extra["vocab"])
    model = Model.build(config, vocab, node_cap=extra["node_cap"])
    params = model.parameters()
    ad.restore_params(doc, params)
    tr = extra["train"]
    adam = AdamState.from_state_dict(tr["adam"], params)
    rng = np.random.default_rng(config.seed + 1)
    rng.bit_generator.state = tr["rng"]
    state = TrainState(model, adam, rng, epoch=tr["epoch"],
                       best_loss=tr["best_loss"],
                       epochs_since_improvement=tr["epochs_since_improvement"],
                       history=list(tr["history"]))
    return state, config


def load_model(path) -> Model:
    state, _ = load_train_checkpoint(path)
    return state.model


# ---------------------------------------------------------------------------
# Basic-ability metrics


@dataclass
class MetricsReport:
    reconstruction: float
    prior_validity: float
    uniqueness: Optional[float]
    novelty: Optional[float]
    invalid_prior_decodes: int = 0

    def to_json_obj(self) -> dict:
        return {
            "reconstruction": self.reconstruction,
            "prior_validity": self.prior_validity,
            "uniqueness": self.uniqueness,
            "novelty": self.novelty,
            "invalid_prior_decodes": self.invalid_prior_decodes,
        }


def metric_key(d: dg.Dag, vocab: dg.Vocab) -> str:
    """Identity used by the counting metrics: virtual endpoints stripped,
    nodes relabeled canonically."""
    if d.domain == dg.DOMAIN_BN or vocab.virtual_endpoints:
        d = dg.strip_virtual_endpoints(d, vocab)
    try:
        return dg.dag_key(dg.canonicalize(d))
    except dg.CycleError:  # unreachable for decoded dags; defensive
        return dg.dag_key(d)


def metric_reconstruction(model: Model, test_set: Sequence[dg.Dag],
                          rng: np.random.Generator, n_z: int = 10,
                          n_decode: int = 10) -> float:
    """Sample z from the posterior n_z times, decode each n_decode times,
    report the mean fraction of decodes identical to the input."""
    total = 0.0
    for d in test_set:
        target_key = metric_key(d, model.vocab)
        point = enc_mod.encode(d, model.encoder, model.vocab)
        sigma = np.exp(0.5 * np.clip(point.logvar, -10, 10))
        hits = 0
        for _ in range(n_z):
            z = point.mu + sigma * rng.standard_normal(len(point.mu))
            for _ in range(n_decode):
                out = model.decode(z, rng)
                if metric_key(out, model.vocab) == target_key:
                    hits += 1
        total += hits / (n_z * n_decode)
    return total / len(test_set)


def rescale_prior_samples(zs: np.ndarray, train_mus: np.ndarray) -> np.ndarray:
    """z = z * std(train embeddings) + mean(train embeddings), per-dimension."""
    return zs * train_mus.std(axis=0) + train_mus.mean(axis=0)


def metric_prior_validity(model: Model, train_mus: np.ndarray,
                          rng: np.random.Generator, n_z: int = 1000,
                          n_decode: int = 10) -> tuple:
    """Decode rescaled prior samples; returns (valid fraction, valid dags)."""
    zs = rescale_prior_samples(rng.standard_normal((n_z, train_mus.shape[1])),
                               train_mus)
    valid = []
    n_total = 0
    for z in zs:
        for _ in range(n_decode):
            out = model.decode(z, rng)
            if model.domain == dg.DOMAIN_BN:
                out = dg.strip_virtual_endpoints(out, model.vocab)
            n_total += 1
            if dg.is_valid(out, model.vocab):
                valid.append(out)
    return len(valid) / n_total, valid


def metric_unique_novel(valid_decodes: Sequence[dg.Dag], training_keys: set,
                        vocab: dg.Vocab) -> tuple:
    """(uniqueness, novelty) over the valid decodes; (None, None) if empty."""
    if not valid_decodes:
        return None, None
    keys = [metric_key(d, vocab) for d in valid_decodes]
    uniqueness = len(set(keys)) / len(keys)
    novelty = sum(1 for k in keys if k not in training_keys) / len(keys)
    return uniqueness, novelty


def evaluate_basic(model: Model, train_set: Sequence[dg.Dag],
                   test_set: Sequence[dg.Dag], seed: int,
                   n_prior: int = 1000) -> MetricsReport:
    """The full reconstruction/validity/uniqueness/novelty protocol."""
    rng = np.random.default_rng(seed)
    recon = metric_reconstruction(model, test_set, rng)
    train_mus = enc_mod.encode_many(train_set, model.encoder, model.vocab)
    validity, valid_dags = metric_prior_validity(model, train_mus, rng,
                                                 n_z=n_prior)
    training_keys = {metric_key(d, model.vocab) for d in train_set}
    uniq, novel = metric_unique_novel(valid_dags, training_keys, model.vocab)
    n_total = n_prior * 10
    return MetricsReport(recon, validity, uniq, novel,
                         invalid_prior_decodes=n_total - len(valid_dags))
