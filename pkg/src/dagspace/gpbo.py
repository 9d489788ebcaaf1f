"""Gaussian-process surrogate over latent embeddings, expected improvement,
Kriging-Believer batch proposals, the optimization loop, and a random-search
baseline with a matched budget."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.linalg.lapack import dpotri
from scipy.stats import norm

from . import dag as dg
from .autodiff import AdamState, Parameter, adam_step


@dataclass
class BoConfig:
    iterations: int = 10
    batch_size: int = 50
    pool_size: int = 2000
    xi: float = 0.01  # EI exploration offset
    seed: int = 0
    noise_floor: float = 1e-6

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size > self.pool_size:
            raise ValueError("batch_size must not exceed pool_size")

    def to_json_obj(self) -> dict:
        return {k: getattr(self, k) for k in (
            "iterations", "batch_size", "pool_size", "xi", "seed", "noise_floor")}


@dataclass
class GpModel:
    """Squared-exponential GP over standardized targets."""

    x: np.ndarray  # (n, d) inputs
    y: np.ndarray  # (n,) standardized targets
    y_mean: float
    y_std: float
    log_s2: float  # signal variance
    log_l: float  # isotropic length scale
    log_noise: float  # noise variance
    chol: np.ndarray = field(repr=False, default=None)
    alpha: np.ndarray = field(repr=False, default=None)

    @property
    def s2(self) -> float:
        return math.exp(self.log_s2)

    @property
    def lengthscale(self) -> float:
        return math.exp(self.log_l)

    @property
    def noise(self) -> float:
        return math.exp(self.log_noise)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.maximum(
        (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T, 0.0)


def _kernel(a, b, s2, ls) -> np.ndarray:
    return s2 * np.exp(-_sqdist(a, b) / (2.0 * ls * ls))


def _chol_with_jitter(k: np.ndarray, noise: float):
    """Cholesky of k + noise*I, doubling the jitter on failure up to
    1e-2 * ||k||."""
    jitter = noise
    limit = max(1e-2 * np.linalg.norm(k), noise)
    while True:
        try:
            return cholesky(k + jitter * np.eye(len(k)), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter = max(jitter, 1e-10) * 2.0
            if jitter > limit:
                raise np.linalg.LinAlgError(
                    f"kernel matrix not positive definite even with jitter {jitter:.3e}")


def _log_marginal_and_grad(d2, y, log_s2, log_l, log_noise, noise_floor):
    n = len(y)
    s2, ls = math.exp(log_s2), math.exp(log_l)
    noise = max(math.exp(log_noise), noise_floor)
    k_sig = s2 * np.exp(-d2 / (2.0 * ls * ls))
    low, _ = _chol_with_jitter(k_sig, noise)
    alpha = cho_solve((low, True), y)
    lml = -0.5 * float(y @ alpha) - float(np.log(np.diag(low)).sum()) \
        - 0.5 * n * math.log(2.0 * math.pi)
    kinv_tri, info = dpotri(low, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"dpotri failed with info={info}")
    kinv = kinv_tri + np.tril(kinv_tri, -1).T
    w = np.outer(alpha, alpha) - kinv
    grad_s2 = 0.5 * float((w * k_sig).sum())
    grad_l = 0.5 * float((w * (k_sig * d2 / (ls * ls))).sum())
    grad_noise = 0.5 * float(np.trace(w)) * noise
    return lml, np.array([grad_s2, grad_l, grad_noise])


def fit_gp(x: np.ndarray, y: np.ndarray, noise_floor: float = 1e-6,
           steps: int = 50, lr: float = 0.05) -> GpModel:
    """Fit kernel hyperparameters by gradient ascent on the log marginal
    likelihood (Adam), targets standardized by their own mean/std."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least 2 training points")
    if not np.isfinite(y).all():
        raise ValueError("targets must be finite")
    y_mean = float(y.mean())
    y_std = float(y.std())
    if y_std == 0.0:
        y_std = 1.0
    ys = (y - y_mean) / y_std

    d2 = _sqdist(x, x)
    off_diag = d2[np.triu_indices(len(x), k=1)]
    median = float(np.sqrt(np.median(off_diag[off_diag > 0]))) if (off_diag > 0).any() else 1.0
    theta = [Parameter(np.array([0.0]), "gp.log_s2"),
             Parameter(np.array([math.log(median)]), "gp.log_l"),
             Parameter(np.array([math.log(1e-2)]), "gp.log_noise")]
    adam = AdamState(lr=lr)
    for _ in range(steps):
        _, grad = _log_marginal_and_grad(
            d2, ys, float(theta[0].data[0]), float(theta[1].data[0]),
            float(theta[2].data[0]), noise_floor)
        for p, g in zip(theta, grad):
            p.grad = np.array([-g])  # ascend
        adam_step(adam, theta)
    model = GpModel(x, ys, y_mean, y_std,
                    float(theta[0].data[0]), float(theta[1].data[0]),
                    float(theta[2].data[0]))
    _refresh_factorization(model, noise_floor)
    return model


def _refresh_factorization(model: GpModel, noise_floor: float = 1e-6):
    k = _kernel(model.x, model.x, model.s2, model.lengthscale)
    model.chol, _ = _chol_with_jitter(k, max(model.noise, noise_floor))
    model.alpha = cho_solve((model.chol, True), model.y)


def gp_predict(model: GpModel, xq: np.ndarray) -> tuple:
    """Posterior (mean, variance) at query points, standardized units.
    Variance is clamped at 0 from below."""
    xq = np.atleast_2d(np.asarray(xq, dtype=np.float64))
    ks = _kernel(xq, model.x, model.s2, model.lengthscale)
    mean = ks @ model.alpha
    v = cho_solve((model.chol, True), ks.T)
    var = np.maximum(model.s2 - (ks * v.T).sum(axis=1), 0.0)
    return mean, var


def gp_predict_raw(model: GpModel, xq: np.ndarray) -> tuple:
    """De-standardized posterior (mean, variance)."""
    mean, var = gp_predict(model, xq)
    return mean * model.y_std + model.y_mean, var * model.y_std**2


def expected_improvement_closed(mu, sigma, best_y, xi: float):
    """EI for maximization: E[max(Y - best - xi, 0)] under N(mu, sigma^2)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = mu - best_y - xi
    ei = np.where(sigma > 0.0,
                  delta * norm.cdf(np.divide(delta, sigma, where=sigma > 0.0,
                                             out=np.zeros_like(delta)))
                  + sigma * norm.pdf(np.divide(delta, sigma, where=sigma > 0.0,
                                               out=np.zeros_like(delta))),
                  np.maximum(delta, 0.0))
    return np.maximum(ei, 0.0)


def expected_improvement(model: GpModel, xq: np.ndarray, best_y: float,
                         xi: float = 0.01) -> np.ndarray:
    """EI at query points in standardized units (best_y standardized too)."""
    mean, var = gp_predict(model, xq)
    return expected_improvement_closed(mean, np.sqrt(var), best_y, xi)


def sample_candidates(model: GpModel, pool_size: int,
                      rng: np.random.Generator, n_best: int = 5) -> np.ndarray:
    """Uniform draws from the training bounding box expanded 10% per side,
    plus Gaussian perturbations of the current best points."""
    lo = model.x.min(axis=0)
    hi = model.x.max(axis=0)
    width = np.maximum(hi - lo, 1e-12)
    lo_e, hi_e = lo - 0.1 * width, hi + 0.1 * width
    n_uniform = pool_size // 2
    uniform = rng.uniform(lo_e, hi_e, size=(n_uniform, model.x.shape[1]))
    best_idx = np.argsort(model.y)[-n_best:]
    centers = model.x[rng.choice(best_idx, size=pool_size - n_uniform)]
    local = centers + rng.normal(0.0, 0.1 * width, size=centers.shape)
    return np.vstack([uniform, local])


def propose_batch_kb(model: GpModel, config: BoConfig,
                     rng: np.random.Generator,
                     candidates: Optional[np.ndarray] = None) -> np.ndarray:
    """Kriging Believer: pick the EI argmax, believe its posterior mean as a
    label, refit the covariance (hyperparameters frozen), repeat."""
    if candidates is None:
        candidates = sample_candidates(model, config.pool_size, rng)
    work = GpModel(model.x.copy(), model.y.copy(), model.y_mean, model.y_std,
                   model.log_s2, model.log_l, model.log_noise)
    _refresh_factorization(work, config.noise_floor)
    remaining = candidates.copy()
    chosen = []
    for _ in range(config.batch_size):
        best_y = float(work.y.max())
        ei = expected_improvement(work, remaining, best_y, config.xi)
        pick = int(np.argmax(ei))
        x_new = remaining[pick]
        mean, _ = gp_predict(work, x_new[None, :])
        chosen.append(x_new)
        work.x = np.vstack([work.x, x_new[None, :]])
        work.y = np.append(work.y, mean[0])
        _refresh_factorization(work, config.noise_floor)
        remaining = np.delete(remaining, pick, axis=0)
    return np.asarray(chosen)


# ---------------------------------------------------------------------------
# Optimization loops


def bo_loop(train_x: np.ndarray, train_y: np.ndarray,
            decode_fn: Callable[[np.ndarray, np.random.Generator], dg.Dag],
            oracle: Callable[[dg.Dag], float], config: BoConfig,
            rng: Optional[np.random.Generator] = None) -> List[dict]:
    """Batch BO: propose, decode each point once, score, append, refit.

    Invalid decodes (score -inf) are recorded with valid=False and excluded
    from the surrogate's training data. Duplicate dags are scored once and
    cached. Returns one record per proposed point."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    x = np.asarray(train_x, dtype=np.float64).copy()
    y = np.asarray(train_y, dtype=np.float64).copy()
    cache: dict = {}
    history = []
    model = fit_gp(x, y, config.noise_floor)
    for rnd in range(config.iterations):
        batch = propose_batch_kb(model, config, rng)
        for i, z in enumerate(batch):
            d = decode_fn(z, rng)
            key = dg.dag_key(d)
            if key in cache:
                score = cache[key]
            else:
                score = float(oracle(d))
                cache[key] = score
            valid = math.isfinite(score)
            history.append({"round": rnd, "index": i, "z": z.tolist(),
                            "dag": d, "score": score, "valid": valid})
            if valid:
                x = np.vstack([x, z[None, :]])
                y = np.append(y, score)
        model = fit_gp(x, y, config.noise_floor)
    return history


def random_search(decode_fn: Callable[[np.ndarray, np.random.Generator], dg.Dag],
                  oracle: Callable[[dg.Dag], float], config: BoConfig,
                  train_mus: np.ndarray,
                  rng: Optional[np.random.Generator] = None) -> List[dict]:
    """Same budget as bo_loop; z drawn from the rescaled standard prior."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    std = train_mus.std(axis=0)
    mean = train_mus.mean(axis=0)
    history = []
    for rnd in range(config.iterations):
        for i in range(config.batch_size):
            z = rng.standard_normal(train_mus.shape[1]) * std + mean
            d = decode_fn(z, rng)
            score = float(oracle(d))
            history.append({"round": rnd, "index": i, "z": z.tolist(),
                            "dag": d, "score": score,
                            "valid": math.isfinite(score)})
    return history


def predictive_eval(train_x: np.ndarray, train_y: np.ndarray,
                    test_x: np.ndarray, test_y: np.ndarray,
                    noise_floor: float = 1e-6) -> tuple:
    """Fit on train embeddings, evaluate on held-out ones; both RMSE and
    Pearson r are computed on standardized scores."""
    model = fit_gp(train_x, train_y, noise_floor)
    pred, _ = gp_predict(model, test_x)
    test_std = (np.asarray(test_y, dtype=np.float64) - model.y_mean) / model.y_std
    rmse = float(np.sqrt(np.mean((pred - test_std) ** 2)))
    if test_std.std() == 0.0 or pred.std() == 0.0:
        return rmse, None
    r = float(np.corrcoef(pred, test_std)[0, 1])
    return rmse, r
