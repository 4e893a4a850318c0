"""Linear weighted-rank metric learning.

The model is a low-rank projection W (d_out x d_in); the learned distance is
the Euclidean norm after projection.  Training minimizes the sampled
weighted-rank hinge loss plus either the approximate-orthonormality penalty
0.5 * lam * ||W W^T - I||_F^2 or a plain Frobenius penalty, with Adam.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import LabeledDataset, build_pair_index
from .errors import ConfigError, ValidationError
from .ranking import CompiledPairs, LossConfig, sample_triplet_batch

log = logging.getLogger(__name__)

DEGENERATE_DISTANCE = 1e-12


@dataclass(frozen=True)
class LinearMetricModel:
    """Projection matrix with shape (d_out, d_in), d_out <= d_in."""

    w: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.w, dtype=np.float64))
        object.__setattr__(self, "w", w)
        if w.ndim != 2:
            raise ValidationError("projection must be a 2-d matrix")
        if w.shape[0] > w.shape[1]:
            raise ValidationError(f"d_out {w.shape[0]} exceeds d_in {w.shape[1]}")
        if not np.all(np.isfinite(w)):
            raise ValidationError("projection contains non-finite entries")
        w.setflags(write=False)

    @property
    def d_out(self) -> int:
        return self.w.shape[0]

    @property
    def d_in(self) -> int:
        return self.w.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        """Embed one vector or a stack of row vectors."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in:
            raise ValidationError(f"expected dimension {self.d_in}, got {x.shape[-1]}")
        return x @ self.w.T


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the data."""

    loss: LossConfig
    d_out: int
    eta: float
    regularizer: str = "aon"
    batch_size: int = 512
    iterations: int = 2000
    seed: int = 0
    adam: tuple[float, float, float] = (0.9, 0.999, 1e-8)
    optimizer: str = "adam"  # "sgd" disables the moment estimates (plain step)

    def __post_init__(self):
        if self.d_out < 1:
            raise ConfigError("d_out must be >= 1")
        if self.eta <= 0:
            raise ConfigError("learning rate eta must be > 0")
        if self.regularizer not in ("aon", "frobenius"):
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        b1, b2, eps = self.adam
        if not (0 <= b1 < 1 and 0 <= b2 < 1 and eps > 0):
            raise ConfigError("adam hyperparameters need 0 <= beta < 1 and epsilon > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def _orthonormal_rows(d_in: int, d_out: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((d_in, d_out))
    q, r = np.linalg.qr(g)
    # fix the sign convention so the factorization is canonical
    q = q * np.sign(np.diag(r))
    return np.ascontiguousarray(q.T)


def init_model(d_in: int, d_out: int, seed: int) -> LinearMetricModel:
    """Orthonormal-row initialization from a seeded Gaussian matrix."""
    if not 1 <= d_out <= d_in:
        raise ConfigError(f"need 1 <= d_out <= d_in, got d_out={d_out}, d_in={d_in}")
    return LinearMetricModel(_orthonormal_rows(d_in, d_out, np.random.default_rng(seed)))


def distance(m: LinearMetricModel, xi: np.ndarray, xj: np.ndarray) -> float:
    """||W (xi - xj)||_2."""
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    if xi.shape != (m.d_in,) or xj.shape != (m.d_in,):
        raise ValidationError("vector dimensions must equal d_in")
    return float(np.linalg.norm(m.w @ (xi - xj)))


def aon_penalty(m: LinearMetricModel, lam: float) -> float:
    """0.5 * lam * ||W W^T - I||_F^2 (zero exactly when rows are orthonormal)."""
    if lam < 0:
        raise ConfigError("lam must be >= 0")
    gram = m.w @ m.w.T - np.eye(m.d_out)
    return 0.5 * lam * float(np.sum(gram * gram))


def aon_gradient(m: LinearMetricModel, lam: float) -> np.ndarray:
    """Gradient of the approximate-orthonormality penalty: 2 lam (W W^T - I) W."""
    if lam < 0:
        raise ConfigError("lam must be >= 0")
    return 2.0 * lam * (m.w @ m.w.T - np.eye(m.d_out)) @ m.w


def frobenius_penalty(m: LinearMetricModel, lam: float) -> float:
    return 0.5 * lam * float(np.sum(m.w * m.w))


def frobenius_gradient(m: LinearMetricModel, lam: float) -> np.ndarray:
    return lam * m.w


def triplet_subgradient(m: LinearMetricModel, xi: np.ndarray, xj: np.ndarray,
                        xk: np.ndarray, weight: float, gamma: float) -> np.ndarray | None:
    """Sub-gradient of weight * |gamma + d(i,j) - d(i,k)|_+ with respect to W.

    Returns the zero matrix on the flat side of the hinge and None when either
    distance is numerically zero (the direction u = W delta / d is undefined;
    callers skip such triplets).
    """
    dij_vec = m.w @ (np.asarray(xi, dtype=np.float64) - np.asarray(xj, dtype=np.float64))
    dik_vec = m.w @ (np.asarray(xi, dtype=np.float64) - np.asarray(xk, dtype=np.float64))
    dij = float(np.linalg.norm(dij_vec))
    dik = float(np.linalg.norm(dik_vec))
    if dij < DEGENERATE_DISTANCE or dik < DEGENERATE_DISTANCE:
        return None
    if gamma + dij - dik <= 0:
        return np.zeros_like(m.w)
    delta_ij = np.asarray(xi, dtype=np.float64) - np.asarray(xj, dtype=np.float64)
    delta_ik = np.asarray(xi, dtype=np.float64) - np.asarray(xk, dtype=np.float64)
    return weight * (np.outer(dij_vec / dij, delta_ij) - np.outer(dik_vec / dik, delta_ik))


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, eta: float,
              hp: tuple[float, float, float] = (0.9, 0.999, 1e-8)
              ) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns fresh arrays, inputs untouched."""
    if params.shape != grad.shape:
        raise ValidationError("parameter and gradient shapes differ")
    b1, b2, eps = hp
    t = state.step_count + 1
    m = b1 * state.first_moment + (1.0 - b1) * grad
    v = b2 * state.second_moment + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new_params = params - eta * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


def _reg_gradient(w: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    if cfg.regularizer == "aon":
        return 2.0 * cfg.loss.lam * (w @ w.T - np.eye(w.shape[0])) @ w
    return cfg.loss.lam * w


def regularizer_penalty(m: LinearMetricModel, cfg: TrainConfig) -> float:
    if cfg.regularizer == "aon":
        return aon_penalty(m, cfg.loss.lam)
    return frobenius_penalty(m, cfg.loss.lam)


def train(ds: LabeledDataset, train_indices: np.ndarray | None, cfg: TrainConfig,
          init: LinearMetricModel | None = None,
          stats: dict | None = None) -> LinearMetricModel:
    """Mini-batch stochastic training of the linear model.

    Per update: sample a batch of violating triplets, average their rank-weighted
    hinge sub-gradients (normalized by the configured batch size), add the
    regularizer gradient once, and step.  Stops early with a notice if a whole
    batch turns up no violator anywhere.
    """
    if train_indices is None:
        train_indices = ds.all_indices()
    if len(np.unique(ds.labels[np.asarray(train_indices)])) < 2:
        raise ValidationError("training needs at least 2 classes")
    pairs = build_pair_index(ds, train_indices)
    init_seed, sample_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    if init is None:
        w = _orthonormal_rows(ds.d, cfg.d_out, np.random.default_rng(init_seed))
    else:
        if init.d_in != ds.d:
            raise ConfigError("init model dimension does not match data")
        w = init.w.copy()
    rng = np.random.default_rng(sample_seed)
    cp = CompiledPairs(pairs, ds.labels)
    table = cfg.loss.weighting.cumulative(int(cp.neg_len.max()))
    x = ds.features
    state = AdamState.zeros(w.shape)
    performed = 0
    early = False
    for _ in range(cfg.iterations):
        p = x @ w.T

        def dist_many(a, b):
            return np.linalg.norm(p[a] - p[b], axis=1)

        batch = sample_triplet_batch(rng, cp, dist_many, cfg.loss, cfg.batch_size)
        if batch.i.size == 0:
            early = True
            log.info("no violating triplet in an entire batch after %d updates; "
                     "margin satisfied everywhere sampled, stopping early", performed)
            break
        ok = (batch.d_ij > DEGENERATE_DISTANCE) & (batch.d_ik > DEGENERATE_DISTANCE)
        wts = table[batch.rank_estimate[ok]] / cfg.batch_size
        i, j, k = batch.i[ok], batch.j[ok], batch.k[ok]
        u_ij = (p[i] - p[j]) / batch.d_ij[ok][:, None]
        u_ik = (p[i] - p[k]) / batch.d_ik[ok][:, None]
        grad = (wts[:, None] * u_ij).T @ (x[i] - x[j])
        grad -= (wts[:, None] * u_ik).T @ (x[i] - x[k])
        grad += _reg_gradient(w, cfg)
        if cfg.optimizer == "adam":
            w, state = adam_step(state, w, grad, cfg.eta, cfg.adam)
        else:
            w = w - cfg.eta * grad
        performed += 1
    if stats is not None:
        stats["iterations_performed"] = performed
        stats["early_stop"] = early
    return LinearMetricModel(w)
