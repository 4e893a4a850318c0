"""Kernelized weighted-rank metric learning.

The projection is spanned by the training samples, W = A X^T, so distances
depend on the data only through Gram-matrix columns: d(i,j) = ||A(k_i - k_j)||.
Preconditioning the stochastic sub-gradient with the inverse Gram matrix turns
the per-triplet data update into a three-column sparse operation on A.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import LabeledDataset, build_pair_index
from .errors import ConfigError, ResourceError, ValidationError
from .linear import DEGENERATE_DISTANCE, TrainConfig
from .ranking import CompiledPairs, TripletSample, sample_triplet_batch

log = logging.getLogger(__name__)

_KINDS = ("linear", "chi2", "rbf")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice: plain inner product, chi2 histogram overlap, or Gaussian RBF."""

    kind: str = "linear"
    bandwidth: float | None = None
    eps: float = 1e-12

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and (self.bandwidth is None or self.bandwidth <= 0):
            raise ConfigError("rbf kernel requires bandwidth > 0")
        if self.eps <= 0:
            raise ConfigError("chi2 denominator guard eps must be > 0")


@dataclass(frozen=True)
class GramMatrix:
    k: np.ndarray  # (n, n) symmetric
    spec: KernelSpec

    def __post_init__(self):
        self.k.setflags(write=False)

    @property
    def n(self) -> int:
        return self.k.shape[0]


@dataclass(frozen=True)
class KernelMetricModel:
    """Coefficients A (d_out x n) over a retained basis of n training samples."""

    a: np.ndarray
    spec: KernelSpec
    basis: np.ndarray  # (n, d)

    def __post_init__(self):
        a = np.ascontiguousarray(np.asarray(self.a, dtype=np.float64))
        basis = np.ascontiguousarray(np.asarray(self.basis, dtype=np.float64))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "basis", basis)
        if a.ndim != 2 or basis.ndim != 2 or a.shape[1] != basis.shape[0]:
            raise ValidationError("coefficient columns must match basis rows")
        if not np.all(np.isfinite(a)):
            raise ValidationError("coefficients contain non-finite entries")
        a.setflags(write=False)
        basis.setflags(write=False)

    @property
    def d_out(self) -> int:
        return self.a.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        """Embed one vector or a stack of row vectors via A kappa(x)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        cross = kernel_cross(self.spec, self.basis, x[None, :] if single else x)
        out = (self.a @ cross).T
        return out[0] if single else out


def _check_chi2_domain(x: np.ndarray, what: str) -> None:
    if np.any(x < 0):
        rows = np.flatnonzero((x < 0).any(axis=-1) if x.ndim == 2 else x < 0)
        raise ValidationError(f"chi2 kernel needs nonnegative entries; {what} "
                              f"offending index {int(rows[0])}")


def kernel_eval(spec: KernelSpec, x: np.ndarray, y: np.ndarray) -> float:
    """Scalar kernel value between two feature vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("kernel_eval needs two equal-length vectors")
    if spec.kind == "linear":
        return float(x @ y)
    if spec.kind == "chi2":
        _check_chi2_domain(x, "x")
        _check_chi2_domain(y, "y")
        return float(np.sum(2.0 * x * y / (x + y + spec.eps)))
    diff = x - y
    return float(np.exp(-(diff @ diff) / (2.0 * spec.bandwidth ** 2)))


def kernel_cross(spec: KernelSpec, basis: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Matrix of kernel values, shape (len(basis), len(x))."""
    basis = np.asarray(basis, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if basis.ndim != 2 or x.ndim != 2 or basis.shape[1] != x.shape[1]:
        raise ValidationError("kernel_cross needs row matrices of equal width")
    if spec.kind == "linear":
        return basis @ x.T
    if spec.kind == "rbf":
        sq = (np.sum(basis * basis, axis=1)[:, None] + np.sum(x * x, axis=1)[None, :]
              - 2.0 * basis @ x.T)
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * spec.bandwidth ** 2))
    _check_chi2_domain(basis, "basis")
    _check_chi2_domain(x, "query")
    n, d = basis.shape
    out = np.empty((n, x.shape[0]))
    chunk = max(1, (1 << 22) // max(n * d, 1))
    for lo in range(0, x.shape[0], chunk):
        block = x[lo:lo + chunk]  # (c, d)
        num = 2.0 * basis[:, None, :] * block[None, :, :]
        den = basis[:, None, :] + block[None, :, :] + spec.eps
        out[:, lo:lo + block.shape[0]] = (num / den).sum(axis=2)
    return out


def gram_matrix(spec: KernelSpec, x: np.ndarray) -> GramMatrix:
    """Pairwise kernel matrix, symmetrized by mirroring the upper triangle."""
    k = kernel_cross(spec, x, x)
    k = np.triu(k) + np.triu(k, 1).T
    return GramMatrix(k=k, spec=spec)


def kernel_distance(m: KernelMetricModel, gram_col_i: np.ndarray,
                    gram_col_j: np.ndarray) -> float:
    """||A (k_i - k_j)||_2 for two Gram-matrix columns."""
    gram_col_i = np.asarray(gram_col_i, dtype=np.float64)
    gram_col_j = np.asarray(gram_col_j, dtype=np.float64)
    if gram_col_i.shape != (m.a.shape[1],) or gram_col_j.shape != (m.a.shape[1],):
        raise ValidationError("gram columns must match the coefficient width")
    return float(np.linalg.norm(m.a @ (gram_col_i - gram_col_j)))


def aon_kernel_penalty(m: KernelMetricModel, gram: GramMatrix, lam: float) -> float:
    """0.5 * lam * ||A K A^T - I||_F^2."""
    if lam < 0:
        raise ConfigError("lam must be >= 0")
    g = m.a @ gram.k @ m.a.T - np.eye(m.d_out)
    return 0.5 * lam * float(np.sum(g * g))


def project_new(m: KernelMetricModel, x: np.ndarray) -> np.ndarray:
    """Out-of-sample embedding A kappa(x) against the retained basis."""
    return m.project(x)


def preconditioned_update(m: KernelMetricModel, gram: GramMatrix, t: TripletSample,
                          weight: float, eta: float, lam: float
                          ) -> KernelMetricModel | None:
    """One preconditioned stochastic step:

        A <- (I - 2 lam eta (A K A^T - I)) A - 2 eta weight A K E_ijk

    where E_ijk is nonzero only on the {i,j,k} rows/columns, so the data term
    touches exactly three columns of A.  Returns None when a distance is
    degenerate (caller skips the triplet).
    """
    a = m.a
    k = gram.k
    p = a @ k[:, [t.i, t.j, t.k]]  # projected points for i, j, k at A_t
    d_ij = float(np.linalg.norm(p[:, 0] - p[:, 1]))
    d_ik = float(np.linalg.norm(p[:, 0] - p[:, 2]))
    active = t.hinge > 0
    if active and (d_ij < DEGENERATE_DISTANCE or d_ik < DEGENERATE_DISTANCE):
        return None
    if lam != 0.0:
        mm = (a @ k) @ a.T
        new_a = a - (2.0 * lam * eta) * (mm - np.eye(m.d_out)) @ a
    else:
        new_a = a.copy()
    if active:
        c = 2.0 * eta * weight
        u_ij = (p[:, 0] - p[:, 1]) / d_ij
        u_ik = (p[:, 0] - p[:, 2]) / d_ik
        new_a[:, t.i] -= c * (u_ij - u_ik)
        new_a[:, t.j] += c * u_ij
        new_a[:, t.k] -= c * u_ik
    return KernelMetricModel(a=new_a, spec=m.spec, basis=m.basis)


def init_coefficients(n: int, d_out: int, diag_mean: float, seed) -> np.ndarray:
    """Seeded Gaussian scaled so initial projected coordinates are O(1)."""
    scale = 1.0 / np.sqrt(max(n * diag_mean, DEGENERATE_DISTANCE))
    return np.random.default_rng(seed).standard_normal((d_out, n)) * scale


def train_kernel(ds: LabeledDataset, train_indices: np.ndarray | None, spec: KernelSpec,
                 cfg: TrainConfig, gram_cap: int = 20000,
                 init_a: np.ndarray | None = None,
                 stats: dict | None = None) -> KernelMetricModel:
    """Mini-batch training with the preconditioned update.

    Mirrors the linear loop: all terms of one batch are evaluated at the
    batch-start coefficients; the three-column data updates are averaged over
    the configured batch size and the dense regularizer factor is applied once
    per batch.  A cached A K matrix is updated incrementally on the touched
    columns and fully recomputed every 100 batches.
    """
    if train_indices is None:
        train_indices = ds.all_indices()
    subset = np.unique(np.asarray(train_indices, dtype=np.int64))
    if subset.size > gram_cap:
        raise ResourceError(
            f"{subset.size} training samples exceed the Gram cap {gram_cap}; "
            "use the linear path for data this large")
    if len(np.unique(ds.labels[subset])) < 2:
        raise ValidationError("training needs at least 2 classes")
    pairs = build_pair_index(ds, subset)
    basis = ds.features[subset].copy()
    k = gram_matrix(spec, basis).k
    n = subset.size
    position_of = np.full(ds.n, -1, dtype=np.int64)
    position_of[subset] = np.arange(n)
    cp = CompiledPairs(pairs, ds.labels, position_of=position_of)
    init_seed, sample_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    if init_a is None:
        a = init_coefficients(n, cfg.d_out, float(np.mean(np.diag(k))), init_seed)
    else:
        if init_a.shape != (cfg.d_out, n):
            raise ConfigError("init_a shape does not match (d_out, n_train)")
        a = init_a.astype(np.float64).copy()
    rng = np.random.default_rng(sample_seed)
    table = cfg.loss.weighting.cumulative(int(cp.neg_len.max()))
    pk = a @ k
    eye = np.eye(cfg.d_out)
    performed = 0
    early = False
    for _ in range(cfg.iterations):
        def dist_many(cols_a, cols_b):
            return np.linalg.norm(pk[:, cols_a] - pk[:, cols_b], axis=0)

        batch = sample_triplet_batch(rng, cp, dist_many, cfg.loss, cfg.batch_size)
        if batch.i.size == 0:
            early = True
            log.info("no violating triplet in an entire batch after %d updates; "
                     "stopping early", performed)
            break
        ok = (batch.d_ij > DEGENERATE_DISTANCE) & (batch.d_ik > DEGENERATE_DISTANCE)
        i, j, kk = batch.i[ok], batch.j[ok], batch.k[ok]
        c = (2.0 * cfg.eta / cfg.batch_size) * table[batch.rank_estimate[ok]]
        u_ij = (pk[:, i] - pk[:, j]) / batch.d_ij[ok]
        u_ik = (pk[:, i] - pk[:, kk]) / batch.d_ik[ok]
        delta = np.zeros_like(a)
        cols = np.concatenate([i, j, kk])
        vals = np.concatenate([-c * (u_ij - u_ik), c * u_ij, -c * u_ik], axis=1)
        np.add.at(delta.T, cols, vals.T)
        if cfg.loss.lam != 0.0:
            f = eye - (2.0 * cfg.loss.lam * cfg.eta) * (pk @ a.T - eye)
            a = f @ a
            pk = f @ pk
        touched = np.unique(cols)
        a = a + delta
        pk = pk + delta[:, touched] @ k[touched, :]
        performed += 1
        if performed % 100 == 0:
            pk = a @ k
    if stats is not None:
        stats["iterations_performed"] = performed
        stats["early_stop"] = early
    return KernelMetricModel(a=a, spec=spec, basis=basis)
