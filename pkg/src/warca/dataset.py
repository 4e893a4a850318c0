"""Labeled feature data: loading, validation, synthesis, splits, pair indices.

Index conventions: every operation works with *dataset indices* (row numbers
into ``features``).  Subsets (train/test sides of a split, trial galleries)
are sorted int arrays of such indices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyPairsError, FormatError, ProtocolError, ValidationError

_MAGIC = b"WRCA"
_VERSION = 1


@dataclass(frozen=True)
class LabeledDataset:
    """N feature vectors with integer class ids occupying {1..Q} densely."""

    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        labs = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ValidationError("features must be a nonempty 2-d array")
        if labs.shape != (feats.shape[0],):
            raise ValidationError(
                f"label count {labs.shape} does not match feature rows {feats.shape[0]}"
            )
        if not np.all(np.isfinite(feats)):
            bad = int(np.flatnonzero(~np.isfinite(feats).all(axis=1))[0])
            raise ValidationError(f"non-finite feature value in row {bad}")
        if labs.min(initial=1) < 1:
            raise ValidationError("class ids must be positive integers")
        q = int(labs.max())
        present = np.unique(labs)
        if len(present) != q:
            missing = sorted(set(range(1, q + 1)) - set(present.tolist()))
            raise ValidationError(f"class ids must cover 1..{q}; missing {missing}")
        feats.setflags(write=False)
        labs.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def q(self) -> int:
        return int(self.labels.max())

    def all_indices(self) -> np.ndarray:
        return np.arange(self.n, dtype=np.int64)


@dataclass(frozen=True)
class PairIndex:
    """Ordered same-label pairs plus, per label, the indices of all other-label samples."""

    same_pairs: np.ndarray  # (m, 2) int64, dataset indices
    negatives_by_label: dict[int, np.ndarray]  # label -> sorted int64 dataset indices

    def __post_init__(self):
        self.same_pairs.setflags(write=False)

    @property
    def n_pairs(self) -> int:
        return self.same_pairs.shape[0]


@dataclass(frozen=True)
class SplitPlan:
    """Reproducible identity-disjoint train/test splits."""

    n_splits: int
    splits: list[tuple[np.ndarray, np.ndarray]]  # (train indices, test indices)
    p_test: int
    seed: int


@dataclass(frozen=True)
class SingleShotTrial:
    """One probe per test identity; everything else is gallery."""

    probe_indices: np.ndarray
    gallery_indices: np.ndarray


def l1_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Scale each row to unit L1 norm, leaving all-zero rows untouched."""
    norms = np.abs(x).sum(axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return x / safe


def load_features(path, format: str = "auto", l1_normalize: bool = False,
                  header: bool = False) -> LabeledDataset:
    """Read a dataset from CSV (``label,f1,...,fD`` per line) or the WRCA binary format."""
    if format == "auto":
        format = "csv" if str(path).endswith(".csv") else "binary"
    if format == "csv":
        ds = _load_csv(path, header=header)
    elif format == "binary":
        ds = _load_binary(path)
    else:
        raise ConfigError(f"unknown dataset format {format!r}")
    if l1_normalize:
        ds = LabeledDataset(l1_normalize_rows(ds.features), ds.labels)
    return ds


def _load_csv(path, header: bool = False) -> LabeledDataset:
    labels: list[int] = []
    rows: list[list[float]] = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if header and lineno == 1:
                continue
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise FormatError(f"{path}:{lineno}: expected 'label,f1,...' fields")
            try:
                lab = int(parts[0])
                vals = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if lab < 1:
                raise FormatError(f"{path}:{lineno}: label must be a positive integer")
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise FormatError(
                    f"{path}:{lineno}: row has {len(vals)} features, expected {width}"
                )
            labels.append(lab)
            rows.append(vals)
    if not rows:
        raise ValidationError(f"{path}: no samples")
    return LabeledDataset(np.asarray(rows, dtype=np.float64),
                          np.asarray(labels, dtype=np.int64))


def _load_binary(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic, not a WRCA dataset file")
    version, n, d = struct.unpack_from("<III", blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported WRCA version {version}")
    expect = 16 + 4 * n + 4 * n * d
    if len(blob) != expect:
        raise FormatError(f"{path}: truncated file ({len(blob)} bytes, expected {expect})")
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=16).astype(np.int64)
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=16 + 4 * n)
    return LabeledDataset(feats.astype(np.float64).reshape(n, d), labels)


def save_csv(ds: LabeledDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab, row in zip(ds.labels, ds.features):
            fh.write(str(int(lab)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def save_binary(ds: LabeledDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, ds.n, ds.d))
        fh.write(ds.labels.astype("<u4").tobytes())
        fh.write(ds.features.astype("<f4").tobytes())


def build_pair_index(ds: LabeledDataset, subset: np.ndarray | None = None) -> PairIndex:
    """Enumerate all ordered same-label pairs within ``subset`` and the per-label negative pools."""
    if subset is None:
        subset = ds.all_indices()
    subset = np.unique(np.asarray(subset, dtype=np.int64))
    if subset.size and (subset[0] < 0 or subset[-1] >= ds.n):
        raise ValidationError("subset contains out-of-range indices")
    labs = ds.labels[subset]
    pair_blocks = []
    negatives: dict[int, np.ndarray] = {}
    for y in np.unique(labs):
        members = subset[labs == y]
        negatives[int(y)] = subset[labs != y]
        if members.size >= 2:
            a, b = np.meshgrid(members, members, indexing="ij")
            off = ~np.eye(members.size, dtype=bool)
            pair_blocks.append(np.column_stack([a[off], b[off]]))
    if not pair_blocks:
        raise EmptyPairsError("no label occurs twice in the subset; no same-label pairs")
    return PairIndex(np.concatenate(pair_blocks, axis=0), negatives)


def make_splits(ds: LabeledDataset, p_test: int, n_splits: int, seed: int) -> SplitPlan:
    """Assign ``p_test`` whole identities (all their images) to each split's test side."""
    q = ds.q
    if not 1 <= p_test < q:
        raise ConfigError(f"p_test must be in [1, Q); got p_test={p_test}, Q={q}")
    if n_splits < 1:
        raise ConfigError("n_splits must be >= 1")
    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(n_splits):
        test_ids = rng.permutation(q)[:p_test] + 1
        test_mask = np.isin(ds.labels, test_ids)
        test_idx = np.flatnonzero(test_mask).astype(np.int64)
        train_idx = np.flatnonzero(~test_mask).astype(np.int64)
        splits.append((train_idx, test_idx))
    return SplitPlan(n_splits=n_splits, splits=splits, p_test=p_test, seed=seed)


def single_shot_trials(ds: LabeledDataset, test_indices: np.ndarray, n_trials: int,
                       seed: int) -> list[SingleShotTrial]:
    """Draw ``n_trials`` independent probe selections (one probe per test identity)."""
    test_indices = np.unique(np.asarray(test_indices, dtype=np.int64))
    labs = ds.labels[test_indices]
    ids = np.unique(labs)
    groups = [test_indices[labs == y] for y in ids]
    for y, g in zip(ids, groups):
        if g.size < 2:
            raise ProtocolError(
                f"identity {int(y)} has a single image; single-shot needs >= 2"
            )
    rng = np.random.default_rng(seed)
    trials = []
    for _ in range(n_trials):
        probes = np.array([g[rng.integers(g.size)] for g in groups], dtype=np.int64)
        gallery = np.setdiff1d(test_indices, probes)
        trials.append(SingleShotTrial(probe_indices=probes, gallery_indices=gallery))
    return trials


def synth_gaussian(q: int, per_class: int, d_signal: int, d_noise: int,
                   noise_scale: float, seed: int) -> LabeledDataset:
    """Gaussian class clusters plus uninformative nuisance dimensions.

    Class means sit on the unit sphere of the first ``d_signal`` coordinates.
    Within-class noise is isotropic with unit total power (per-coordinate
    sigma 1/sqrt(d_signal)), so mean separation and within-class spread are
    on the same scale.  The trailing ``d_noise`` coordinates are iid
    N(0, noise_scale^2) and carry no class information.
    """
    if q < 2:
        raise ConfigError("need at least 2 classes")
    if per_class < 2:
        raise ConfigError("need at least 2 samples per class")
    if d_signal < 1 or d_noise < 0 or noise_scale < 0:
        raise ConfigError("bad synthetic generator dimensions")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((q, d_signal))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    n = q * per_class
    labels = np.repeat(np.arange(1, q + 1), per_class).astype(np.int64)
    signal = means[labels - 1] + rng.standard_normal((n, d_signal)) / np.sqrt(d_signal)
    nuisance = noise_scale * rng.standard_normal((n, d_noise))
    return LabeledDataset(np.hstack([signal, nuisance]), labels)
