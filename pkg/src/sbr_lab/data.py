"""Synthetic source/target benchmark, CSV I/O, subsampling and P x K batching."""
from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from scipy.linalg import expm


class DataError(ValueError):
    pass


class CSVParseError(DataError):
    pass


class InfeasiblePlanError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise DataError(f"features {x.shape} and labels {y.shape} do not line up")
        if x.shape[0] < 1:
            raise DataError("dataset is empty")
        if not np.isfinite(x).all():
            raise DataError("features contain non-finite values")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def class_counts(self) -> dict:
        cls, cnt = np.unique(self.labels, return_counts=True)
        return dict(zip(cls.tolist(), cnt.tolist()))

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


# ---------------------------------------------------------------------------
# synthetic transfer benchmark

@dataclass(frozen=True)
class SyntheticTransferSpec:
    """Gaussian classes in a latent space seen through a random linear map.

    The latent space has ``class_dims`` axes along which class means differ
    and ``nuisance_dims`` axes of shared within-class variation.  The target
    domain uses the source map rotated by ``rotation_strength`` (radians along
    a random plane family) and perturbed by ``noise_scale``.
    """
    input_dim: int = 32
    class_dims: int = 8
    nuisance_dims: int = 8
    source_classes: int = 20
    target_classes: int = 10
    source_per_class: int = 100
    target_train_per_class: int = 30
    target_test_per_class: int = 50
    class_sep: float = 1.0
    cluster_spread: float = 0.5
    nuisance_spread: float = 2.0
    rotation_strength: float = 0.5
    noise_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        counts = (self.input_dim, self.class_dims, self.source_classes, self.target_classes,
                  self.source_per_class, self.target_train_per_class, self.target_test_per_class)
        if min(counts) < 1 or self.nuisance_dims < 0:
            raise ValueError("all counts must be positive")
        if min(self.class_sep, self.cluster_spread, self.nuisance_spread,
               self.rotation_strength, self.noise_scale) < 0:
            raise ValueError("spread and shift parameters must be nonnegative")


def transfer_maps(spec: SyntheticTransferSpec) -> tuple:
    """``(source_map, target_map)``, each (latent_dim, input_dim), rows map latents to inputs."""
    rng = np.random.default_rng([spec.seed, 1])
    L = spec.class_dims + spec.nuisance_dims
    D = spec.input_dim
    src = rng.normal(size=(L, D)) / np.sqrt(L)
    A = rng.normal(size=(D, D))
    E = rng.normal(size=(L, D)) / np.sqrt(L)
    if spec.rotation_strength == 0:
        tgt = src.copy()
    else:
        S = (A - A.T) / 2.0
        S /= np.linalg.norm(S, 2)
        tgt = src @ expm(spec.rotation_strength * S)
    if spec.noise_scale:
        tgt = tgt + spec.noise_scale * E
    return src, tgt


def _draw(rng, means, per_class, spec, mapping) -> Dataset:
    C, K = means.shape
    labels = np.repeat(np.arange(C), per_class)
    z_cls = means[labels] + spec.cluster_spread * rng.normal(size=(len(labels), K))
    z_nui = spec.nuisance_spread * rng.normal(size=(len(labels), spec.nuisance_dims))
    z = np.concatenate([z_cls, z_nui], axis=1)
    return Dataset(z @ mapping, labels, C)


def gen_synthetic_transfer(spec: SyntheticTransferSpec) -> tuple:
    """Return ``(source, target_train, target_test)`` datasets."""
    src_map, tgt_map = transfer_maps(spec)
    rng = np.random.default_rng([spec.seed, 2])
    src_means = spec.class_sep * rng.normal(size=(spec.source_classes, spec.class_dims))
    tgt_means = spec.class_sep * rng.normal(size=(spec.target_classes, spec.class_dims))
    source = _draw(rng, src_means, spec.source_per_class, spec, src_map)
    train = _draw(rng, tgt_means, spec.target_train_per_class, spec, tgt_map)
    test = _draw(rng, tgt_means, spec.target_test_per_class, spec, tgt_map)
    return source, train, test


# ---------------------------------------------------------------------------
# subsampling and batching

def subsample(ds: Dataset, rate: float, seed: int) -> Dataset:
    """Keep ``max(1, round(rate * n_c))`` examples per class (round half to even)."""
    if not (0.0 < rate <= 1.0):
        raise ValueError(f"rate must be in (0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    keep = []
    for c in ds.classes():
        idx = np.flatnonzero(ds.labels == c)
        n = max(1, round(rate * len(idx)))
        keep.append(np.sort(rng.choice(idx, size=n, replace=False)))
    return ds.take(np.concatenate(keep))


@dataclass(frozen=True)
class BatchPlan:
    classes_per_batch: int = 8
    samples_per_class: int = 4
    drop_incomplete: bool = False
    mode: str = "pk"  # "pk" or "uniform"

    def __post_init__(self):
        if self.classes_per_batch < 1 or self.samples_per_class < 1:
            raise ValueError("classes_per_batch and samples_per_class must be positive")
        if self.mode not in ("pk", "uniform"):
            raise ValueError(f"unknown batch mode {self.mode!r}")

    @property
    def batch_size(self) -> int:
        return self.classes_per_batch * self.samples_per_class

    def check_for_sbr(self) -> None:
        if self.mode == "pk" and self.samples_per_class < 2:
            raise ValueError("SBR needs samples_per_class >= 2 so every class has a pair")


def stratified_batches(labels, plan: BatchPlan, seed: int) -> list:
    """One epoch of index batches.

    ``pk`` mode: each class is shuffled and cut into chunks of ``K`` (a short
    tail is left out this epoch); chunks are dealt ``P`` distinct classes at a
    time, favouring classes with the most chunks left.  A final batch with
    fewer than ``P`` classes is kept unless ``drop_incomplete``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    if plan.mode == "uniform":
        order = rng.permutation(len(labels))
        bs = plan.batch_size
        batches = [order[i:i + bs] for i in range(0, len(order), bs)]
        if plan.drop_incomplete and batches and len(batches[-1]) < bs:
            batches.pop()
        return batches

    P, K = plan.classes_per_batch, plan.samples_per_class
    chunks: dict = {}
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_chunks = len(idx) // K
        if n_chunks:
            chunks[int(c)] = [idx[j * K:(j + 1) * K] for j in range(n_chunks)]
    if not chunks:
        raise InfeasiblePlanError(f"no class has {K} examples")

    batches = []
    while chunks:
        avail = list(chunks)
        if len(avail) < P and plan.drop_incomplete:
            break
        tiebreak = rng.permutation(len(avail))
        ranked = sorted(range(len(avail)), key=lambda i: (-len(chunks[avail[i]]), tiebreak[i]))
        picked = [avail[i] for i in ranked[:P]]
        parts = []
        for c in picked:
            parts.append(chunks[c].pop())
            if not chunks[c]:
                del chunks[c]
        batches.append(np.concatenate(parts))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


# ---------------------------------------------------------------------------
# files

def save_csv(ds: Dataset, path) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(ds.input_dim)])
        for y, row in zip(ds.labels, ds.features):
            w.writerow([int(y)] + [repr(float(v)) for v in row])
    os.replace(tmp, path)


def load_csv(path, num_classes: Optional[int] = None) -> Dataset:
    """Read ``label,f0,f1,...``; ``num_classes`` defaults to ``max(label) + 1``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CSVParseError(f"{path}: empty file")
    header = rows[0]
    if not header or header[0] != "label" or header[1:] != [f"f{j}" for j in range(len(header) - 1)]:
        raise CSVParseError(f"{path}:1: header must be label,f0,f1,...")
    width = len(header)
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise CSVParseError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            labels.append(int(row[0]))
            feats.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise CSVParseError(f"{path}:{lineno}: {exc}") from exc
    if not labels:
        raise CSVParseError(f"{path}: no data rows")
    y = np.array(labels)
    C = num_classes if num_classes is not None else int(y.max()) + 1
    if y.min() < 0 or y.max() >= C:
        raise DataError(f"{path}: label out of range [0, {C})")
    return Dataset(np.array(feats, dtype=np.float64).reshape(len(labels), width - 1), y, C)


def write_meta(path, spec: SyntheticTransferSpec, extra: Optional[dict] = None) -> None:
    items = dict(asdict(spec))
    items.update(extra or {})
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v}\n")


def read_meta(path) -> SyntheticTransferSpec:
    raw = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                raw[k] = v
    kwargs = {}
    for f in fields(SyntheticTransferSpec):
        if f.name in raw:
            kwargs[f.name] = int(raw[f.name]) if f.type in ("int", int) else float(raw[f.name])
    return SyntheticTransferSpec(**kwargs)
