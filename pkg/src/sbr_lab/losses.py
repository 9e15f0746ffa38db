"""Classification loss, sample-based regularization and baseline regularizers."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .autodiff import (
    ShapeError, Tensor, detach, logsumexp_rows, matmul, mean, mul, normalize_rows,
    pairwise_sq_dists, pick, scale, squared_l2, sub, take_rows, total_sum, transpose,
    batch_mean,
)
from .model import Model, SourceSnapshot, SpecMismatchError

MEASURES = ("squared_euclidean", "neg_cosine", "neg_inner")


@dataclass(frozen=True)
class Measure:
    kind: str = "squared_euclidean"
    eps: float = 1e-12

    def __post_init__(self):
        if self.kind not in MEASURES:
            raise ValueError(f"unknown measure {self.kind!r}; expected one of {MEASURES}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    def matrix(self, feats: Tensor) -> Tensor:
        """All-pairs dissimilarity matrix D[i, j] for the rows of ``feats``."""
        if self.kind == "squared_euclidean":
            return scale(pairwise_sq_dists(feats), 0.5)
        if self.kind == "neg_inner":
            return scale(matmul(feats, transpose(feats)), -1.0)
        u = normalize_rows(feats, self.eps)
        return scale(matmul(u, transpose(u)), -1.0)

    def __call__(self, a, b) -> float:
        """Scalar D(a, b) on plain vectors, for tests and reference checks."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if self.kind == "squared_euclidean":
            return 0.5 * float(np.sum((a - b) ** 2))
        if self.kind == "neg_inner":
            return -float(a @ b)
        return -float(a @ b) / (max(np.linalg.norm(a), self.eps) * max(np.linalg.norm(b), self.eps))


class ClassGroups:
    """Per-class index lists of one batch.  Centres are computed on demand."""

    def __init__(self, labels):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ShapeError(f"labels must be 1-D, got shape {labels.shape}")
        self.labels = labels
        self.index = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}

    @property
    def classes(self) -> list:
        return sorted(self.index)

    def count(self, c: int) -> int:
        return len(self.index[c])

    def pair_count(self, c: int) -> int:
        n = self.count(c)
        return n * (n - 1)

    def centers(self, features: np.ndarray) -> dict:
        return {c: features[idx].mean(axis=0) for c, idx in self.index.items()}


def _check_batch(features: Tensor, labels) -> ClassGroups:
    if features.ndim != 2:
        raise ShapeError(f"features must be (batch, d), got {features.shape}")
    groups = ClassGroups(labels)
    if len(groups.labels) != features.shape[0]:
        raise ShapeError(f"features {features.shape} vs labels {groups.labels.shape}")
    if features.shape[0] < 1:
        raise ShapeError("empty batch")
    return groups


def _sum_terms(terms: list, like: Tensor) -> Tensor:
    if not terms:
        # no class with a pair: an exact zero that still sits on the tape
        return scale(total_sum(like), 0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    if logits.shape[0] < 1:
        raise ShapeError("empty batch")
    C = logits.shape[1]
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    return mean(sub(logsumexp_rows(logits), pick(logits, labels)))


def sbr_class_terms(features: Tensor, labels, measure: Measure = Measure()) -> dict:
    """Per-class pairwise terms ``(1/N_c(N_c-1)) * sum_{i != j} D(f_i, f_j)``.

    Classes with a single sample have no pairs and are omitted.
    """
    groups = _check_batch(features, labels)
    terms = {}
    for c in groups.classes:
        n = groups.count(c)
        if n < 2:
            continue
        fc = take_rows(features, groups.index[c])
        off_diag = Tensor(1.0 - np.eye(n))
        s = total_sum(mul(measure.matrix(fc), off_diag))
        terms[c] = scale(s, 1.0 / groups.pair_count(c))
    return terms


def sbr_pairwise(features: Tensor, labels, measure: Measure = Measure()) -> Tensor:
    """Minibatch SBR summed over classes, by explicit enumeration of ordered pairs."""
    terms = sbr_class_terms(features, labels, measure)
    return _sum_terms([terms[c] for c in sorted(terms)], features)


def sbr_center(features: Tensor, labels) -> Tensor:
    """Squared-Euclidean SBR via within-batch class centres.

    Equals ``sbr_pairwise(..., Measure("squared_euclidean"))``; the gradient at
    ``f_i`` is ``2/(N_c-1) * (f_i - C_c)``.  All classes go through one
    matrix product whose rows are ``sqrt(1/(N_c-1)) * (f_i - C_c)``;
    singleton rows are zero.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ShapeError(f"features {features.shape} vs labels {labels.shape}")
    if features.shape[0] < 1:
        raise ShapeError("empty batch")
    return squared_l2(matmul(Tensor(_centering_matrix(labels.tobytes())), features))


@lru_cache(maxsize=256)
def _centering_matrix(label_bytes: bytes) -> np.ndarray:
    labels = np.frombuffer(label_bytes, dtype=np.int64)
    _, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    k = counts[inv].astype(np.float64)
    same = inv[:, None] == inv[None, :]
    M = np.eye(len(labels)) - same / k[:, None]
    weight = np.zeros_like(k)
    weight[k > 1] = 1.0 / np.sqrt(k[k > 1] - 1.0)
    M *= weight[:, None]
    M.flags.writeable = False
    return M


def sbr_center_grad(features: np.ndarray, labels) -> np.ndarray:
    """Closed-form gradient of :func:`sbr_center` with respect to each feature."""
    features = np.asarray(features, dtype=np.float64)
    groups = ClassGroups(labels)
    grad = np.zeros_like(features)
    for c, idx in groups.index.items():
        n = len(idx)
        if n < 2:
            continue
        grad[idx] = 2.0 / (n - 1) * (features[idx] - features[idx].mean(axis=0))
    return grad


def sbr(features: Tensor, labels, measure: Measure = Measure()) -> Tensor:
    """SBR with the cheapest exact route for the chosen measure."""
    if measure.kind == "squared_euclidean":
        return sbr_center(features, labels)
    return sbr_pairwise(features, labels, measure)


# ---------------------------------------------------------------------------
# baseline regularizers

def l2_reg(params: Iterable[Tensor]) -> Tensor:
    terms = [squared_l2(p) for p in params]
    if not terms:
        raise ValueError("l2_reg needs at least one parameter")
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def l2sp_reg(model: Model, snapshot: SourceSnapshot, sp_alpha: float, sp_beta: float) -> Tensor:
    """``sp_alpha * ||w_f - w_f*||^2 + sp_beta * ||w_g||^2``."""
    if snapshot.spec_hash != model.spec.feature_hash() or set(snapshot.w_f_star) != set(model.feature_names):
        raise SpecMismatchError("L2-SP snapshot does not match the model")
    drift = []
    for n in model.feature_names:
        ref = snapshot.w_f_star[n]
        if ref.shape != model.params[n].shape:
            raise SpecMismatchError(f"{n}: snapshot shape {ref.shape} != {model.params[n].shape}")
        drift.append(squared_l2(sub(model.params[n], Tensor(ref))))
    pull = drift[0]
    for t in drift[1:]:
        pull = pull + t
    return scale(pull, sp_alpha) + scale(l2_reg(model.w_g.values()), sp_beta)


def delta_lite_reg(features: Tensor, source_features) -> Tensor:
    """``sum_i 1/2 ||f_i - f*_i||^2`` against frozen source-model features."""
    src = detach(source_features) if isinstance(source_features, Tensor) else Tensor(source_features)
    if src.shape != features.shape:
        raise ShapeError(f"features {features.shape} vs source features {src.shape}")
    return scale(squared_l2(sub(features, src)), 0.5)


class ComposedLoss(NamedTuple):
    total: Tensor      # the scalar that is backpropagated once
    L_g: float         # classifier objective value
    L_f: float         # feature-extractor objective value


def compose_losses(cls_loss: Tensor, sbr_loss: Optional[Tensor], reg_terms: dict,
                   alpha: float, beta: float) -> ComposedLoss:
    """Sum the terms into one backprop scalar.

    ``alpha`` is not applied here: it acts through the gradient-reduce layer,
    so the single cross-entropy term reaches the classifier at full strength
    and the extractor at ``alpha`` strength.  ``reg_terms`` maps ``"g"`` and
    ``"f"`` to optional penalties on the respective parameter sets.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    total = cls_loss
    sbr_val = 0.0
    if sbr_loss is not None:
        total = total + scale(sbr_loss, beta)
        sbr_val = sbr_loss.item()
    reg_g = reg_terms.get("g")
    reg_f = reg_terms.get("f")
    for r in (reg_g, reg_f):
        if r is not None:
            total = total + r
    cls_val = cls_loss.item()
    L_g = cls_val + (reg_g.item() if reg_g is not None else 0.0)
    L_f = alpha * cls_val + beta * sbr_val + (reg_f.item() if reg_f is not None else 0.0)
    return ComposedLoss(total, L_g, L_f)
