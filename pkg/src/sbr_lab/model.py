"""Target network: MLP feature extractor -> gradient-reduce -> linear classifier.

Parameters are named ``f{k}.W`` / ``f{k}.b`` for extractor layer ``k`` and
``g.W`` / ``g.b`` for the classifier.  Weights are stored ``(fan_in, fan_out)``
so a layer is ``x @ W + b``.
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import ShapeError, Tensor, add, grad_scale, matmul, relu

MAGIC = b"SBRCKPT1"
SPEC_HASH_ENTRY = "__spec_hash__"


class SpecMismatchError(ValueError):
    """A snapshot or checkpoint does not fit the model it is applied to."""


class CorruptCheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    feature_layer_widths: tuple
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "feature_layer_widths", tuple(int(w) for w in self.feature_layer_widths))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.feature_layer_widths or min(self.feature_layer_widths) < 1:
            raise ValueError("feature_layer_widths must be a non-empty list of positive ints")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def feature_dim(self) -> int:
        return self.feature_layer_widths[-1]

    def feature_hash(self) -> str:
        """Content hash of the extractor architecture (classifier excluded)."""
        key = f"in={self.input_dim};widths={','.join(map(str, self.feature_layer_widths))};act={self.activation}"
        return hashlib.sha256(key.encode()).hexdigest()

    def with_classes(self, num_classes: int) -> "ModelSpec":
        return ModelSpec(self.input_dim, self.feature_layer_widths, num_classes, self.activation)


@dataclass
class SourceSnapshot:
    w_f_star: dict
    spec_hash: str

    def __post_init__(self):
        frozen = {}
        for name, arr in self.w_f_star.items():
            a = np.array(arr, dtype=np.float64, copy=True)
            a.setflags(write=False)
            frozen[name] = a
        self.w_f_star = frozen


@dataclass
class Model:
    spec: ModelSpec
    params: dict = field(default_factory=dict)
    alpha: float = 1.0

    def __post_init__(self):
        check_alpha(self.alpha)

    @property
    def feature_names(self) -> list:
        return [n for n in self.params if n.startswith("f")]

    @property
    def classifier_names(self) -> list:
        return [n for n in self.params if n.startswith("g.")]

    @property
    def w_f(self) -> dict:
        return {n: self.params[n] for n in self.feature_names}

    @property
    def w_g(self) -> dict:
        return {n: self.params[n] for n in self.classifier_names}

    def parameters(self) -> list:
        return list(self.params.values())

    def state(self) -> dict:
        return {n: p.data.copy() for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def check_alpha(alpha: float) -> None:
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _layer_shapes(spec: ModelSpec) -> list:
    shapes = []
    prev = spec.input_dim
    for k, w in enumerate(spec.feature_layer_widths):
        shapes.append((f"f{k}", prev, w))
        prev = w
    shapes.append(("g", prev, spec.num_classes))
    return shapes


def init_model(spec: ModelSpec, seed: int, source: Optional[SourceSnapshot] = None,
               alpha: float = 1.0) -> Model:
    """Random He-uniform init (zero biases); extractor copied from ``source`` if given.

    The random stream is consumed identically with or without a source, so the
    classifier for a given seed does not depend on whether a snapshot is used.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for prefix, fan_in, fan_out in _layer_shapes(spec):
        params[f"{prefix}.W"] = Tensor(_he_uniform(rng, fan_in, fan_out), requires_grad=True, name=f"{prefix}.W")
        params[f"{prefix}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.b")
    model = Model(spec, params, alpha)
    if source is not None:
        apply_snapshot(model, source)
    return model


def apply_snapshot(model: Model, source: SourceSnapshot) -> None:
    if source.spec_hash != model.spec.feature_hash():
        raise SpecMismatchError("snapshot was produced by a different feature-extractor spec")
    names = set(model.feature_names)
    if names != set(source.w_f_star):
        raise SpecMismatchError(f"snapshot parameters {sorted(source.w_f_star)} != model {sorted(names)}")
    for n in names:
        src = source.w_f_star[n]
        if src.shape != model.params[n].shape:
            raise SpecMismatchError(f"{n}: snapshot shape {src.shape} != model shape {model.params[n].shape}")
        model.params[n].data = np.array(src, dtype=np.float64, copy=True)


def forward_features(model: Model, x: Tensor) -> Tensor:
    """Post-activation output of the last extractor layer, shape (batch, d)."""
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeError(f"expected input of shape (batch, {model.spec.input_dim}), got {x.shape}")
    h = x
    for k in range(len(model.spec.feature_layer_widths)):
        h = relu(add(matmul(h, model.params[f"f{k}.W"]), model.params[f"f{k}.b"]))
    return h


def gradient_reduce(features: Tensor, alpha: float) -> Tensor:
    """Pass ``features`` through unchanged; scale the gradient coming back by ``alpha``."""
    check_alpha(alpha)
    return grad_scale(features, alpha)


def forward_logits(model: Model, features_reduced: Tensor) -> Tensor:
    d = model.spec.feature_dim
    if features_reduced.ndim != 2 or features_reduced.shape[1] != d:
        raise ShapeError(f"expected features of shape (batch, {d}), got {features_reduced.shape}")
    return add(matmul(features_reduced, model.params["g.W"]), model.params["g.b"])


def forward(model: Model, x: Tensor) -> tuple:
    """Full pass; returns ``(features, logits)`` with the reduce layer in between."""
    feats = forward_features(model, x)
    return feats, forward_logits(model, gradient_reduce(feats, model.alpha))


def snapshot(model: Model) -> SourceSnapshot:
    return SourceSnapshot({n: model.params[n].data for n in model.feature_names}, model.spec.feature_hash())


# ---------------------------------------------------------------------------
# checkpoint file
#
# MAGIC | u64 count | count x (u64 name_len | name utf-8 | u64 rank | rank x u64 dim | f64 values)
# all little-endian.  The spec hash is stored as an entry of 32 byte values.

def _encode(entries: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def _decode(blob: bytes) -> dict:
    if blob[:8] != MAGIC:
        raise CorruptCheckpointError("bad magic/version header")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CorruptCheckpointError("checkpoint truncated")
        out = blob[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<Q", take(8))
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError("entry name is not utf-8") from exc
        (rank,) = struct.unpack("<Q", take(8))
        if rank > 8:
            raise CorruptCheckpointError(f"implausible rank {rank} for {name!r}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        entries[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(blob):
        raise CorruptCheckpointError("trailing bytes after last entry")
    return entries


def _atomic_write(path: str, blob: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def save_checkpoint(model: Model, path: str) -> None:
    entries = {n: p.data for n, p in model.params.items()}
    entries[SPEC_HASH_ENTRY] = np.frombuffer(bytes.fromhex(model.spec.feature_hash()), dtype=np.uint8).astype(np.float64)
    _atomic_write(str(path), _encode(entries))


def read_checkpoint(path: str) -> tuple:
    """Return ``(params, spec_hash)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        entries = _decode(fh.read())
    if SPEC_HASH_ENTRY not in entries:
        raise CorruptCheckpointError("missing spec hash entry")
    raw = entries.pop(SPEC_HASH_ENTRY)
    if raw.shape != (32,) or np.any((raw < 0) | (raw > 255) | (raw != np.round(raw))):
        raise CorruptCheckpointError("malformed spec hash entry")
    return entries, bytes(raw.astype(np.uint8)).hex()


def spec_from_params(params: dict) -> ModelSpec:
    """Recover the architecture from parameter shapes."""
    k = 0
    widths = []
    input_dim = None
    while f"f{k}.W" in params:
        W = params[f"f{k}.W"]
        if input_dim is None:
            input_dim = W.shape[0]
        widths.append(W.shape[1])
        k += 1
    if input_dim is None or "g.W" not in params:
        raise CorruptCheckpointError("checkpoint lacks extractor or classifier weights")
    return ModelSpec(input_dim, tuple(widths), params["g.W"].shape[1])


def load_model(path: str, alpha: float = 1.0) -> Model:
    params, spec_hash = read_checkpoint(path)
    spec = spec_from_params(params)
    if spec.feature_hash() != spec_hash:
        raise SpecMismatchError("stored spec hash does not match stored parameter shapes")
    model = init_model(spec, seed=0, alpha=alpha)
    for n, p in model.params.items():
        if n not in params or params[n].shape != p.shape:
            raise CorruptCheckpointError(f"parameter {n} missing or mis-shaped")
        p.data = params[n].copy()
    return model


def load_snapshot(path: str) -> SourceSnapshot:
    params, spec_hash = read_checkpoint(path)
    return SourceSnapshot({n: a for n, a in params.items() if n.startswith("f")}, spec_hash)


def load_into(model: Model, path: str) -> None:
    """Overwrite ``model`` parameters from a checkpoint written for the same spec."""
    params, spec_hash = read_checkpoint(path)
    if spec_hash != model.spec.feature_hash():
        raise SpecMismatchError("checkpoint was written for a different spec")
    for n, p in model.params.items():
        if n not in params or params[n].shape != p.shape:
            raise SpecMismatchError(f"parameter {n} missing or mis-shaped in checkpoint")
    for n, p in model.params.items():
        p.data = params[n].copy()
