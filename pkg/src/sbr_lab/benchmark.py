"""Default desk-scale transfer benchmark: data, source model and tuned settings."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from .config import TrainConfig
from .data import Dataset, SyntheticTransferSpec, gen_synthetic_transfer
from .model import SourceSnapshot, snapshot
from .train import pretrain

DATA = SyntheticTransferSpec()
SAMPLING_RATES = (0.15, 0.3, 0.5, 1.0)

# beta for ImageNet-scale CNN features; `standard_sbr` uses its top value
CNN_BETA_GRID = (1e-5, 3.16e-5, 1e-4)

# Half-decade grids for this benchmark's feature scale.  The three measures
# differ by orders of magnitude (cosine is scale-free, inner product grows
# without bound), so each gets its own grid.
BETA_GRIDS = {
    "squared_euclidean": (1e-3, 3.16e-3, 1e-2),
    "neg_cosine": (0.1, 0.316, 1.0),
    "neg_inner": (1e-5, 3.16e-5, 1e-4),
}


def pretrain_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(method="baseline_l2", alpha=1.0, kappa=1.0, beta=0.0,
                       epochs=30, base_lr=0.05, seed=seed)


def baseline_config(**kw) -> TrainConfig:
    base = dict(method="baseline_l2", alpha=1.0, kappa=10.0, beta=0.0, epochs=200, base_lr=0.05)
    base.update(kw)
    return TrainConfig(**base)


def sbr_config(**kw) -> TrainConfig:
    base = dict(method="sbr", alpha=0.1, kappa=1.0, beta=BETA_GRIDS["squared_euclidean"][0],
                epochs=200, base_lr=0.05)
    base.update(kw)
    return TrainConfig(**base)


@dataclass(frozen=True)
class Benchmark:
    data: SyntheticTransferSpec
    source_data: Dataset
    train: Dataset
    test: Dataset
    source: SourceSnapshot
    source_train_acc: float


@lru_cache(maxsize=4)
def _prepare(data: SyntheticTransferSpec, pretrain_seed: int) -> Benchmark:
    from .train import evaluate

    src, train, test = gen_synthetic_transfer(data)
    model = pretrain(pretrain_config(pretrain_seed), src)
    return Benchmark(data, src, train, test, snapshot(model), evaluate(model, src))


def prepare(data: SyntheticTransferSpec = DATA, pretrain_seed: int = 0) -> Benchmark:
    """Generate the datasets and pretrain the source model (cached per process)."""
    return _prepare(data, pretrain_seed)
