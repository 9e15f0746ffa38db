"""Pretraining, fine-tuning with SBR and the gradient-reduce layer, evaluation."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import Tape, Tensor
from .config import TrainConfig
from .data import Dataset, stratified_batches, subsample
from .losses import (
    compose_losses, cross_entropy, delta_lite_reg, l2sp_reg, sbr,
)
from .model import (
    Model, SourceSnapshot, SpecMismatchError, forward, forward_features, init_model,
    save_checkpoint, snapshot,
)
from .optim import SGD, CosineSchedule, ParamGroup, lr_at

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# numpy-only inference

def features_np(params: dict, x: np.ndarray) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    k = 0
    while f"f{k}.W" in params:
        W = params[f"f{k}.W"]
        b = params[f"f{k}.b"]
        W = W.data if isinstance(W, Tensor) else W
        b = b.data if isinstance(b, Tensor) else b
        h = np.maximum(h @ W + b, 0.0)
        k += 1
    return h


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    logits = features_np(model.params, x) @ model.params["g.W"].data + model.params["g.b"].data
    return np.argmax(logits, axis=1)  # ties go to the lowest class index


def evaluate(model: Model, ds: Dataset) -> float:
    """Fraction of examples whose argmax prediction equals the label."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if ds.input_dim != model.spec.input_dim:
        raise SpecMismatchError(f"dataset has {ds.input_dim} inputs, model expects {model.spec.input_dim}")
    return float(np.mean(predict(model, ds.features) == ds.labels))


# ---------------------------------------------------------------------------
# reports

@dataclass
class RunReport:
    config: dict
    records: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def lines(self) -> list:
        out = [json.dumps({"type": "config", **self.config})]
        out += [json.dumps({"type": "epoch", **r}) for r in self.records]
        out.append(json.dumps({"type": "final", **self.final, "wall_time": self.wall_time}))
        return out

    def write(self, path) -> None:
        tmp = f"{path}.tmp{os.getpid()}"
        with open(tmp, "w") as fh:
            fh.write("\n".join(self.lines()) + "\n")
        os.replace(tmp, path)

    @classmethod
    def read(cls, path) -> "RunReport":
        rep = cls(config={})
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                kind = rec.pop("type")
                if kind == "config":
                    rep.config = rec
                elif kind == "epoch":
                    rep.records.append(rec)
                else:
                    rep.wall_time = rec.pop("wall_time", 0.0)
                    rep.final = rec
        return rep


# ---------------------------------------------------------------------------
# training

def param_groups(model: Model, cfg: TrainConfig) -> list:
    """Extractor at ``lr / kappa``, classifier at ``lr``.  L2-SP replaces weight decay."""
    wd_g = 0.0 if cfg.method == "l2sp" else cfg.weight_decay
    wd_f = 0.0 if cfg.method == "l2sp" else cfg.lambda_f
    return [
        ParamGroup(model.feature_names, lr_scale=1.0 / cfg.kappa, weight_decay=wd_f),
        ParamGroup(model.classifier_names, lr_scale=1.0, weight_decay=wd_g),
    ]


def _decay_energy(model: Model, groups: list) -> float:
    return sum(0.5 * g.weight_decay * float(np.sum(model.params[n].data ** 2))
               for g in groups for n in g.names)


def train_loop(model: Model, train: Dataset, cfg: TrainConfig, *,
               source: Optional[SourceSnapshot] = None,
               test: Optional[Dataset] = None,
               groups: Optional[list] = None,
               max_steps: Optional[int] = None,
               step_hook: Optional[Callable[[int, Model], None]] = None) -> list:
    """Run ``cfg.epochs`` epochs of grouped SGD; return per-epoch records.

    One cross-entropy scalar drives both parameter sets: the classifier sees
    it directly, the extractor through the gradient-reduce layer.  SBR (or a
    baseline penalty) is attached to the features before that layer.
    """
    groups = groups if groups is not None else param_groups(model, cfg)
    opt = SGD(model.params, groups, cfg.momentum)
    plan = cfg.batch_plan
    measure = cfg.measure_obj
    x_all = train.features
    y_all = train.labels
    seed = cfg.seed

    steps_per_epoch = len(stratified_batches(y_all, plan, seed=[seed, 0]))
    total = cfg.epochs if cfg.schedule_per == "epoch" else cfg.epochs * steps_per_epoch
    sched = CosineSchedule(cfg.base_lr, total)

    records = []
    step = 0
    for epoch in range(cfg.epochs):
        batches = stratified_batches(y_all, plan, seed=[seed, epoch])
        sums = {"cls": 0.0, "sbr": 0.0, "reg": 0.0}
        lr = lr_at(sched, epoch) if cfg.schedule_per == "epoch" else None
        for idx in batches:
            if max_steps is not None and step >= max_steps:
                break
            if cfg.schedule_per == "step":
                lr = lr_at(sched, min(step, total))
            xb = Tensor(x_all[idx])
            yb = y_all[idx]
            with Tape() as tape:
                feats, logits = forward(model, xb)
                cls = cross_entropy(logits, yb)
                sbr_loss = sbr(feats, yb, measure) if cfg.method == "sbr" else None
                reg = {}
                if cfg.method == "l2sp":
                    reg["f"] = l2sp_reg(model, source, cfg.sp_alpha, cfg.sp_beta)
                elif cfg.method == "delta_lite":
                    reg["f"] = delta_lite_reg(feats, features_np(source.w_f_star, xb.data)) * cfg.beta
                beta = cfg.beta if cfg.method == "sbr" else 0.0
                composed = compose_losses(cls, sbr_loss, reg, cfg.alpha, beta)
            tape.backward(composed.total, params=model.parameters())
            sums["cls"] += cls.item()
            sums["sbr"] += sbr_loss.item() if sbr_loss is not None else 0.0
            sums["reg"] += (reg["f"].item() if "f" in reg else 0.0) + _decay_energy(model, groups)
            opt.step(lr)
            step += 1
            if step_hook is not None:
                step_hook(step, model)
        n = max(len(batches), 1)
        rec = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_cls_loss": sums["cls"] / n,
            "train_sbr_loss": sums["sbr"] / n,
            "reg_loss": sums["reg"] / n,
            "train_acc": evaluate(model, train),
            "test_acc": evaluate(model, test) if test is not None else None,
        }
        records.append(rec)
        if max_steps is not None and step >= max_steps:
            break
    return records


def pretrain(cfg: TrainConfig, source: Dataset, out_path: Optional[str] = None) -> Model:
    """Plain cross-entropy + L2 on the source task; optionally write a checkpoint."""
    if out_path is not None:
        parent = os.path.dirname(os.path.abspath(out_path))
        if not os.path.isdir(parent):
            raise FileNotFoundError(f"output directory does not exist: {parent}")
    cfg = cfg.with_(method="baseline_l2", alpha=1.0, kappa=1.0, beta=0.0, sampling_rate=1.0)
    model = init_model(cfg.model_spec(source.input_dim, source.num_classes), cfg.seed)
    records = train_loop(model, source, cfg)
    log.info("pretrain done: train_acc=%.4f", records[-1]["train_acc"])
    if out_path is not None:
        save_checkpoint(model, out_path)
    return model


def finetune(cfg: TrainConfig, source: SourceSnapshot, train: Dataset, test: Dataset,
             seed: Optional[int] = None, **loop_kw) -> tuple:
    """Subsample the target set, initialise from ``source`` and train.

    Returns ``(model, RunReport)``; the report's final accuracy is last-epoch.
    """
    seed = cfg.seed if seed is None else seed
    cfg = cfg.with_(seed=seed)
    t0 = time.perf_counter()
    ds = subsample(train, cfg.sampling_rate, seed=[seed, 17]) if cfg.sampling_rate < 1.0 else train
    model = init_model(cfg.model_spec(train.input_dim, train.num_classes), seed, source=source, alpha=cfg.alpha)
    records = train_loop(model, ds, cfg, source=source, test=test, **loop_kw)
    for r in records:
        r["seed"] = seed
    acc = records[-1]["test_acc"]
    rep = RunReport(cfg.to_dict(), records,
                    {"test_acc_mean": acc, "test_acc_std": 0.0, "test_accs": [acc], "seeds": [seed]},
                    time.perf_counter() - t0)
    return model, rep


def run_seeds(cfg: TrainConfig, source: SourceSnapshot, train: Dataset, test: Dataset) -> RunReport:
    """``cfg.seeds_for_report`` fine-tuning runs at seeds ``cfg.seed, cfg.seed + 1, ...``."""
    t0 = time.perf_counter()
    records, accs, seeds = [], [], []
    for s in range(cfg.seed, cfg.seed + cfg.seeds_for_report):
        _, rep = finetune(cfg, source, train, test, seed=s)
        records.extend(rep.records)
        accs.append(rep.final["test_acc_mean"])
        seeds.append(s)
    final = {
        "test_acc_mean": float(np.mean(accs)),
        "test_acc_std": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
        "test_accs": accs,
        "seeds": seeds,
    }
    return RunReport(cfg.to_dict(), records, final, time.perf_counter() - t0)


def dump_features(model: Model, ds: Dataset, path) -> None:
    """CSV ``label,f0..f{d-1}`` of raw extractor outputs."""
    feats = features_np(model.params, ds.features)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(",".join(["label"] + [f"f{j}" for j in range(feats.shape[1])]) + "\n")
        for y, row in zip(ds.labels, feats):
            fh.write(",".join([str(int(y))] + [repr(float(v)) for v in row]) + "\n")
    os.replace(tmp, path)
