"""Built-in identity checks: autodiff, SBR centre form, kappa rescaling, gradient reduce."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor, grad_check, squared_l2
from .config import TrainConfig
from .data import Dataset
from .losses import Measure, cross_entropy, sbr_center, sbr_center_grad, sbr_pairwise
from .model import ModelSpec, forward, forward_features, init_model, snapshot
from .train import train_loop


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def __str__(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def random_batch(rng: np.random.Generator, max_batch: int = 64, max_d: int = 32, max_classes: int = 10) -> tuple:
    """Random features and labels with uneven class sizes, singletons included."""
    n = int(rng.integers(1, max_batch + 1))
    d = int(rng.integers(1, max_d + 1))
    C = int(rng.integers(1, max_classes + 1))
    weights = rng.dirichlet(np.full(C, 0.5))
    labels = rng.choice(C, size=n, p=weights)
    feats = rng.normal(size=(n, d)) * rng.uniform(0.1, 3.0)
    return feats, labels


def _value_and_grad(fn, feats: np.ndarray, labels) -> tuple:
    x = Tensor(feats, requires_grad=True)
    with Tape() as tape:
        loss = fn(x, labels)
    tape.backward(loss, params=[x])
    return loss.item(), x.grad


# ---------------------------------------------------------------------------

def check_autodiff(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(8, 4))
    labels = np.array([0, 0, 1, 1, 1, 2, 2, 3])
    logits = rng.normal(size=(6, 5))
    ce_labels = rng.integers(0, 5, size=6)
    spec = ModelSpec(5, (7, 6), 3)
    model = init_model(spec, seed)
    x = Tensor(rng.normal(size=(4, 5)))
    y = np.array([0, 1, 2, 1])

    def mlp_loss(W):
        model.params["f1.W"] = W
        _, out = forward(model, x)
        return cross_entropy(out, y)

    battery = {
        "squared_l2": (squared_l2, np.array([1.0, 2.0, 3.0])),
        "cross_entropy": (lambda t: cross_entropy(t, ce_labels), logits),
        "sbr_center": (lambda t: sbr_center(t, labels), feats),
        "sbr_pairwise_cosine": (lambda t: sbr_pairwise(t, labels, Measure("neg_cosine")), feats),
        "sbr_pairwise_inner": (lambda t: sbr_pairwise(t, labels, Measure("neg_inner")), feats),
        "mlp_3layer": (mlp_loss, model.params["f1.W"].data.copy()),
    }
    worst = 0.0
    failed = []
    for name, (fn, point) in battery.items():
        rep = grad_check(fn, point, tol=1e-5)
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            failed.append(name)
    ok = not failed
    return CheckResult("autodiff grad_check battery", ok,
                       f"{len(battery)} functions, worst rel err {worst:.2e}" + (f"; failed {failed}" if failed else ""))


def check_center_identity(n_batches: int = 200, seed: int = 1, tol: float = 1e-9,
                          pairwise: Callable = sbr_pairwise) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_v = worst_g = 0.0
    for _ in range(n_batches):
        feats, labels = random_batch(rng)
        vp, gp = _value_and_grad(lambda t, y: pairwise(t, y, Measure("squared_euclidean")), feats, labels)
        vc, gc = _value_and_grad(sbr_center, feats, labels)
        worst_v = max(worst_v, abs(vp - vc))
        worst_g = max(worst_g, float(np.max(np.abs(gp - gc))))
    ok = worst_v <= tol and worst_g <= tol
    return CheckResult("pairwise == centre form", ok,
                       f"{n_batches} batches, max |dvalue| {worst_v:.2e}, max |dgrad| {worst_g:.2e} (tol {tol:g})")


def check_closed_form_gradient(n_batches: int = 50, seed: int = 2, tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_batches):
        feats, labels = random_batch(rng)
        _, g = _value_and_grad(sbr_center, feats, labels)
        worst = max(worst, float(np.max(np.abs(g - sbr_center_grad(feats, labels)))))
    _, g2 = _value_and_grad(sbr_center, np.array([[0.0, 0.0], [2.0, 0.0]]), [0, 0])
    two_point = float(np.max(np.abs(g2[0] - np.array([-2.0, 0.0]))))
    ok = worst <= tol and two_point <= 1e-12
    return CheckResult("closed-form SBR gradient 2/(N_c-1)(f_i - C_c)", ok,
                       f"max |tape - closed form| {worst:.2e}; two-point f1 grad {g2[0].tolist()}")


# ---------------------------------------------------------------------------
# kappa equivalence

def _toy_problem(seed: int = 3):
    rng = np.random.default_rng(seed)
    C, per, D = 4, 8, 6
    means = rng.normal(size=(C, D)) * 2.0
    y = np.repeat(np.arange(C), per)
    x = means[y] + rng.normal(size=(len(y), D))
    ds = Dataset(x, y, C)
    spec = ModelSpec(D, (10, 8), C)
    source = snapshot(init_model(spec, seed + 100))
    return ds, spec, source


def kappa_trajectories(kappa: float = 10.0, steps: int = 50, momentum: float = 0.0,
                       alpha: float = 0.1, beta: float = 0.05, weight_decay: float = 1e-3,
                       base_lr: float = 0.05, seed: int = 3) -> tuple:
    """Per-step parameter snapshots for ``(lr/kappa, a, b, l)`` and ``(lr, a/kappa, b/kappa, l/kappa)``."""
    ds, spec, source = _toy_problem(seed)
    common = dict(method="sbr", classes_per_batch=2, samples_per_class=4, epochs=steps,
                  base_lr=base_lr, momentum=momentum, weight_decay=weight_decay, seed=seed)
    cfg_lr = TrainConfig(alpha=alpha, beta=beta, kappa=kappa, **common)
    cfg_grad = TrainConfig(alpha=alpha / kappa, beta=beta / kappa, kappa=1.0,
                           weight_decay_f=weight_decay / kappa, **common)
    out = []
    for cfg in (cfg_lr, cfg_grad):
        model = init_model(spec, seed, source=source, alpha=cfg.alpha)
        traj = []
        train_loop(model, ds, cfg, max_steps=steps, step_hook=lambda s, m: traj.append(m.state()))
        out.append(traj)
    return spec, out[0], out[1]


def trajectory_gap(spec, a: list, b: list, names=None) -> list:
    """Per-step max over parameters of ``max|a - b| / max|a|``."""
    gaps = []
    for sa, sb in zip(a, b):
        keys = names or list(sa)
        gaps.append(max(float(np.max(np.abs(sa[k] - sb[k]))) / max(float(np.max(np.abs(sa[k]))), 1e-300)
                        for k in keys))
    return gaps


def check_kappa_equivalence(momentum: float = 0.0, tol: float = 1e-9, steps: int = 50) -> CheckResult:
    spec, a, b = kappa_trajectories(momentum=momentum, steps=steps)
    f_names = [n for n in a[0] if n.startswith("f")]
    gaps = trajectory_gap(spec, a, b, f_names)
    ok = len(gaps) == steps and max(gaps) <= tol
    return CheckResult(f"kappa rescaling equivalence (momentum={momentum})", ok,
                       f"{len(gaps)} steps, max relative w_f gap {max(gaps):.2e} (tol {tol:g})")


# ---------------------------------------------------------------------------

def gradient_reduce_grads(alpha: float, seed: int = 4) -> dict:
    """Parameter gradients of a classifier-path-only loss at the given alpha."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(5, (6, 4), 3)
    model = init_model(spec, seed, alpha=alpha)
    x = Tensor(rng.normal(size=(7, 5)))
    y = rng.integers(0, 3, size=7)
    with Tape() as tape:
        _, logits = forward(model, x)
        loss = cross_entropy(logits, y)
    tape.backward(loss, params=model.parameters())
    return {n: p.grad.copy() for n, p in model.params.items()}


def check_gradient_reduce(alpha: float = 0.1) -> CheckResult:
    from .model import gradient_reduce

    x = Tensor(np.random.default_rng(5).normal(size=(4, 3)))
    ident = np.array_equal(gradient_reduce(x, alpha).data, x.data)
    g1 = gradient_reduce_grads(1.0)
    ga = gradient_reduce_grads(alpha)
    f_err = max(float(np.max(np.abs(ga[n] - alpha * g1[n]))) for n in g1 if n.startswith("f"))
    g_same = all(np.array_equal(ga[n], g1[n]) for n in g1 if n.startswith("g."))
    ok = ident and f_err <= 1e-12 and g_same
    return CheckResult("gradient-reduce contract", ok,
                       f"identity forward {ident}, max |g_f(a) - a g_f(1)| {f_err:.2e}, w_g grads bitwise equal {g_same}")


def selfcheck(momentum: float = 0.0) -> list:
    return [
        check_autodiff(),
        check_center_identity(),
        check_closed_form_gradient(),
        check_kappa_equivalence(momentum=momentum),
        check_gradient_reduce(),
    ]
