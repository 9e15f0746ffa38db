import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbr_lab.autodiff import Tape, Tensor, grad_check
from sbr_lab.losses import (
    ClassGroups, Measure, compose_losses, cross_entropy, delta_lite_reg, l2_reg, l2sp_reg,
    sbr_center, sbr_center_grad, sbr_class_terms, sbr_pairwise,
)
from sbr_lab.model import ModelSpec, init_model, snapshot


def brute_sbr(feats, labels, kind="squared_euclidean"):
    """Enumerate ordered same-class pairs i != j directly."""
    feats = np.asarray(feats, dtype=float)
    total = 0.0
    for c in set(labels):
        idx = [i for i, y in enumerate(labels) if y == c]
        n = len(idx)
        if n < 2:
            continue
        s = 0.0
        for i in idx:
            for j in idx:
                if i == j:
                    continue
                a, b = feats[i], feats[j]
                if kind == "squared_euclidean":
                    s += 0.5 * sum((a - b) ** 2)
                elif kind == "neg_inner":
                    s += -sum(a * b)
                else:
                    na, nb = math.sqrt(sum(a * a)), math.sqrt(sum(b * b))
                    s += 0.0 if na == 0 or nb == 0 else -sum(a * b) / (na * nb)
        total += s / (n * (n - 1))
    return total


def value_and_grad(fn, feats, labels):
    x = Tensor(feats, requires_grad=True)
    with Tape() as tape:
        loss = fn(x, labels)
    tape.backward(loss, params=[x])
    return loss.item(), x.grad


def random_batch(rng, n_max=64, d_max=32, c_max=10):
    n = int(rng.integers(1, n_max + 1))
    d = int(rng.integers(1, d_max + 1))
    C = int(rng.integers(1, c_max + 1))
    labels = rng.integers(0, C, size=n)
    return rng.normal(size=(n, d)) * 2.0, labels


# --- cross entropy ------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    assert cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_two_class_value():
    expected = -math.log(math.e / (math.e + 1))
    assert expected == pytest.approx(0.313262, abs=1e-6)
    assert cross_entropy(Tensor([[1.0, 0.0]]), [0]).item() == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_is_stable_for_large_logits():
    v = cross_entropy(Tensor([[1000.0, 0.0]]), [0]).item()
    assert 0.0 <= v < 1e-300 or v == 0.0


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, size=6)
    rep = grad_check(lambda t: cross_entropy(t, labels), rng.normal(size=(6, 5)), tol=1e-5)
    assert rep.passed, str(rep)


# --- sbr examples -------------------------------------------------------------

def test_identical_class_features_give_zero():
    f = Tensor([[1.0, 2.0], [1.0, 2.0], [0.0, 5.0], [0.0, 5.0]])
    assert sbr_pairwise(f, [0, 0, 1, 1]).item() == 0.0
    assert sbr_center(f, [0, 0, 1, 1]).item() == 0.0


def test_two_point_example():
    f = [[0.0, 0.0], [2.0, 0.0]]
    assert brute_sbr(f, [0, 0]) == 2.0
    assert sbr_pairwise(Tensor(f), [0, 0]).item() == 2.0
    assert sbr_center(Tensor(f), [0, 0]).item() == 2.0


def test_singleton_class_contributes_zero():
    f = [[0.0, 0.0], [2.0, 0.0], [1.0, 1.0]]
    assert brute_sbr(f, [0, 0, 1]) == 2.0
    assert sbr_pairwise(Tensor(f), [0, 0, 1]).item() == 2.0
    assert sbr_center(Tensor(f), [0, 0, 1]).item() == 2.0


def test_all_singletons_is_exact_zero_with_zero_grad():
    v, g = value_and_grad(sbr_center, np.eye(3), [0, 1, 2])
    assert v == 0.0 and not g.any()


def test_neg_cosine_identical_vectors():
    f = Tensor([[1.0, 0.0], [1.0, 0.0]])
    assert sbr_pairwise(f, [0, 0], Measure("neg_cosine")).item() == pytest.approx(-1.0, abs=1e-15)


def test_neg_cosine_zero_vector_contributes_zero():
    f = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]
    v = sbr_pairwise(Tensor(f), [0, 0, 0], Measure("neg_cosine")).item()
    assert v == pytest.approx(brute_sbr(f, [0, 0, 0], "neg_cosine"), abs=1e-15)
    assert v == pytest.approx(-2 / 6, abs=1e-15)


@pytest.mark.parametrize("kind", ["squared_euclidean", "neg_cosine", "neg_inner"])
def test_pairwise_matches_brute_force(kind):
    rng = np.random.default_rng(3)
    for _ in range(30):
        feats, labels = random_batch(rng, 20, 6, 4)
        got = sbr_pairwise(Tensor(feats), labels.tolist(), Measure(kind)).item()
        assert got == pytest.approx(brute_sbr(feats, labels.tolist(), kind), rel=1e-10, abs=1e-10)


def test_center_gradient_two_point():
    _, g = value_and_grad(sbr_center, np.array([[0.0, 0.0], [2.0, 0.0]]), [0, 0])
    np.testing.assert_allclose(g[0], [-2.0, 0.0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(g[1], [2.0, 0.0], rtol=0, atol=1e-12)


def test_center_gradient_finite_differences():
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(8, 4))
    labels = np.array([0, 0, 0, 1, 1, 2, 2, 2])
    rep = grad_check(lambda t: sbr_center(t, labels), feats, tol=1e-5)
    assert rep.passed, str(rep)


@pytest.mark.parametrize("kind", ["neg_cosine", "neg_inner"])
def test_pairwise_gradients_finite_differences(kind):
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(7, 3))
    labels = np.array([0, 0, 1, 1, 1, 2, 0])
    rep = grad_check(lambda t: sbr_pairwise(t, labels, Measure(kind)), feats, tol=1e-5)
    assert rep.passed, str(rep)


def test_measure_validation():
    with pytest.raises(ValueError):
        Measure("manhattan")


# --- invariants ---------------------------------------------------------------

def test_pairwise_center_equivalence_random():
    rng = np.random.default_rng(6)
    for _ in range(100):
        feats, labels = random_batch(rng)
        vp, gp = value_and_grad(lambda t, y: sbr_pairwise(t, y), feats, labels)
        vc, gc = value_and_grad(sbr_center, feats, labels)
        assert abs(vp - vc) <= 1e-9
        assert np.max(np.abs(gp - gc)) <= 1e-9


def test_closed_form_gradient_equals_tape():
    rng = np.random.default_rng(7)
    for _ in range(50):
        feats, labels = random_batch(rng)
        _, g = value_and_grad(sbr_center, feats, labels)
        np.testing.assert_allclose(g, sbr_center_grad(feats, labels), rtol=0, atol=1e-12)


def test_class_locality():
    rng = np.random.default_rng(8)
    feats = rng.normal(size=(10, 3))
    labels = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2, 2])
    before = sbr_class_terms(Tensor(feats), labels)
    moved = feats.copy()
    moved[4] += 5.0  # a class-1 sample
    after = sbr_class_terms(Tensor(moved), labels)
    for c in (0, 2):
        assert before[c].data.tobytes() == after[c].data.tobytes()
    assert before[1].item() != after[1].item()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    feats, labels = random_batch(rng, 24, 5, 4)
    perm = rng.permutation(len(labels))
    for fn in (lambda t, y: sbr_pairwise(t, y), sbr_center):
        a = fn(Tensor(feats), labels).item()
        b = fn(Tensor(feats[perm]), labels[perm]).item()
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_translation_invariance_squared_euclidean(seed):
    rng = np.random.default_rng(seed)
    feats, labels = random_batch(rng, 24, 5, 4)
    shift = rng.normal(size=feats.shape[1]) * 3
    for fn in (lambda t, y: sbr_pairwise(t, y), sbr_center):
        a = fn(Tensor(feats), labels).item()
        b = fn(Tensor(feats + shift), labels).item()
        assert abs(a - b) <= 1e-9


def test_neg_inner_is_not_translation_invariant():
    rng = np.random.default_rng(9)
    feats = rng.normal(size=(6, 3))
    labels = [0, 0, 0, 1, 1, 1]
    m = Measure("neg_inner")
    a = sbr_pairwise(Tensor(feats), labels, m).item()
    b = sbr_pairwise(Tensor(feats + np.array([1.0, -2.0, 0.5])), labels, m).item()
    assert abs(a - b) > 1e-3


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_nonnegativity_and_zero_iff_constant(seed):
    rng = np.random.default_rng(seed)
    feats, labels = random_batch(rng, 24, 5, 4)
    assert sbr_center(Tensor(feats), labels).item() >= 0.0
    groups = ClassGroups(labels)
    const = feats.copy()
    for c, idx in groups.index.items():
        const[idx] = feats[idx[0]]
    assert sbr_center(Tensor(const), labels).item() == pytest.approx(0.0, abs=1e-20)
    if any(groups.count(c) >= 2 for c in groups.classes):
        assert sbr_center(Tensor(feats), labels).item() > 0.0


def test_measures_are_symmetric():
    rng = np.random.default_rng(10)
    a, b = rng.normal(size=4), rng.normal(size=4)
    for kind in ("squared_euclidean", "neg_cosine", "neg_inner"):
        m = Measure(kind)
        assert m(a, b) == pytest.approx(m(b, a), abs=1e-15)
    assert Measure()(a, a) == 0.0 and Measure()(a, b) > 0


def test_class_groups_counts():
    g = ClassGroups([2, 0, 2, 2, 1])
    assert sum(g.count(c) for c in g.classes) == 5
    assert g.pair_count(2) == 6 and g.pair_count(1) == 0
    centers = g.centers(np.arange(10.0).reshape(5, 2))
    np.testing.assert_allclose(centers[2], np.arange(10.0).reshape(5, 2)[[0, 2, 3]].mean(axis=0))


# --- baseline regularizers ----------------------------------------------------

def test_l2_reg():
    assert l2_reg([Tensor([3.0, 4.0])]).item() == 25.0


def test_l2sp_zero_at_source_with_zero_head():
    spec = ModelSpec(4, (5, 3), 2)
    m = init_model(spec, 0)
    snap = snapshot(m)
    for n in m.classifier_names:
        m.params[n].data = np.zeros_like(m.params[n].data)
    assert l2sp_reg(m, snap, 0.1, 0.01).item() == 0.0
    m.params["f0.b"].data = m.params["f0.b"].data + 1.0
    m.params["g.b"].data = m.params["g.b"].data + 2.0
    assert l2sp_reg(m, snap, 0.1, 0.01).item() == pytest.approx(0.1 * 5 + 0.01 * 8)


def test_l2sp_snapshot_mismatch():
    from sbr_lab.model import SpecMismatchError
    m = init_model(ModelSpec(4, (5, 3), 2), 0)
    other = snapshot(init_model(ModelSpec(4, (6, 3), 2), 0))
    with pytest.raises(SpecMismatchError):
        l2sp_reg(m, other, 0.1, 0.1)


def test_delta_lite():
    f = np.random.default_rng(0).normal(size=(3, 2))
    assert delta_lite_reg(Tensor(f), f).item() == 0.0
    x = Tensor(f, requires_grad=True)
    src = Tensor(f + 1.0, requires_grad=True)
    with Tape() as tape:
        loss = delta_lite_reg(x, src)
    tape.backward(loss, params=[x, src])
    assert loss.item() == pytest.approx(3.0)
    np.testing.assert_allclose(x.grad, -np.ones((3, 2)))
    assert not src.grad.any()


# --- composition --------------------------------------------------------------

def test_compose_values_and_gradient_routing():
    from sbr_lab.model import forward
    spec = ModelSpec(4, (5, 3), 3)
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(6, 4)))
    y = np.array([0, 0, 1, 1, 2, 2])

    def grads(alpha, beta):
        m = init_model(spec, 2, alpha=alpha)
        with Tape() as tape:
            feats, logits = forward(m, x)
            cls = cross_entropy(logits, y)
            reg = sbr_center(feats, y)
            out = compose_losses(cls, reg, {}, alpha, beta)
        tape.backward(out.total, params=m.parameters())
        return out, {n: p.grad for n, p in m.params.items()}, cls.item(), reg.item()

    plain, g_plain, _, _ = grads(1.0, 0.0)
    assert plain.L_g == pytest.approx(plain.L_f)
    red, g_red, _, _ = grads(0.1, 0.0)
    for n in g_plain:
        if n.startswith("g."):
            assert g_red[n].tobytes() == g_plain[n].tobytes()
        else:
            np.testing.assert_allclose(g_red[n], 0.1 * g_plain[n], rtol=0, atol=1e-14)
    full, _, cls_val, sbr_val = grads(0.1, 1e-4)
    assert full.L_g == cls_val
    assert full.L_f == pytest.approx(0.1 * cls_val + 1e-4 * sbr_val, rel=1e-15)


def test_compose_rejects_negative_beta():
    with pytest.raises(ValueError):
        compose_losses(Tensor(1.0) * 1.0, None, {}, 0.1, -1.0)
