import itertools
import json
from types import SimpleNamespace

import numpy as np
import pytest

from sbr_lab.config import TrainConfig
from sbr_lab.data import Dataset, SyntheticTransferSpec, gen_synthetic_transfer, load_csv
from sbr_lab.model import ModelSpec, SpecMismatchError, init_model, load_model, snapshot
from sbr_lab.sweep import format_table, sweep, write_table
from sbr_lab.train import (
    RunReport, dump_features, evaluate, features_np, finetune, predict, pretrain, run_seeds,
)

TINY = SyntheticTransferSpec(input_dim=8, class_dims=4, nuisance_dims=2, source_classes=5,
                             target_classes=4, source_per_class=30, target_train_per_class=12,
                             target_test_per_class=10, seed=4)


@pytest.fixture(scope="module")
def tiny():
    src, train, test = gen_synthetic_transfer(TINY)
    pre = TrainConfig(method="baseline_l2", alpha=1.0, kappa=1.0, beta=0.0, epochs=25,
                      feature_layer_widths=(16, 8), classes_per_batch=4, samples_per_class=4)
    model = pretrain(pre, src)
    return SimpleNamespace(src=src, train=train, test=test, model=model, source=snapshot(model), pre=pre)


def ft_config(**kw):
    base = dict(method="sbr", beta=1e-3, epochs=6, feature_layer_widths=(16, 8),
                classes_per_batch=2, samples_per_class=4, seeds_for_report=2)
    base.update(kw)
    return TrainConfig(**base)


# --- evaluation ----------------------------------------------------------------

def test_evaluate_perfect_classifier():
    m = init_model(ModelSpec(2, (2,), 2), 0)
    m.params["f0.W"].data = np.eye(2)
    m.params["g.W"].data = np.eye(2)
    ds = Dataset(np.array([[1.0, 0.0], [0.0, 1.0], [3.0, 1.0]]), [0, 1, 0], 2)
    assert evaluate(m, ds) == 1.0


def test_evaluate_matches_brute_force(tiny):
    m = tiny.model
    rng = np.random.default_rng(0)
    labels = rng.permutation(tiny.src.labels)
    ds = Dataset(tiny.src.features, labels, tiny.src.num_classes)
    correct = 0
    for xi, yi in zip(ds.features, ds.labels):
        h = xi
        for k in itertools.count():
            if f"f{k}.W" not in m.params:
                break
            h = np.maximum(h @ m.params[f"f{k}.W"].data + m.params[f"f{k}.b"].data, 0.0)
        scores = list(h @ m.params["g.W"].data + m.params["g.b"].data)
        correct += scores.index(max(scores)) == yi
    assert evaluate(m, ds) == correct / len(ds)


def test_predict_breaks_ties_to_lowest_class():
    m = init_model(ModelSpec(2, (2,), 3), 0)
    for p in m.params.values():
        p.data = np.zeros_like(p.data)
    assert predict(m, np.ones((3, 2))).tolist() == [0, 0, 0]


def test_evaluate_errors(tiny):
    class Empty:  # Dataset itself refuses zero rows
        input_dim = 8

        def __len__(self):
            return 0

    with pytest.raises(ValueError):
        evaluate(tiny.model, Empty())
    wrong = Dataset(np.ones((2, 3)), [0, 1], 4)
    with pytest.raises(SpecMismatchError):
        evaluate(tiny.model, wrong)


# --- pretraining -----------------------------------------------------------------

def test_pretrain_fits_source(tiny):
    assert evaluate(tiny.model, tiny.src) > 0.9


def test_pretrain_checkpoint_is_reproducible(tiny, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    pretrain(tiny.pre.with_(epochs=3), tiny.src, str(a))
    pretrain(tiny.pre.with_(epochs=3), tiny.src, str(b))
    assert a.read_bytes() == b.read_bytes()
    assert load_model(a).spec.num_classes == tiny.src.num_classes


def test_pretrain_missing_directory(tiny, tmp_path):
    with pytest.raises(FileNotFoundError):
        pretrain(tiny.pre.with_(epochs=1), tiny.src, str(tmp_path / "nope" / "m.ckpt"))


# --- fine-tuning -------------------------------------------------------------------

def test_finetune_records(tiny):
    _, rep = finetune(ft_config(), tiny.source, tiny.train, tiny.test)
    assert [r["epoch"] for r in rep.records] == list(range(1, 7))
    assert rep.records[0]["lr"] == 0.05
    assert all(r["train_sbr_loss"] > 0 for r in rep.records)
    assert rep.final["test_acc_mean"] == rep.records[-1]["test_acc"]


def test_zero_beta_sbr_matches_baseline_with_same_optimizer(tiny):
    sbr_cfg = ft_config(beta=0.0, alpha=0.3, kappa=2.0)
    base_cfg = sbr_cfg.with_(method="baseline_l2")
    a, _ = finetune(sbr_cfg, tiny.source, tiny.train, tiny.test)
    b, _ = finetune(base_cfg, tiny.source, tiny.train, tiny.test)
    for n in a.params:
        np.testing.assert_allclose(a.params[n].data, b.params[n].data, rtol=0, atol=1e-14)


def test_finetune_is_bitwise_deterministic(tiny):
    a, ra = finetune(ft_config(sampling_rate=0.5), tiny.source, tiny.train, tiny.test)
    b, rb = finetune(ft_config(sampling_rate=0.5), tiny.source, tiny.train, tiny.test)
    for n in a.params:
        assert a.params[n].data.tobytes() == b.params[n].data.tobytes()
    assert ra.records == rb.records


@pytest.mark.parametrize("method", ["baseline_l2", "l2sp", "delta_lite"])
def test_baselines_run(tiny, method):
    _, rep = finetune(ft_config(method=method, beta=1e-3, epochs=3), tiny.source, tiny.train, tiny.test)
    assert 0.0 <= rep.final["test_acc_mean"] <= 1.0
    if method != "baseline_l2":
        assert rep.records[0]["reg_loss"] > 0


def test_l2sp_is_zero_at_the_source_point(tiny):
    # with one step and lr tiny the extractor barely moves, so the penalty is near its source value of 0
    _, rep = finetune(ft_config(method="l2sp", sp_beta=0.0, epochs=1, base_lr=1e-12), tiny.source,
                      tiny.train, tiny.test)
    assert rep.records[0]["reg_loss"] < 1e-12


def test_run_seeds_aggregates(tiny):
    rep = run_seeds(ft_config(epochs=2, seeds_for_report=3, seed=10), tiny.source, tiny.train, tiny.test)
    accs = rep.final["test_accs"]
    assert rep.final["seeds"] == [10, 11, 12]
    assert rep.final["test_acc_mean"] == pytest.approx(np.mean(accs))
    assert rep.final["test_acc_std"] == pytest.approx(np.std(accs, ddof=1))
    assert len(rep.records) == 6


def test_report_jsonl_round_trip(tiny, tmp_path):
    rep = run_seeds(ft_config(epochs=2), tiny.source, tiny.train, tiny.test)
    path = tmp_path / "r.jsonl"
    rep.write(path)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert [l["type"] for l in lines] == ["config"] + ["epoch"] * 4 + ["final"]
    back = RunReport.read(path)
    assert back.config == rep.config and back.records == rep.records and back.final == rep.final


def test_dump_features(tiny, tmp_path):
    path = tmp_path / "f.csv"
    dump_features(tiny.model, tiny.test, path)
    back = load_csv(path)
    assert back.features.shape == (len(tiny.test), 8)
    assert back.labels.tolist() == tiny.test.labels.tolist()
    assert back.features.tobytes() == features_np(tiny.model.params, tiny.test.features).tobytes()


# --- sweeps ----------------------------------------------------------------------------

@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_sweep_sorts_and_records_failures(tiny):
    bench = SimpleNamespace(source=tiny.source, train=tiny.train, test=tiny.test)
    cfg = ft_config(epochs=2, measure="neg_inner")
    cells = sweep(cfg, "beta_grid", [1e6, 1e-4], bench, workers=1)
    assert [c.value for c in cells] == [1e-4, 1e6]
    assert cells[0].ok and not cells[1].ok
    assert "NonFiniteError" in cells[1].error
    assert "failed" in format_table(cells)


def test_sweep_tunes_beta_per_measure(tiny, tmp_path):
    bench = SimpleNamespace(source=tiny.source, train=tiny.train, test=tiny.test)
    grids = {"squared_euclidean": (1e-4, 1e-3), "neg_cosine": (0.1,)}
    cells = sweep(ft_config(epochs=2, sampling_rate=0.5), "measure", ["squared_euclidean", "neg_cosine"],
                  bench, beta_grids=grids, workers=1)
    by = {c.value: c for c in cells}
    assert [b for b, _ in by["squared_euclidean"].tried] == [1e-4, 1e-3]
    best = max(by["squared_euclidean"].tried, key=lambda t: t[1])
    assert by["squared_euclidean"].mean == best[1]
    assert by["neg_cosine"].beta == 0.1
    path = tmp_path / "t.jsonl"
    write_table(cells, path)
    rows = [json.loads(l) for l in path.read_text().splitlines()]
    assert {r["value"] for r in rows} == {"squared_euclidean", "neg_cosine"}


def test_sweep_rejects_unknown_axis(tiny):
    with pytest.raises(ValueError):
        sweep(ft_config(), "depth", [1], None)
