import math
import struct

import numpy as np
import pytest

from gtmancer import diffcore as dc
from gtmancer import model
from gtmancer.dataio import SynthSpec, split_semi_supervised, synth_generate
from gtmancer.errors import (
    ContractError, DegenerateError, DigestMismatchError, DivergenceError, FormatError, ParameterError,
)
from gtmancer.model import (
    TrainConfig, check_compatible, cross_entropy_loss, evaluate, fit, forward, fuse, init_params,
    load_params, loss_terms, metrics_from_predictions, param_names, save_params, total_loss,
)

C = dc.const
FAST = TrainConfig(K=2, latent_dim=6, epochs=3)


# -- config ---------------------------------------------------------------------

@pytest.mark.parametrize("bad", [{"K": 0}, {"dropout_rate": 1.0}, {"label_ratio": 0.0}, {"label_ratio": 1.0},
                                 {"fusion": "attention"}, {"optimizer": "sgd"}, {"latent_dim": 0}])
def test_config_validation(bad):
    with pytest.raises(ParameterError):
        TrainConfig(**bad)


def test_config_defaults():
    c = TrainConfig()
    assert (c.K, c.tau, c.learning_rate, c.epochs, c.weight_decay, c.dropout_rate, c.label_ratio) == \
        (3, 10.0, 1e-2, 200, 5e-5, 0.5, 0.1)


def test_config_from_mapping():
    c = TrainConfig.from_mapping({"K": "2", "tau": "1.5", "fusion": "sum"})
    assert c.K == 2 and c.tau == 1.5 and c.fusion == "sum"
    with pytest.raises(ParameterError):
        TrainConfig.from_mapping({"nope": 1})


# -- parameters --------------------------------------------------------------------

def test_param_layout(small_dataset):
    for fusion, fused in (("mean", 6), ("sum", 6), ("concat", 12)):
        params = init_params(small_dataset.widths, 3, TrainConfig(K=2, latent_dim=6, fusion=fusion))
        assert set(params.tensors) == set(param_names(2, 2))
        assert params.tensors["cls.W"].shape == (fused, 3) and params.fused_dim == fused
        assert params.tensors["enc.W.0"].shape == (5, 6)
        assert params.tensors["att.K.1.shared"].shape == (6, 6)
        bound = 1 / math.sqrt(5)
        assert np.all(np.abs(params.tensors["enc.W.0"]) <= bound)
    assert params.count() == sum(v.size for v in params.tensors.values())


# -- fusion -----------------------------------------------------------------------

def test_fuse_modes(rng):
    Z = C(rng.standard_normal((4, 3)))
    np.testing.assert_allclose(fuse([Z, Z, Z], "mean").value, Z.value, atol=1e-15)
    A, B = C(rng.standard_normal((4, 3))), C(rng.standard_normal((4, 3)))
    np.testing.assert_allclose(fuse([A, B], "sum").value, 2 * fuse([A, B], "mean").value, atol=1e-15)
    assert fuse([A, B], "concat").shape == (4, 6)
    with pytest.raises(ContractError):
        fuse([], "mean")


# -- forward ----------------------------------------------------------------------

def test_forward_zero_attention_weights_is_degenerate(small_dataset):
    config = TrainConfig(K=1, latent_dim=4)
    params = init_params(small_dataset.widths, 3, config)
    for name in params.tensors:
        if name.startswith("att."):
            params.tensors[name][:] = 0.0
    with pytest.raises(DegenerateError):
        forward(small_dataset, params, config)


def test_single_modality_mean_fusion():
    ds = synth_generate(SynthSpec(12, 1, 2, (4,), seed=1))
    params = init_params(ds.widths, 2, FAST)
    result = forward(ds, params, FAST)
    np.testing.assert_array_equal(result.fused.value, result.Z_final[0].value)


def test_forward_eval_is_deterministic(small_dataset):
    params = init_params(small_dataset.widths, 3, FAST)
    a = forward(small_dataset, params, FAST).logits.value
    b = forward(small_dataset, params, FAST).logits.value
    assert a.tobytes() == b.tobytes()


def test_forward_diagnostics(small_dataset):
    params = init_params(small_dataset.widths, 3, FAST)
    result = forward(small_dataset, params, FAST)
    assert len(result.per_layer_objective) == FAST.K + 1
    assert all(np.isfinite(result.per_layer_objective))
    assert all(r.converged for r in result.projection_reports)
    assert all(0 < f <= 1 for layer in result.safety_factors for f in layer)


def test_forward_width_mismatch(small_dataset):
    params = init_params((9, 9), 3, FAST)
    with pytest.raises(FormatError):
        forward(small_dataset, params, FAST)


def test_softmax_rows_sum_to_one(small_dataset):
    params = init_params(small_dataset.widths, 3, FAST)
    proba = model.predict_proba(small_dataset, params, FAST)
    assert np.max(np.abs(proba.sum(axis=1) - 1)) <= 1e-12


def test_forward_permutation_equivariance(small_dataset):
    params = init_params(small_dataset.widths, 3, FAST)
    order = np.random.default_rng(0).permutation(small_dataset.n_samples)
    base = forward(small_dataset, params, FAST).logits.value
    perm = forward(small_dataset.permuted(order), params, FAST).logits.value
    np.testing.assert_allclose(perm, base[order], rtol=1e-9, atol=1e-9)
    np.testing.assert_array_equal(np.argmax(perm, axis=1), np.argmax(base[order], axis=1))


# -- losses ---------------------------------------------------------------------

def test_cross_entropy_perfect():
    logits = np.array([[800.0, 0.0], [0.0, 800.0]])
    assert cross_entropy_loss(C(logits), [0, 1], [0, 1]).item() == 0.0


def test_cross_entropy_uniform():
    assert cross_entropy_loss(C(np.zeros((5, 3))), [0, 1, 2, 0, 1], [0, 2, 4]).item() == \
        pytest.approx(3 * math.log(3), abs=1e-14)


def test_cross_entropy_scalar_loop(rng):
    logits = rng.standard_normal((6, 4)) * 3
    labels = [0, 3, 1, 2, 2, 0]
    train = [1, 2, 5]
    ref = 0.0
    for i in train:
        top = max(logits[i])
        lse = top + math.log(sum(math.exp(x - top) for x in logits[i]))
        ref -= logits[i][labels[i]] - lse
    assert abs(cross_entropy_loss(C(logits), labels, train).item() - ref) < 1e-10


def test_cross_entropy_empty_mask():
    with pytest.raises(ContractError):
        cross_entropy_loss(C(np.zeros((2, 2))), [0, 1], [])


def test_total_loss():
    assert total_loss(0.0, 0.0) == 0.0
    assert total_loss(1.5, 2.5) == 4.0
    r = np.random.default_rng(0).standard_normal(2)
    assert abs(total_loss(r[0], r[1]) - (r[0] + r[1])) <= 1e-15


def test_test_labels_never_enter_the_loss(small_dataset):
    params = init_params(small_dataset.widths, 3, FAST)
    mask = split_semi_supervised(small_dataset, 0.2, 0)
    result = forward(small_dataset, params, FAST)
    labels = small_dataset.labels.copy()
    base = [t.item() for t in loss_terms(result, labels, mask, FAST.tau)]
    labels[mask.test_indices] = (labels[mask.test_indices] + 1) % 3
    moved = [t.item() for t in loss_terms(result, labels, mask, FAST.tau)]
    assert base == moved


# -- training ---------------------------------------------------------------------

def test_fit_overfits_separable_set():
    ds = synth_generate(SynthSpec(40, 2, 2, (6, 6), cluster_separation=10.0, noise_sigma=0.1, seed=4))
    _, history = fit(ds, TrainConfig(latent_dim=16))
    assert history[-1]["train_acc"] == 1.0
    assert len(history) == 200


def test_fit_is_deterministic(small_dataset):
    _, h1 = fit(small_dataset, FAST)
    _, h2 = fit(small_dataset, FAST)
    assert abs(h1[-1]["l_total"] - h2[-1]["l_total"]) <= 1e-12


def test_fit_zero_learning_rate(small_dataset):
    config = TrainConfig(K=2, latent_dim=6, epochs=4, learning_rate=0.0, dropout_rate=0.0)
    start = init_params(small_dataset.widths, 3, config)
    params, history = fit(small_dataset, config, params=start)
    for name, value in start.tensors.items():
        np.testing.assert_array_equal(params.tensors[name], value)
    assert len({rec["l_total"] for rec in history}) == 1


def test_fit_plain_gradient_descent_runs(small_dataset):
    config = TrainConfig(K=1, latent_dim=6, epochs=2, optimizer="gd", learning_rate=1e-4)
    _, history = fit(small_dataset, config)
    assert all(np.isfinite(rec["l_total"]) for rec in history)


def test_fit_divergence_reports_epoch(small_dataset, monkeypatch):
    def nan_loss(l_ct, l_ce):
        return dc.Node(np.array([[np.nan]]))
    monkeypatch.setattr(model, "total_loss", nan_loss)
    with pytest.raises(DivergenceError) as info:
        fit(small_dataset, FAST)
    assert info.value.epoch == 0


def test_fit_log_records(small_dataset):
    _, history = fit(small_dataset, FAST)
    assert [r["epoch"] for r in history] == [0, 1, 2]
    for r in history:
        assert r["l_total"] == pytest.approx(r["l_ct"] + r["l_ce"])
        assert 0.0 <= r["train_acc"] <= 1.0


# -- metrics ---------------------------------------------------------------------

def test_hand_computed_confusion():
    report = metrics_from_predictions([0, 0, 1], [0, 1, 1], 2)
    assert report.accuracy == 2 / 3
    assert report.per_class_f1 == [2 / 3, 2 / 3]
    assert report.macro_f1 == 2 / 3
    assert report.confusion == [[1, 1], [0, 1]]


def test_perfect_predictions():
    report = metrics_from_predictions([0, 1, 2, 1], [0, 1, 2, 1], 3)
    assert report.accuracy == 1.0 and report.macro_f1 == 1.0


def test_absent_class_counts_zero():
    report = metrics_from_predictions([0, 1, 2], [0, 1, 1], 3)
    assert report.per_class_f1[2] == 0.0
    assert report.macro_f1 == pytest.approx(np.mean(report.per_class_f1))


def test_report_invariants(rng):
    truth, pred = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    report = metrics_from_predictions(truth, pred, 5)
    conf = np.array(report.confusion)
    assert report.accuracy == np.trace(conf) / conf.sum()
    assert report.macro_f1 == pytest.approx(np.mean(report.per_class_f1), abs=1e-15)
    assert report.per_class_f1[4] == 0.0


def test_macro_f1_matches_sklearn(rng):
    metrics = pytest.importorskip("sklearn.metrics")
    truth, pred = rng.integers(0, 4, 80), rng.integers(0, 4, 80)
    report = metrics_from_predictions(truth, pred, 4)
    assert report.macro_f1 == pytest.approx(
        metrics.f1_score(truth, pred, average="macro", labels=range(4), zero_division=0), abs=1e-12)


def test_evaluate_report(small_dataset):
    params, _ = fit(small_dataset, FAST)
    mask = split_semi_supervised(small_dataset, FAST.label_ratio, FAST.seed)
    report = evaluate(small_dataset, params, FAST, mask)
    assert np.array(report.confusion).sum() == len(mask.test_indices)
    assert len(report.per_layer_objective) == FAST.K + 1


# -- container -------------------------------------------------------------------

def test_container_round_trip(tmp_path, small_dataset):
    params = init_params(small_dataset.widths, 3, FAST)
    save_params(tmp_path / "m.bin", params, FAST)
    back, config, header = load_params(tmp_path / "m.bin")
    assert config == FAST
    for name, value in params.tensors.items():
        assert back.tensors[name].tobytes() == value.tobytes()
    check_compatible(header, small_dataset)


def test_container_rejects_bad_files(tmp_path, small_dataset):
    path = tmp_path / "m.bin"
    save_params(path, init_params(small_dataset.widths, 3, FAST), FAST)
    data = path.read_bytes()
    (tmp_path / "magic.bin").write_bytes(b"NOTMODEL" + data[8:])
    with pytest.raises(FormatError):
        load_params(tmp_path / "magic.bin")
    (tmp_path / "version.bin").write_bytes(data[:8] + struct.pack("<I", 99) + data[12:])
    with pytest.raises(FormatError):
        load_params(tmp_path / "version.bin")
    (tmp_path / "short.bin").write_bytes(data[:-16])
    with pytest.raises(FormatError):
        load_params(tmp_path / "short.bin")


def test_container_digest_mismatch(tmp_path, small_dataset):
    other = synth_generate(SynthSpec(30, 2, 3, (7, 4), seed=3))
    save_params(tmp_path / "m.bin", init_params(other.widths, 3, FAST), FAST)
    _, _, header = load_params(tmp_path / "m.bin")
    with pytest.raises(DigestMismatchError):
        check_compatible(header, small_dataset)
