import json
import logging

import numpy as np
import pytest

import oracles
from peqa import ConfigError, DivergenceError
from peqa.data import RegressionDataset, TextDataset, synthetic_text
from peqa.model import ArchSpec, build, evaluate
from peqa.qcore import QuantConfig
from peqa.trainer import TrainConfig, adamw_step, clip_grads, lr_at, optimizer_state_bytes, restore, train


def regression_data(seed=0, n=200):
    r = np.random.default_rng(seed)
    X = r.uniform(-2, 2, size=(n, 1))
    Y = np.sin(2 * X) + 0.05 * r.normal(size=X.shape)
    return RegressionDataset(X[:160], Y[:160], X[160:], Y[160:])


def mlp(seed=0):
    return build(ArchSpec(kind="mlp", dims=[1, 16, 1]), seed=seed)


def test_schedule_endpoints():
    assert lr_at(1, 1, 0.01) == 0.01
    assert lr_at(1, 100, 0.01) == 0.01
    assert lr_at(100, 100, 0.01) == pytest.approx(1e-4)
    steps = [lr_at(t, 50, 1.0) for t in range(1, 51)]
    assert steps == sorted(steps, reverse=True) and steps[-1] > 0


def test_adamw_single_step_moves_by_lr():
    cfg = TrainConfig(lr=0.1, eps=0.0)
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.array([3.0, -0.5])}, {}, 1, cfg, 1)
    np.testing.assert_allclose(p["w"], [0.9, -1.9], rtol=1e-15)


def test_adamw_matches_scalar_reference(rng):
    cfg = TrainConfig(lr=0.05, weight_decay=0.01)
    grads = rng.normal(size=(10, 4))
    p = {"w": rng.normal(size=4)}
    start = p["w"].copy()
    want = oracles.adamw(start, grads, lr=0.05, total=10, wd=0.01)
    state = {}
    for t in range(1, 11):
        adamw_step(p, {"w": grads[t - 1].copy()}, state, t, cfg, 10)
        np.testing.assert_allclose(p["w"], want[t - 1], rtol=0, atol=1e-12)


def test_adamw_on_a_quadratic_matches_scalar_reference(rng):
    a = rng.uniform(0.5, 3.0, size=5)
    start = rng.normal(size=5)
    cfg = TrainConfig(lr=0.1)
    want = oracles.adamw(start, lambda p: [ak * pk for ak, pk in zip(a, p)], lr=0.1, total=10)
    p, state = {"w": start.copy()}, {}
    for t in range(1, 11):
        adamw_step(p, {"w": a * p["w"]}, state, t, cfg, 10)
        np.testing.assert_allclose(p["w"], want[t - 1], rtol=0, atol=1e-12)
    assert np.all(np.abs(p["w"]) < np.abs(start))


def test_zero_gradient_leaves_parameters_and_decays_moments():
    cfg = TrainConfig(lr=0.1)
    p = {"w": np.array([0.5, -1.0])}
    adamw_step(p, {"w": np.zeros(2)}, {}, 1, cfg, 1)
    np.testing.assert_array_equal(p["w"], [0.5, -1.0])
    state = {"w": (np.array([0.2, -0.4]), np.array([0.3, 0.1]))}
    adamw_step(p, {"w": np.zeros(2)}, state, 2, cfg, 2)
    m, v = state["w"]
    np.testing.assert_allclose(m, [0.18, -0.36])
    np.testing.assert_allclose(v, [0.2997, 0.0999])


def test_adamw_rejects_non_finite_gradient():
    with pytest.raises(DivergenceError):
        adamw_step({"w": np.zeros(2)}, {"w": np.array([np.inf, 0.0])}, {}, 1, TrainConfig(), 1)


def test_clip_to_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grads(g, 1.0) == 5.0
    assert np.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    small = {"a": np.array([0.1])}
    clip_grads(small, 1.0)
    assert small["a"][0] == 0.1


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(mode="lora")
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1)
    with pytest.raises(ConfigError):
        train(mlp(), regression_data(), TrainConfig(mode="peqa"))


def test_zero_learning_rate_leaves_parameters_unchanged():
    net = mlp().quantize(QuantConfig(4))
    before = {k: v.copy() for k, v in net.parameters().items()}
    report = train(net, regression_data(), TrainConfig(mode="peqa", lr=0.0, epochs=2))
    assert report.steps == 2 * (160 // 16)
    for k, v in net.parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_rtn_takes_no_steps():
    net = mlp().quantize(QuantConfig(4), mode="rtn")
    report = train(net, regression_data(), TrainConfig(mode="rtn"))
    assert report.steps == 0 and report.learnable_count == 0
    assert np.isfinite(report.final_eval_loss)


@pytest.mark.parametrize("mode", ["full", "peqa", "qat"])
def test_training_lowers_held_out_loss(mode):
    ds = regression_data()
    net = mlp(1)
    if mode != "full":
        train(net, ds, TrainConfig(mode="full", epochs=30, lr=1e-2))
        net = net.quantize(QuantConfig(3), mode=mode)
    start = evaluate(net, ds.eval_batches())
    report = train(net, ds, TrainConfig(mode=mode, epochs=20, lr=3e-3))
    assert report.final_eval_loss < start


def test_peqa_trains_only_scales():
    net = mlp(2).quantize(QuantConfig(4))
    frozen = net.frozen_checksums()
    s0 = {k: l.s.copy() for k, l in net.linears.items()}
    report = train(net, regression_data(), TrainConfig(mode="peqa", epochs=3, lr=1e-2))
    assert net.frozen_checksums() == frozen
    assert any((net.linears[k].s != s0[k]).any() for k in s0)
    assert report.learnable_count == net.scale_count() == 17
    assert report.optimizer_state_bytes == 8 * 17 == optimizer_state_bytes(17)


def test_training_is_reproducible():
    runs = []
    for _ in range(2):
        net = mlp(3).quantize(QuantConfig(4))
        report = train(net, regression_data(), TrainConfig(mode="peqa", epochs=2, seed=7))
        runs.append((report.final_eval_loss, [l.s.tobytes() for l in net.linears.values()]))
    assert runs[0] == runs[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_checkpoint():
    net = mlp(4)
    before = {k: v.copy() for k, v in net.trainable_params().items()}
    with pytest.raises(DivergenceError) as info:
        train(net, regression_data(), TrainConfig(mode="full", lr=1e200, clip_norm=0.0))
    ckpt = info.value.checkpoint
    assert ckpt is not None
    restore(net, ckpt)
    for k, v in net.trainable_params().items():
        np.testing.assert_array_equal(v, before[k])


def test_tiny_scale_warning(caplog):
    net = mlp(5).quantize(QuantConfig(4))
    net.linears["fc0"].s[3, 0] = 1e-9
    with caplog.at_level(logging.WARNING, logger="peqa.trainer"):
        train(net, regression_data(), TrainConfig(mode="peqa", lr=0.0))
    assert any("scale magnitude" in r.message for r in caplog.records)


def test_report_csv_and_json(tmp_path, tiny_arch):
    text = synthetic_text(3000, seed=1)
    ds = TextDataset(text[:2600], text[2600:], tiny_arch.context)
    net = build(tiny_arch).quantize(QuantConfig(4, 16))
    report = train(net, ds, TrainConfig(mode="peqa", epochs=2, batch_size=8))
    csv_text = report.to_csv(tmp_path / "r.csv")
    lines = csv_text.splitlines()
    assert lines[0] == "epoch,train_loss,eval_loss,ppl,lr" and len(lines) == 3
    summary = json.loads(report.to_json(tmp_path / "r.json"))
    assert summary["final_eval_loss"] == report.final_eval_loss
    assert summary["learnable_count"] == net.scale_count()
    assert (tmp_path / "r.csv").read_text() == csv_text
