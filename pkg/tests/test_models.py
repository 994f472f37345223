import dataclasses

import numpy as np
import pandas as pd
import pytest

from cmpm import models
from cmpm.models import (GridSpec, MlpModel, Standardizer, TrainConfig, TrainingDiverged, grid_search, mlp_forward,
                         mlp_gradients, mlp_init, mlp_train, mse, ols_fit, ols_predict, oversample)


def test_standardizer_closed_form():
    s = Standardizer.fit([1.0, 2.0, 3.0])
    assert s.mean[0] == 2.0 and s.scale[0] == pytest.approx(np.sqrt(2 / 3))
    np.testing.assert_allclose(s.apply(np.array([1.0, 2.0, 3.0])), [-1.224744871391589, 0, 1.224744871391589])


def test_standardizer_round_trip():
    x = np.random.default_rng(0).normal(5, 3, (1000, 2))
    s = Standardizer.fit(x)
    assert np.abs(s.invert(s.apply(x)) - x).max() < 1e-10


def test_standardizer_excludes_constant_column():
    x = np.column_stack([np.arange(5.0), np.full(5, 7.0)])
    s = Standardizer.fit(x)
    assert s.excluded == [1] and s.apply(x).shape == (5, 1)


def test_grouped_standardizers():
    out = models.fit_grouped([1.0, 2.0, 3.0, 10.0, 30.0], ["a", "a", "a", "b", "b"])
    assert out["a"].mean[0] == 2.0 and out["b"].mean[0] == 20.0


def test_ols_exact_line():
    x = np.arange(10.0)[:, None]
    m = ols_fit(x, 2 * x[:, 0] + 1)
    assert abs(m.weights[0] - 2) < 1e-8 and abs(m.intercept - 1) < 1e-8


def test_ols_recovers_random_weights_and_is_orthogonal():
    rng = np.random.default_rng(42)
    x = rng.normal(size=(100, 7))
    w = rng.normal(size=7)
    y = x @ w
    m = ols_fit(x, y)
    assert np.abs(m.weights - w).max() < 1e-8 and abs(m.intercept) < 1e-8
    noisy = y + rng.normal(size=100)
    m = ols_fit(x, noisy)
    r = noisy - ols_predict(m, x)
    design = np.column_stack([x, np.ones(100)])
    assert np.abs(design.T @ r).max() < 1e-6 * np.linalg.norm(noisy)


def test_ols_local_optimality():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(80, 4))
    y = x @ [1, -2, 0.5, 3] + rng.normal(size=80)
    m = ols_fit(x, y)
    base = np.mean((ols_predict(m, x) - y) ** 2)
    for j in range(4):
        for d in (-1e-3, 1e-3):
            w = m.weights.copy()
            w[j] += d
            assert np.mean((x @ w + m.intercept - y) ** 2) >= base


def test_ols_duplicated_column_stays_finite():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(30, 2))
    x = np.column_stack([x, x[:, 0]])
    y = x[:, 0] * 2 + x[:, 1]
    m = ols_fit(x, y)
    assert np.isfinite(m.weights).all()
    assert np.abs(ols_predict(m, x) - y).max() < 1e-6


def test_zero_weight_model_outputs_bias():
    m = mlp_init((3, 4, 1))
    m.weights = [np.zeros_like(w) for w in m.weights]
    m.biases[-1][:] = 0.7
    np.testing.assert_array_equal(mlp_forward(m, np.random.default_rng(0).normal(size=(5, 3))), np.full(5, 0.7))


def _numeric_grad(model, x, y, h=1e-5):
    out = []
    for arr in model.weights + model.biases:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = mse(model, x, y)
            arr[idx] = orig - h
            down = mse(model, x, y)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_gradient_error(seed):
    rng = np.random.default_rng(seed)
    m = mlp_init((5, 8, 4, 1), seed)
    for b in m.biases:
        b += rng.normal(0, 0.1, b.shape)
    x, y = rng.normal(size=(20, 5)), rng.normal(size=20)
    _, gw, gb = mlp_gradients(m, x, y)
    worst = 0.0
    for a, n in zip(gw + gb, _numeric_grad(m, x, y)):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def test_gradient_check():
    assert max(max_gradient_error(s) for s in range(20)) < 1e-4


def test_single_neuron_fits_relu():
    x = np.linspace(-1, 1, 101)[:, None]
    y = np.maximum(0, x[:, 0])
    m = mlp_init((1, 1, 1), seed=0)
    m.weights = [np.array([[0.5]]), np.array([[0.5]])]
    trained = mlp_train(m, x, y, TrainConfig(lr=0.01, epochs=400, batch_size=16, optimizer="adam"))
    assert mse(trained, x, y) < 1e-3


def test_training_is_deterministic_and_pure():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(200, 4)), rng.normal(size=200)
    init = mlp_init((4, 6, 1), 3)
    before = [w.copy() for w in init.weights]
    cfg = TrainConfig(epochs=5, seed=9, optimizer="adam")
    a, b = mlp_train(init, x, y, cfg), mlp_train(init, x, y, cfg)
    for p, q in zip(a.weights + a.biases, b.weights + b.biases):
        assert p.tobytes() == q.tobytes()
    assert all((w == v).all() for w, v in zip(init.weights, before))


def test_early_stopping_restores_best_weights():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(64, 3)), rng.normal(size=64)
    xv, yv = rng.normal(size=(32, 3)), rng.normal(size=32)
    m = mlp_train(mlp_init((3, 20, 1), 0), x, y, TrainConfig(lr=0.05, epochs=100, patience=3), xv, yv)
    best = min(v for _, _, v in m.log)
    assert mse(m, xv, yv) == pytest.approx(best)
    assert len(m.log) < 100


def test_train_config_rejects_bad_values():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def _linear_task(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(300, 3))
    y = x @ [0.5, -1.0, 0.3] + 0.05 * rng.normal(size=300)
    return x[:240], y[:240], x[240:], y[240:]


def test_grid_of_one_cell():
    x, y, xv, yv = _linear_task()
    res = grid_search(GridSpec(hidden=((5,),), schedules=("fixed",)), x, y, xv, yv, TrainConfig(epochs=5))
    assert res.hidden == (5,) and res.config.schedule == "fixed"


def test_grid_skips_poisoned_cell(caplog):
    x, y, xv, yv = _linear_task()

    def init(dims, seed):
        m = mlp_init(dims, seed)
        if dims[1] == 30:
            m.weights[0][:] = np.nan
        return m

    with caplog.at_level("WARNING"):
        res = grid_search(GridSpec(hidden=((30,), (50,)), schedules=("fixed",)), x, y, xv, yv,
                          TrainConfig(epochs=5), init=init)
    assert res.hidden == (50,)
    assert "failed" in caplog.text
    assert res.table[0]["val_mse"] is None


def test_full_grid_selects_minimum():
    x, y, xv, yv = _linear_task(1)
    res = grid_search(GridSpec(), x, y, xv, yv, TrainConfig(epochs=15, patience=5))
    scores = [r["val_mse"] for r in res.table]
    assert len(scores) == 8 and res.val_mse == min(scores)


def test_oversample_examples():
    frame = pd.DataFrame({"active_ues": [1, 2, 11, 12, 30] * 2 + [0] * 10, "v": range(20)})
    assert oversample(frame, factor=1) is frame
    assert oversample(frame, threshold=100, factor=5) is frame
    # 6 matching rows among 20 here; a 10-row variant checks the arithmetic example
    ten = pd.DataFrame({"active_ues": [15] * 10 + [1] * 5})
    out = oversample(ten, factor=5)
    assert (out.active_ues > 10).sum() == 50 and (out.active_ues <= 10).sum() == 5


def test_artifact_round_trip(tmp_path):
    m = mlp_train(mlp_init((3, 4, 1), 0), np.ones((8, 3)), np.ones(8), TrainConfig(epochs=2))
    path = models.save_mlp(m, tmp_path / "m.npz", {"train_config": dataclasses.asdict(TrainConfig())})
    back, meta = models.load_mlp(path)
    for p, q in zip(m.weights + m.biases, back.weights + back.biases):
        assert p.tobytes() == q.tobytes()
    assert back.log == m.log and meta["train_config"]["lr"] == 0.001
    again = models.save_mlp(back, tmp_path / "n.npz", meta={k: v for k, v in meta.items() if k not in
                                                            ("version", "dims", "log")})
    assert again.read_bytes() == path.read_bytes()


def test_cmpm_regressor_learns_multiplicative_law(tmp_path):
    rng = np.random.default_rng(0)
    n = 3000
    frame = pd.DataFrame({"bler": rng.uniform(0, 0.2, n), "cqi": rng.integers(3, 15, n).astype(float),
                          "prb_util": rng.uniform(0.05, 0.95, n), "active_ues": rng.poisson(4, n).astype(float),
                          "F1": rng.integers(0, 2, n).astype(float)})
    frame["dl_throughput"] = 50 * (frame.cqi / 15) ** 1.2 * (1 - frame.bler) * frame.prb_util * (1 + 0.1 * frame.F1)
    frame["data_volume"] = frame.dl_throughput * 450
    manifest = [{"name": "F1", "source": "F1", "encoding": "flag"}]
    env = ["bler", "cqi", "data_volume", "prb_util", "active_ues"]
    cfg = TrainConfig(optimizer="adam", lr=2e-3, batch_size=128, epochs=30, patience=5, weight_decay=1.0)
    reg = models.CmpmRegressor((32, 16), cfg).fit(frame, manifest, env, "dl_throughput")
    rel = np.abs(reg.predict(frame) / frame.dl_throughput - 1)
    assert np.median(rel) < 0.05
    reg.save(tmp_path / "c.npz")
    back = models.CmpmRegressor.load(tmp_path / "c.npz")
    np.testing.assert_array_equal(back.predict(frame), reg.predict(frame))
