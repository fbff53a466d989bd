import json
import math

import numpy as np
import pytest

from sparc.predictor import (
    AdamState,
    FeatureNorm,
    Layer,
    MlpModel,
    ModelFormatError,
    TrainConfig,
    adam_step,
    build_features,
    episode_features,
    fit,
    forward,
    init_model,
    load_model,
    loss_and_grad,
    save_model,
    train,
    window_features,
)
from sparc.sim import PedestrianState, VehicleState, WorldState, constant_speed_episode


def numeric_grad(m, x, y, h=1e-5):
    out = []
    params = m.params()
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            def loss_at(v):
                q = [a.copy() for a in params]
                q[k][idx] = v
                return loss_and_grad(m.with_params(q), x, y)[0]

            g[idx] = (loss_at(p[idx] + h) - loss_at(p[idx] - h)) / (2 * h)
        out.append(g)
    return out


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n)))))
    return worst


def small_model(g, dims):
    layers = [Layer(g.normal(size=(i, o)), g.normal(size=o)) for i, o in zip(dims[:-1], dims[1:])]
    return MlpModel(layers, feature_window=1)


# -- features ----------------------------------------------------------------

def worlds(n):
    return [WorldState(VehicleState(float(i), 2.0), PedestrianState(40.0 + i, 3.0 * i)) for i in range(n)]


def test_features_padding():
    f = build_features(worlds(1), 5, FeatureNorm.identity())
    assert f.shape == (20,)
    assert np.all(f[:16] == 0.0)
    assert f[16:].tolist() == [0.0, 2.0, 40.0, 0.0]


def test_features_full_window_oldest_first():
    f = build_features(worlds(7), 3, FeatureNorm.identity())
    assert f.reshape(3, 4)[:, 0].tolist() == [4.0, 5.0, 6.0]


def test_features_normalisation_identity():
    norm = FeatureNorm(np.array([0.0, 2.0, 40.0, 0.0]), np.ones(4))
    f = build_features(worlds(1), 1, norm)
    assert f.tolist() == [0.0, 0.0, 0.0, 0.0]


def test_features_empty_history():
    with pytest.raises(ValueError):
        build_features([], 5, FeatureNorm.identity())


def test_window_features_match_build_features(cfg, params):
    ep = constant_speed_episode(cfg, params, 0, 0)
    norm = FeatureNorm(np.array([1.0, 2.0, 3.0, 4.0]), np.array([2.0, 3.0, 4.0, 5.0]))
    rows = episode_features(ep, 5, norm)
    hist = [
        WorldState(VehicleState(ep.veh_par[i], ep.veh_speed[i]), PedestrianState(ep.ped_par[i], ep.ped_perp[i]))
        for i in range(len(ep))
    ]
    for i in (0, 3, 4, 50):
        assert np.array_equal(rows[i], build_features(hist[: i + 1], 5, norm))
    assert window_features(ep.states(), 5, norm).shape == (len(ep), 20)


def test_feature_norm_rejects_zero_std():
    with pytest.raises(ValueError):
        FeatureNorm(np.zeros(4), np.array([1.0, 0.0, 1.0, 1.0]))


# -- forward -----------------------------------------------------------------

def test_forward_zero_model():
    m = MlpModel([Layer(np.zeros((4, 3)), np.zeros(3)), Layer(np.zeros((3, 2)), np.zeros(2))], 1)
    assert forward(m, np.ones(4)).tolist() == [0.0, 0.0]


def test_forward_hand_computed():
    # one path: x0 -> hidden0 (weight 2, bias -1) -> relu -> out0 (weight 3, bias 0.5)
    w1 = np.zeros((4, 2)); w1[0, 0] = 2.0
    b1 = np.array([-1.0, -1.0])
    w2 = np.zeros((2, 2)); w2[0, 0] = 3.0
    b2 = np.array([0.5, 0.0])
    m = MlpModel([Layer(w1, b1), Layer(w2, b2)], 1)
    assert forward(m, [2.0, 9, 9, 9]).tolist() == [0.5 + 3 * 3.0, 0.0]
    assert forward(m, [0.2, 9, 9, 9]).tolist() == [0.5, 0.0]  # clipped by the rectifier


def test_forward_dimension_mismatch():
    m = init_model(20, 8)
    with pytest.raises(ValueError):
        forward(m, np.zeros(19))


def test_init_architecture():
    m = init_model(20)
    assert [(l.in_dim, l.out_dim) for l in m.layers] == [(20, 64), (64, 64), (64, 2)]
    assert all(np.all(l.b == 0) for l in m.layers)
    lim = math.sqrt(6 / (20 + 64))
    assert np.all(np.abs(m.layers[0].w) <= lim)


# -- loss and gradients --------------------------------------------------------

def test_loss_zero_at_fit():
    g = np.random.default_rng(0)
    m = small_model(g, [4, 5, 5, 2])
    x = g.normal(size=(6, 4))
    loss, grads = loss_and_grad(m, x, forward(m, x))
    assert loss == 0.0
    assert all(np.all(gr == 0) for gr in grads)


def test_loss_duplicate_batch_invariant():
    g = np.random.default_rng(1)
    m = small_model(g, [4, 5, 5, 2])
    x, y = g.normal(size=(6, 4)), g.normal(size=(6, 2))
    l1, g1 = loss_and_grad(m, x, y)
    l2, g2 = loss_and_grad(m, np.vstack([x, x]), np.vstack([y, y]))
    assert l1 == pytest.approx(l2, rel=1e-14)
    assert all(np.allclose(a, b, rtol=1e-12, atol=1e-15) for a, b in zip(g1, g2))


def test_loss_value():
    m = MlpModel([Layer(np.zeros((4, 2)), np.zeros(2))], 1)
    loss, _ = loss_and_grad(m, np.zeros((2, 4)), np.array([[1.0, 2.0], [0.0, 2.0]]))
    assert loss == pytest.approx((0.5 * 5 + 0.5 * 4) / 2)


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_central_differences(seed):
    g = np.random.default_rng(seed)
    dims = [int(g.integers(1, 9)), int(g.integers(1, 9)), int(g.integers(1, 9)), 2]
    m = small_model(g, dims)
    x, y = g.normal(size=(int(g.integers(1, 6)), dims[0])), g.normal(size=(1, 2))
    y = np.repeat(y, len(x), axis=0) + g.normal(size=(len(x), 2))
    _, analytic = loss_and_grad(m, x, y)
    assert max_rel_err(analytic, numeric_grad(m, x, y)) < 1e-4


# -- Adam --------------------------------------------------------------------

def test_adam_zero_grad_no_change():
    m = init_model(4, 3)
    st = AdamState.zeros_like(m.params())
    m2, _ = adam_step(m, [np.zeros_like(p) for p in m.params()], st, 1, 1e-3)
    assert all(np.array_equal(a, b) for a, b in zip(m.params(), m2.params()))


def test_adam_first_step():
    m = MlpModel([Layer(np.array([[0.0]]), np.array([0.0]))], 1)
    grads = [np.array([[1.0]]), np.array([-2.0])]
    m2, st = adam_step(m, grads, AdamState.zeros_like(m.params()), 1, 1e-3)
    # bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps)
    assert m2.layers[0].w[0, 0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    assert m2.layers[0].b[0] == pytest.approx(1e-3 * 2 / (2 + 1e-8), rel=1e-12)
    assert st.m[0][0, 0] == pytest.approx(0.1) and st.v[1][0] == pytest.approx(0.004)


# -- training ----------------------------------------------------------------

def test_lr_schedule():
    cfg = TrainConfig()
    assert [cfg.lr_at(e) for e in (0, 9, 10, 19, 20, 49)] == [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 6.25e-5]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_factor=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)


def test_fit_constant_target():
    g = np.random.default_rng(2)
    x = g.normal(size=(4000, 4))
    y = np.tile([0.7, -1.3], (4000, 1))
    m, trace = fit(x, y, TrainConfig(epochs=30, hidden=16, batch_size=32))
    assert np.mean((forward(m, x) - y) ** 2) < 1e-3
    assert trace[-1] < trace[0]


def test_fit_linear_reaches_noise_floor():
    g = np.random.default_rng(5)
    A = g.normal(size=(4, 2))
    sigma = 0.3
    x = g.normal(size=(12_000, 4))
    y = x @ A + sigma * g.normal(size=(12_000, 2))
    m, _ = fit(x[:10_000], y[:10_000], TrainConfig(epochs=30, hidden=32, learning_rate=3e-3))
    mse = np.mean(np.sum((forward(m, x[10_000:]) - y[10_000:]) ** 2, axis=1))
    assert mse <= 1.1 * 2 * sigma**2


def test_fit_zero_epochs_returns_init():
    g = np.random.default_rng(0)
    x, y = g.normal(size=(10, 4)), g.normal(size=(10, 2))
    m0 = init_model(4, 8, 2, seed=3)
    m, trace = fit(x, y, TrainConfig(epochs=0, hidden=8, seed=3))
    assert trace == []
    assert all(np.array_equal(a, b) for a, b in zip(m.params(), m0.params()))


def test_fit_deterministic():
    g = np.random.default_rng(0)
    x, y = g.normal(size=(500, 4)), g.normal(size=(500, 2))
    cfg = TrainConfig(epochs=3, hidden=8, batch_size=32)
    a, ta = fit(x, y, cfg)
    b, tb = fit(x, y, cfg)
    assert ta == tb
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_non_finite_aborts():
    x = np.ones((4, 4))
    y = np.full((4, 2), np.inf)
    with pytest.raises(FloatingPointError, match="epoch 0"):
        fit(x, y, TrainConfig(epochs=1, hidden=4))


def test_train_on_episodes(cfg, params):
    eps = [constant_speed_episode(cfg, params, 0, i) for i in range(20)]
    m, trace = train(eps, TrainConfig(epochs=2, hidden=8), feature_window=3)
    assert m.input_dim == 12 and m.feature_window == 3
    assert len(trace) == 2


# -- persistence -------------------------------------------------------------

def test_save_load_bit_exact(tmp_path):
    g = np.random.default_rng(9)
    m = init_model(20, 64, seed=4, feature_norm=FeatureNorm(g.normal(size=4), g.uniform(0.5, 2, 4)))
    m = m.with_params([p + g.normal(scale=1e-3, size=p.shape) for p in m.params()])
    save_model(m, tmp_path / "m.json")
    m2 = load_model(tmp_path / "m.json")
    probe = g.normal(size=(5, 20))
    assert np.array_equal(forward(m, probe), forward(m2, probe))
    assert np.array_equal(m.feature_norm.std, m2.feature_norm.std)


def test_load_names_bad_layer(tmp_path):
    m = init_model(20, 8)
    save_model(m, tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["layers"][1]["in"] = 7
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError, match="layer 1"):
        load_model(tmp_path / "bad.json")


def test_load_requires_feature_norm(tmp_path):
    save_model(init_model(20, 8), tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    del doc["feature_norm"]
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError, match="feature_norm"):
        load_model(tmp_path / "bad.json")


def test_load_rejects_garbage(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "bad.json")
