import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condflow import checkpoint as ckpt
from condflow.errors import InvalidArgumentError, NumericError
from condflow.mlp import (
    EmaState,
    MlpConfig,
    OptimState,
    VelocityModel,
    adam_step,
    batch_loss,
    ema_average,
    ema_update,
    forward,
    init_params,
    loss_and_grad,
    relu,
    swish,
    time_features,
    unflatten,
)


def _batch(g, cfg, B):
    return (g.normal(size=(B, cfg.dim_x)), g.normal(size=(B, cfg.dim_x)), g.normal(size=(B, cfg.dim_y)), g.random(B))


def fd_relative_error(cfg, params, batch, h=1e-5):
    _, grad = loss_and_grad(params, cfg, *batch)
    fd = np.empty_like(params)
    for k in range(params.size):
        p = params.copy()
        p[k] += h
        lp = batch_loss(p, cfg, *batch)
        p[k] -= 2 * h
        lm = batch_loss(p, cfg, *batch)
        fd[k] = (lp - lm) / (2 * h)
    return np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-300)


def random_small_config(g):
    return MlpConfig(
        int(g.integers(1, 4)), int(g.integers(1, 3)), int(g.integers(2, 9)), int(g.integers(1, 4)),
        ("relu", "swish")[int(g.integers(0, 2))],
    )


def test_gradient_matches_finite_differences():
    g = np.random.default_rng(11)
    for _ in range(20):
        cfg = random_small_config(g)
        # random biases keep ReLU pre-activations off the kink at exactly zero
        params = g.normal(scale=0.7, size=cfg.n_params)
        assert fd_relative_error(cfg, params, _batch(g, cfg, int(g.integers(1, 12)))) <= 1e-4


def test_layout_and_sizes():
    cfg = MlpConfig(2, 1, 32, 3, "relu")
    assert cfg.input_dim == 7
    assert cfg.n_params == 7 * 32 + 32 + 2 * (32 * 32 + 32) + 32 * 2 + 2
    layers = unflatten(np.arange(cfg.n_params, dtype=float), cfg)
    assert [W.shape for W, _ in layers] == [(7, 32), (32, 32), (32, 32), (32, 2)]
    with pytest.raises(InvalidArgumentError):
        unflatten(np.zeros(5), cfg)
    with pytest.raises(InvalidArgumentError):
        MlpConfig(1, 1, activation="tanh")


def test_time_features():
    assert np.allclose(time_features(0.0), [-0.5, 1.0, 0.0, -1.0])
    assert np.allclose(time_features(0.25), [-0.25, 0.0, 1.0, 1.0])
    assert time_features(np.zeros(3)).shape == (3, 4)


def test_activations_on_grid():
    a = np.linspace(-6, 6, 121)
    assert np.array_equal(relu(a), np.maximum(a, 0))
    assert np.allclose(swish(a), a / (1 + np.exp(-a)), rtol=1e-14, atol=1e-15)


def test_init_is_seeded_kaiming():
    cfg = MlpConfig(1, 1, 16, 2)
    p1 = init_params(cfg, np.random.default_rng(0))
    p2 = init_params(cfg, np.random.default_rng(0))
    assert np.array_equal(p1, p2)
    for W, b in unflatten(p1, cfg):
        assert np.all(b == 0)
        assert np.abs(W).max() <= np.sqrt(6 / W.shape[0])


def test_forward_broadcasting(rng):
    cfg = MlpConfig(2, 1, 8, 2, "swish")
    p = init_params(cfg, rng)
    xi = rng.normal(size=(5, 2))
    out = forward(p, cfg, xi, [0.3], 0.4)
    assert out.shape == (5, 2)
    for k in range(5):
        assert np.allclose(forward(p, cfg, xi[k], [0.3], 0.4), out[k])
    with pytest.raises(InvalidArgumentError):
        forward(p, cfg, xi, np.zeros((3, 1)), 0.4)


def test_loss_permutation_invariance(rng):
    cfg = MlpConfig(2, 1, 8, 2, "relu")
    p = init_params(cfg, rng)
    z, x, y, t = _batch(rng, cfg, 32)
    perm = rng.permutation(32)
    assert abs(batch_loss(p, cfg, z, x, y, t) - batch_loss(p, cfg, z[perm], x[perm], y[perm], t[perm])) < 1e-12


def test_loss_is_zero_iff_exact(rng):
    cfg = MlpConfig(1, 1, 4, 1, "relu")
    p = np.zeros(cfg.n_params)
    z = rng.normal(size=(6, 1))
    # zero network predicts zero velocity, exact when x == z
    assert loss_and_grad(p, cfg, z, z.copy(), np.zeros((6, 1)), rng.random(6))[0] == 0.0
    assert loss_and_grad(p, cfg, z, z + 1, np.zeros((6, 1)), rng.random(6))[0] > 0.0


def test_non_finite_batch_rejected(rng):
    cfg = MlpConfig(1, 1, 4, 1)
    p = init_params(cfg, rng)
    z, x, y, t = _batch(rng, cfg, 4)
    x[0, 0] = np.nan
    with pytest.raises(NumericError):
        loss_and_grad(p, cfg, z, x, y, t)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_nonnegative(seed):
    g = np.random.default_rng(seed)
    cfg = random_small_config(g)
    assert loss_and_grad(init_params(cfg, g), cfg, *_batch(g, cfg, 5))[0] >= 0.0


def test_adam_first_step_moves_by_lr():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    new, opt = adam_step(p, OptimState.zeros(3, lr=0.01), g)
    # bias correction makes the first step lr * sign(g) up to eps
    assert np.allclose(new, p - 0.01 * np.sign(g), atol=1e-7)
    assert opt.step == 1
    with pytest.raises(NumericError):
        adam_step(p, opt, np.array([np.inf, 0, 0]))
    with pytest.raises(InvalidArgumentError):
        adam_step(p, opt, np.zeros(2))


def test_ema_examples():
    e = ema_update(EmaState(np.zeros(2), 0.9), np.ones(2))
    assert np.allclose(e.shadow, 0.1)
    e = EmaState(np.zeros(1), 0.5)
    for _ in range(60):
        e = ema_update(e, np.ones(1))
    assert abs(e.shadow[0] - 1) < 1e-15
    same = ema_update(EmaState(np.full(3, 2.5), 0.9999), np.full(3, 2.5))
    assert np.array_equal(same.shadow, np.full(3, 2.5))
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(InvalidArgumentError):
            EmaState(np.zeros(1), bad)


def test_ema_average_removes_startup_bias(rng):
    # constant iterates: the corrected average is the iterate after any number of updates
    e = EmaState(np.zeros(3), 0.9999)
    p = rng.normal(size=3)
    for n in range(1, 6):
        e = ema_update(e, p)
        assert np.allclose(ema_average(e, n), p, rtol=1e-12)
    # general iterates: a normalized geometric weighting of the updates seen so far
    e = EmaState(np.zeros(2), 0.8)
    seq = rng.normal(size=(7, 2))
    for q in seq:
        e = ema_update(e, q)
    w = 0.8 ** np.arange(6, -1, -1)
    assert np.allclose(ema_average(e, 7), w @ seq / w.sum(), rtol=1e-12)
    with pytest.raises(InvalidArgumentError):
        ema_average(e, 0)


def test_velocity_model_field(rng):
    cfg = MlpConfig(2, 1, 8, 2)
    m = VelocityModel(cfg, init_params(cfg, rng))
    x = rng.normal(size=(4, 2))
    t = rng.random(4)
    v = m.field([0.2])(x, t)
    for k in range(4):
        assert np.allclose(v[k], m(x[k], [0.2], t[k]))


def test_checkpoint_round_trip_bit_exact(rng, tmp_path):
    cfg = MlpConfig(3, 2, 8, 2, "swish")
    p = init_params(cfg, rng)
    opt = OptimState(rng.normal(size=p.size), rng.random(p.size), 17, 3e-4)
    ema = EmaState(rng.normal(size=p.size), 0.99)
    g = np.random.default_rng(5)
    g.random(3)
    path = tmp_path / "c.cfm"
    ckpt.save(path, cfg, p, opt, ema, 1234, g.bit_generator.state, {"source": "gaussian"})
    c = ckpt.load(path)
    assert c["mlp"] == cfg and c["iteration"] == 1234 and c["meta"] == {"source": "gaussian"}
    assert c["params"].tobytes() == p.tobytes()
    assert c["opt"].m.tobytes() == opt.m.tobytes() and c["opt"].v.tobytes() == opt.v.tobytes()
    assert c["opt"].step == 17 and c["opt"].lr == 3e-4
    assert c["ema"].shadow.tobytes() == ema.shadow.tobytes() and c["ema"].decay == 0.99
    h = np.random.default_rng()
    h.bit_generator.state = c["rng_state"]
    assert np.array_equal(h.random(4), g.random(4))
    assert ckpt.dumps(cfg, c["params"], c["opt"], c["ema"], 1234, c["rng_state"], c["meta"]) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(InvalidArgumentError):
        ckpt.loads(b"not a checkpoint at all")
