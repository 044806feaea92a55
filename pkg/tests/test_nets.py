from math import erf

import numpy as np
import pytest
from fdcheck import check_network, conv_valid, finite_differences, rel_error

from mmqrl.nets import (
    CONCAT_WIDTH,
    LOG_STD_INIT,
    LOG_STD_MIN,
    ActorCritic,
    CheckpointError,
    ConvNet,
    MlpNet,
    ShapeError,
    arch_for_env,
    gaussian_log_prob,
    load_checkpoint,
    save_checkpoint,
)


def mlp_count(i, hidden, o):
    dims = (i, *hidden, o)
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def conv_count(o):
    return (4 * 4 * 2 * 16 + 16) + (3 * 3 * 16 * 32 + 32) + (11 * 11 * 32 * 128 + 128) + mlp_count(145, (256, 128), o)


def test_parameter_counts():
    assert MlpNet(12).n_params == mlp_count(17, (32, 32), 12) == 2028
    assert MlpNet(1).n_params == mlp_count(17, (32, 32), 1)
    assert ConvNet(12).n_params == conv_count(12) == 572_732
    assert ConvNet(1).n_params == conv_count(1) == 571_313
    ac = ActorCritic("conv")
    assert ac.n_params == 572_732 + 12 + 571_313


def test_intermediate_shapes(rng):
    net = ConvNet(12)
    params = net.init(rng, 0.01, np.float64)
    out, cache = net.forward(params, rng.random((3, net.obs_dim)), keep=True)
    cols1, z1, cols2, z2, a2, z3, joined, pre = cache
    assert z1.shape == (3, 13, 13, 16)
    assert z2.shape == (3, 11, 11, 32)
    assert z3.shape == (3, 128)
    assert joined.shape == (3, 145) and CONCAT_WIDTH == 145
    assert out.shape == (3, 12)


def test_zero_params_zero_output(rng):
    for net in (MlpNet(12), ConvNet(12)):
        out = net.forward(np.zeros(net.n_params), rng.normal(size=(4, net.obs_dim)))
        np.testing.assert_array_equal(out, 0.0)


def test_mlp_hand_computed_toy():
    net = MlpNet(1)
    p = net.unflatten(np.zeros(net.n_params))
    # one path: x0 -> h0 -> g0 -> out and a second through h1 that the rectifier cuts
    p["w0"][0, 0], p["b0"][0] = 2.0, -1.0
    p["w0"][1, 1] = 1.0
    p["w1"][0, 0], p["b1"][0] = 3.0, 0.5
    p["w1"][1, 0] = -1.0
    p["w2"][0, 0], p["b2"][0] = -2.0, 0.25
    params = net.flatten(p)
    for x0, x1 in [(1.0, 0.0), (0.2, 0.0), (1.5, 4.0), (2.0, -3.0)]:
        obs = np.zeros(17)
        obs[0], obs[1] = x0, x1
        h0, h1 = max(2 * x0 - 1, 0), max(x1, 0)
        g0 = max(3 * h0 + 0.5 - h1, 0)
        assert net.forward(params, obs)[0, 0] == pytest.approx(-2 * g0 + 0.25, abs=1e-15)


def test_conv_matches_loop_oracle(rng):
    net = ConvNet(12)
    params = net.init(rng, 0.01, np.float64)
    p = net.unflatten(params)
    p["bc1"][:] = rng.normal(size=16)
    obs = np.zeros(net.obs_dim)
    obs[17 + (5 * 16 + 9) * 2 + 1] = 1.0  # one-hot: row 5, column 9, channel 1
    _, cache = net.forward(params, obs, keep=True)
    m = obs[17:].reshape(16, 16, 2)
    naive = np.zeros((13, 13, 16))
    for i in range(13):
        for j in range(13):
            for f in range(16):
                s = p["bc1"][f]
                for a in range(4):
                    for b in range(4):
                        for c in range(2):
                            s += m[i + a, j + b, c] * p["wc1"][a, b, c, f]
                naive[i, j, f] = s
    np.testing.assert_allclose(cache[1][0], naive, atol=1e-14)
    np.testing.assert_allclose(cache[1][0], conv_valid(m, p["wc1"], p["bc1"]), atol=1e-14)


def test_batch_rows_independent(rng):
    for net in (MlpNet(12), ConvNet(12)):
        params = net.init(rng, 1.0, np.float64)
        obs = rng.random((5, net.obs_dim))
        full = net.forward(params, obs)
        for k in range(5):
            np.testing.assert_allclose(net.forward(params, obs[k]), full[k:k + 1], rtol=1e-12, atol=1e-14)


def test_shape_errors(rng):
    net = MlpNet(12)
    with pytest.raises(ShapeError):
        net.forward(np.zeros(net.n_params), np.zeros(16))
    with pytest.raises(ShapeError):
        net.forward(np.zeros(5), np.zeros(17))


def test_flatten_round_trip(rng):
    net = ConvNet(12)
    flat = rng.normal(size=net.n_params)
    np.testing.assert_array_equal(net.flatten(net.unflatten(flat)), flat)


# -- gradients ---------------------------------------------------------------------------

def test_zero_upstream_gradient(rng):
    for net in (MlpNet(12), ConvNet(12)):
        params = net.init(rng, 1.0, np.float64)
        _, cache = net.forward(params, rng.random((3, net.obs_dim)), keep=True)
        np.testing.assert_array_equal(net.backward(params, cache, np.zeros((3, 12))), 0.0)


def test_mlp_finite_differences(rng):
    for _ in range(5):
        err, n, _, _, _ = check_network(MlpNet(12), rng)
        assert n == 2028 and err < 1e-4


def test_conv_finite_differences_one_setting(rng):
    err, n, _, _, _ = check_network(ConvNet(1), rng)
    assert n == 571_313 and err < 1e-4


def test_input_gradient(rng):
    # not needed for training, but it checks the conv transposes end to end
    for net in (MlpNet(3), ConvNet(3)):
        params = net.init(rng, 1.0, np.float64)
        obs = rng.random(net.obs_dim)
        gout = rng.normal(size=(1, 3))
        _, cache = net.forward(params, obs, keep=True)
        _, gx = net.backward(params, cache, gout, input_grad=True)
        h = 1e-6
        for k in rng.choice(net.obs_dim, size=min(20, net.obs_dim), replace=False):
            e = np.zeros(net.obs_dim)
            e[k] = h
            fd = ((net.forward(params, obs + e) - net.forward(params, obs - e)) * gout).sum() / (2 * h)
            assert rel_error(fd, gx[0, k], 1e-6) < 1e-4


def test_fd_harness_detects_wrong_gradient(rng):
    net = MlpNet(2)
    params = rng.normal(size=net.n_params) / 4
    obs, gout = rng.normal(size=17), rng.normal(size=2)
    fd, _, _ = finite_differences(net, params, obs, gout)
    _, cache = net.forward(params, obs, keep=True)
    an = net.backward(params, cache, gout[None])
    an[100] += 1e-3
    assert rel_error(fd, an).max() > 1e-4


def test_value_gradient_ignores_policy_params(rng):
    ac = ActorCritic("mlp")
    params = ac.init(0, np.float64)
    obs = rng.normal(size=(4, 17))
    v0 = ac.value(params, obs)
    moved = params.copy()
    moved[:ac.n_policy] += rng.normal(size=ac.n_policy)
    np.testing.assert_array_equal(ac.value(moved, obs), v0)


# -- policy ------------------------------------------------------------------------------

def test_init_layout():
    ac = ActorCritic("mlp")
    params = ac.init(7)
    assert params.dtype == np.float32 and len(params) == ac.n_params
    np.testing.assert_array_equal(ac.log_std(params), LOG_STD_INIT)
    np.testing.assert_array_equal(params, ac.init(7))
    # orthogonal hidden layers: columns orthonormal up to the gain
    w = ac.policy_net.unflatten(ac.split(params)[0])["w1"].astype(float)
    np.testing.assert_allclose(w.T @ w, 2.0 * np.eye(32), atol=1e-5)
    assert arch_for_env("plane") == "mlp" and arch_for_env("obstacles") == "conv"


def test_log_prob_at_mean():
    mean = np.arange(12.0)
    assert gaussian_log_prob(mean, mean, np.zeros(12)) == pytest.approx(-6.0 * np.log(2 * np.pi), rel=1e-15)
    x = mean + 0.3
    ls = np.full(12, -0.7)
    expected = sum(-0.5 * ((0.3 / np.exp(-0.7)) ** 2) + 0.7 - 0.5 * np.log(2 * np.pi) for _ in range(12))
    assert gaussian_log_prob(x, mean, ls) == pytest.approx(expected, rel=1e-12)


def _with_log_std(ac, params, value):
    params = params.copy()
    params[ac.policy_net.n_params:ac.n_policy] = value
    return params


def test_tiny_std_samples_near_mean(rng):
    # sigma = exp(-5) ~ 0.0067, so |a - mean| < 0.01 is a 1.48-sigma band: the
    # per-dimension probability is erf(0.01 / (sigma sqrt 2)) ~ 0.862
    ac = ActorCritic("mlp")
    params = _with_log_std(ac, ac.init(0, np.float64), LOG_STD_MIN)
    obs = rng.normal(size=17)
    mean = ac.mean(params, obs[None])[0]
    dev = np.abs(np.array([ac.sample_action(params, obs, rng)[0] for _ in range(2000)]) - mean)
    sigma = np.exp(LOG_STD_MIN)
    p = erf(0.01 / (sigma * np.sqrt(2.0)))
    frac = (dev < 0.01).mean()
    assert abs(frac - p) < 4 * np.sqrt(p * (1 - p) / dev.size)
    assert dev.max() < 6 * sigma


def test_sample_mean_monte_carlo(rng):
    ac = ActorCritic("mlp")
    params = _with_log_std(ac, ac.init(1, np.float64), 0.2)
    obs = rng.normal(size=17)
    mean = ac.mean(params, obs[None])[0]
    n = 100_000
    acts = np.array([ac.sample_action(params, obs, rng)[0] for _ in range(n)])
    assert np.all(np.abs(acts.mean(axis=0) - mean) < 3 * np.exp(0.2) / np.sqrt(n))
    a, logp, v = ac.act(params, obs, rng, deterministic=True)
    np.testing.assert_array_equal(a, mean)
    assert logp == pytest.approx(gaussian_log_prob(mean, mean, np.full(12, 0.2)), rel=1e-12)


def test_log_std_clamped():
    ac = ActorCritic("mlp")
    params = _with_log_std(ac, ac.init(0), np.linspace(-9, 9, 12))
    ls = ac.log_std(params)
    assert ls.min() == -5.0 and ls.max() == 2.0


# -- checkpoints ----------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    ac = ActorCritic("mlp")
    params = ac.init(3)
    m, v = rng.normal(size=(2, ac.n_params)).astype(np.float32)
    save_checkpoint(tmp_path / "a.ckpt", "mlp", params, {"iteration": 4, "env": "plane"}, (m, v))
    arch, p2, meta, (m2, v2) = load_checkpoint(tmp_path / "a.ckpt")
    assert arch == "mlp" and meta == {"iteration": 4, "env": "plane"}
    np.testing.assert_array_equal(p2, params)
    np.testing.assert_array_equal(m2, m)
    np.testing.assert_array_equal(v2, v)


def test_checkpoint_corruption(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"XXXX" + b"\0" * 20)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")
    ac = ActorCritic("mlp")
    save_checkpoint(tmp_path / "t.ckpt", "mlp", ac.init(0), {})
    data = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
