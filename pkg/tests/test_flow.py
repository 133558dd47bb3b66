import numpy as np
import pytest

from coreflow.data import CoreBatch, StiefelPair, mat, vec
from coreflow.errors import ConfigError, NonFiniteLoss, NonFiniteState, ShapeMismatch
from coreflow.flow import (STD_FLOOR, Adam, FlowConfig, VelocityNet, cfm_loss_and_grad, decode, extract_cores,
                           integrate_rk4, sample_cores, sample_vectors, time_features, train_flow,
                           velocity_forward)
from coreflow.linalg import qr_thin


def rand_pair(rng, m1, m2, R):
    return StiefelPair(qr_thin(rng.standard_normal((m1, R)))[0], qr_thin(rng.standard_normal((m2, R)))[0])


# -- cores ---------------------------------------------------------------------

def test_extract_recovers_exact_cores():
    rng = np.random.default_rng(0)
    pair = rand_pair(rng, 9, 7, 3)
    S = rng.standard_normal((4, 3, 3))
    cores = extract_cores(pair.U @ S @ pair.V.T, pair)
    assert np.abs(cores.matrices() - S).max() <= 1e-12


def test_extract_with_truncated_identity():
    M = np.random.default_rng(1).standard_normal((2, 6, 5))
    pair = StiefelPair(np.eye(6)[:, :3], np.eye(5)[:, :3])
    np.testing.assert_array_equal(extract_cores(M, pair).matrices(), M[:, :3, :3])


def test_extract_matches_triple_loop():
    rng = np.random.default_rng(9)
    M = rng.standard_normal((10, 8))
    pair = rand_pair(rng, 10, 8, 3)
    S = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            S[a, b] = sum(pair.U[i, a] * M[i, j] * pair.V[j, b] for i in range(10) for j in range(8))
    np.testing.assert_allclose(extract_cores(M, pair).matrices()[0], S, atol=1e-13)
    np.testing.assert_allclose(extract_cores(M, pair).vectors[0], vec(S), atol=1e-13)


def test_extract_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        extract_cores(np.zeros((2, 4, 4)), StiefelPair(np.eye(5)[:, :2], np.eye(4)[:, :2]))


def test_decode_examples():
    rng = np.random.default_rng(2)
    pair = rand_pair(rng, 7, 6, 3)
    M = rng.standard_normal((3, 7, 6))
    PU, PV = pair.U @ pair.U.T, pair.V @ pair.V.T
    np.testing.assert_allclose(decode(extract_cores(M, pair), pair).data, PU @ M @ PV, atol=1e-13)
    assert np.all(decode(np.zeros((1, 9)), pair).data == 0)
    s = rng.standard_normal((5, 9))
    norms = np.linalg.norm(decode(s, pair).data, axis=(1, 2))
    np.testing.assert_allclose(norms, np.linalg.norm(s, axis=1), rtol=1e-10)
    with pytest.raises(ShapeMismatch):
        decode(np.zeros((1, 8)), pair)


# -- network ---------------------------------------------------------------------

def test_time_features():
    f = time_features(np.array([0.25]), 4)
    np.testing.assert_allclose(f, [[1.0, 0.0, 0.0, -1.0]], atol=1e-15)


def test_zero_final_layer_gives_zero_output():
    net = VelocityNet.init(5, (8, 8), 6, seed=1)
    x = np.random.default_rng(0).standard_normal((4, 5))
    assert np.all(net.forward(x, np.linspace(0, 1, 4)) == 0)


def test_scalar_hand_evaluation():
    # d=1, one hidden unit, time width 2
    w0 = np.array([[0.7], [0.2], [-0.4]])
    b0 = np.array([0.1])
    w1 = np.array([[1.5]])
    b1 = np.array([-0.3])
    net = VelocityNet(1, (1,), 2, [w0, w1], [b0, b1])
    x, t = 0.8, 0.3
    a = 0.7 * x + 0.2 * np.sin(2 * np.pi * t) - 0.4 * np.cos(2 * np.pi * t) + 0.1
    expected = 1.5 * a / (1 + np.exp(-a)) - 0.3
    assert velocity_forward(net, [[x]], t)[0, 0] == pytest.approx(expected, rel=1e-14)


def test_forward_is_deterministic():
    net = VelocityNet.init(4, (16,), 4, seed=3, zero_final=False)
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert net.forward(x, 0.4).tobytes() == net.forward(x, 0.4).tobytes()


def test_init_shapes_and_glorot_bounds():
    net = VelocityNet.init(9, (32, 16), 8, seed=0)
    assert net.sizes == [17, 32, 16, 9]
    for w in net.weights[:-1]:
        assert np.abs(w).max() <= np.sqrt(6 / sum(w.shape))
    assert np.all(net.weights[-1] == 0)
    assert net.n_params == net.flat().size


def test_flat_round_trip():
    net = VelocityNet.init(4, (5,), 2, seed=0, zero_final=False)
    other = VelocityNet(4, (5,), 2)
    other.set_flat(net.flat())
    x = np.ones((2, 4))
    assert np.array_equal(other.forward(x, 0.5), net.forward(x, 0.5))
    with pytest.raises(ShapeMismatch):
        other.set_flat(np.zeros(3))


# -- loss and gradients -----------------------------------------------------------

def test_loss_zero_net_equal_pairs():
    net = VelocityNet.init(3, (4,), 2, seed=0)
    s = np.random.default_rng(0).standard_normal((5, 3))
    loss, grads = cfm_loss_and_grad(net, s, s.copy(), np.linspace(0, 1, 5))
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_loss_zero_net_general():
    net = VelocityNet.init(3, (4,), 2, seed=0)
    rng = np.random.default_rng(1)
    s, z = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    loss, _ = cfm_loss_and_grad(net, s, z, rng.uniform(size=6))
    assert loss == pytest.approx(np.mean(np.sum((z - s) ** 2, axis=1)), rel=1e-14)


def fd_check(net, s, z, t, h=1e-5):
    _, grads = cfm_loss_and_grad(net, s, z, t)
    analytic = np.concatenate([g.ravel() for g in grads])
    theta = net.flat()
    fd = np.empty_like(theta)
    for k in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        net.set_flat(tp)
        lp = cfm_loss_and_grad(net, s, z, t)[0]
        net.set_flat(tm)
        lm = cfm_loss_and_grad(net, s, z, t)[0]
        fd[k] = (lp - lm) / (2 * h)
    net.set_flat(theta)
    return analytic, fd


def test_backprop_tiny_net_seed13():
    rng = np.random.default_rng(13)
    net = VelocityNet.init(4, (6,), 4, seed=13, zero_final=False)
    s, z, t = rng.standard_normal((5, 4)), rng.standard_normal((5, 4)), rng.uniform(size=5)
    analytic, fd = fd_check(net, s, z, t)
    big = np.abs(fd) > 1e-6
    assert np.all(np.abs(analytic - fd)[big] <= 1e-4 * np.abs(fd)[big])
    assert np.abs(analytic - fd)[~big].max(initial=0) <= 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(500 + seed)
    d = int(rng.integers(1, 17))
    hidden = tuple(int(h) for h in rng.integers(2, 9, size=int(rng.integers(1, 3))))
    net = VelocityNet.init(d, hidden, 4, seed=seed, zero_final=False)
    for b in net.biases:
        b[:] = 0.1 * rng.standard_normal(b.shape)
    n = 4
    s, z, t = rng.standard_normal((n, d)), rng.standard_normal((n, d)), rng.uniform(size=n)
    analytic, fd = fd_check(net, s, z, t)
    assert np.linalg.norm(analytic - fd) <= 1e-4 * np.linalg.norm(fd)


def test_constant_coordinates_are_masked():
    net = VelocityNet.init(3, (5,), 2, seed=0, zero_final=False)
    net.std = np.array([1.0, STD_FLOOR, 2.0])
    x = np.random.default_rng(0).standard_normal((4, 3))
    out = net.forward(x, 0.5)
    assert np.all(out[:, 1] == 0)
    x2 = x.copy()
    x2[:, 1] += 5.0
    assert np.array_equal(net.forward(x2, 0.5), out)


def test_adam_first_step_moves_by_lr():
    p = [np.array([1.0, -2.0])]
    Adam(p, lr=0.1).step(p, [np.array([3.0, -0.5])])
    np.testing.assert_allclose(p[0], [0.9, -1.9], atol=1e-8)


# -- training ---------------------------------------------------------------------

def test_zero_steps_returns_initial_net():
    cores = np.random.default_rng(0).standard_normal((10, 4))
    net, trace = train_flow(cores, FlowConfig(steps=0, hidden=(8,), time_dim=4))
    assert trace == [] and np.all(net.weights[-1] == 0)


def test_training_is_reproducible():
    cores = np.random.default_rng(0).standard_normal((40, 4))
    cfg = FlowConfig(steps=30, hidden=(8,), time_dim=4, batch_size=16, log_stride=1)
    a, ta = train_flow(cores, cfg)
    b, tb = train_flow(cores, cfg)
    assert ta == tb and a.flat().tobytes() == b.flat().tobytes()


def test_identical_cores_concentrate():
    c = np.array([1.0, -2.0, 0.5, 3.0])
    net, trace = train_flow(np.tile(c, (64, 1)), FlowConfig(steps=50, hidden=(16,), time_dim=4, batch_size=64, log_stride=1))
    # every coordinate is constant, so the loss is the stationary value E||z - 0||^2
    assert np.mean([l for _, l in trace]) == pytest.approx(4.0, rel=0.15)
    g = sample_vectors(net, 50, 11, seed=1)
    assert np.linalg.norm(g.mean(axis=0) - c) <= 0.1 * np.linalg.norm(c)


def test_gaussian_cores_stay_gaussian():
    d = 16
    data = np.random.default_rng(4).standard_normal((2000, d))
    net, _ = train_flow(data, FlowConfig(steps=2000, lr=3e-4, hidden=(64, 64), time_dim=8, batch_size=1000))
    g = sample_vectors(net, 2000, 101, seed=2)
    g = (g - net.mean) / net.std
    assert np.linalg.norm(g.mean(axis=0)) <= 0.15
    assert np.abs(np.cov(g.T) - np.eye(d)).max() <= 0.3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_training_loss():
    cores = np.random.default_rng(0).standard_normal((8, 4))
    net = VelocityNet.init(4, (4,), 2, seed=0, zero_final=False)
    net.weights[0][:] = np.inf
    with pytest.raises(NonFiniteLoss) as err:
        train_flow(cores, FlowConfig(steps=3, hidden=(4,), time_dim=2), net=net)
    assert err.value.step == 0


@pytest.mark.parametrize("kw", [dict(time_dim=3), dict(lr=0.0), dict(ode_steps=1), dict(batch_size=0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        FlowConfig(**kw).validate()


# -- sampling ---------------------------------------------------------------------

def test_zero_field_is_identity():
    z = np.random.default_rng(0).standard_normal((5, 3))
    assert np.array_equal(integrate_rk4(lambda x, t: np.zeros_like(x), z), z)


def test_zero_net_sampling_returns_destandardized_noise():
    from coreflow.flow import base_noise
    net = VelocityNet.init(4, (8,), 4, seed=0)
    net.mean = np.array([1.0, 2.0, 3.0, 4.0])
    net.std = np.array([2.0, 1.0, 0.5, 3.0])
    out = sample_vectors(net, 6, 101, seed=5)
    assert np.array_equal(out, base_noise(6, 4, 5) * net.std + net.mean)


def test_constant_field_is_exact():
    z = np.random.default_rng(1).standard_normal((4, 3))
    c = np.array([0.5, -1.25, 2.0])
    np.testing.assert_allclose(integrate_rk4(lambda x, t: np.broadcast_to(c, x.shape), z), z - c, atol=1e-14)


def test_constant_field_from_hand_built_net():
    c = np.array([0.5, -1.0])
    net = VelocityNet(2, (3,), 2, biases=[np.zeros(3), c])
    z = np.random.default_rng(2).standard_normal((3, 2))
    np.testing.assert_allclose(integrate_rk4(net.forward, z), z - c, atol=1e-14)


def test_linear_field_accuracy_and_order():
    z = np.random.default_rng(3).standard_normal((5, 4))
    exact = z * np.exp(-1.0)
    err101 = np.abs(integrate_rk4(lambda x, t: x, z, 101) - exact).max()
    err51 = np.abs(integrate_rk4(lambda x, t: x, z, 51) - exact).max()
    err26 = np.abs(integrate_rk4(lambda x, t: x, z, 26) - exact).max()
    assert err101 <= 1e-8
    assert err51 / err101 >= 12 and err26 / err51 >= 12


def test_nonfinite_state():
    with pytest.raises(NonFiniteState):
        integrate_rk4(lambda x, t: np.full_like(x, np.inf), np.zeros((1, 2)))


def test_sample_cores_reproducible_and_square():
    net = VelocityNet.init(9, (8,), 4, seed=0, zero_final=False)
    a = sample_cores(net, 7, 11, seed=3)
    b = sample_cores(net, 7, 11, seed=3)
    assert isinstance(a, CoreBatch) and a.R == 3
    assert a.vectors.tobytes() == b.vectors.tobytes()
    # sample i depends only on (seed, i)
    assert np.array_equal(sample_cores(net, 3, 11, seed=3).vectors, a.vectors[:3])
    with pytest.raises(ShapeMismatch):
        sample_cores(VelocityNet.init(5, (4,), 2), 2)
