import numpy as np
import pytest

from dsqn.envs import CatchEnv
from dsqn.errors import ContractViolation
from dsqn.grad import surrogate_grad
from dsqn.network import Dense, QNetwork, build_network, forward
from dsqn.neuron import NeuronConfig
from dsqn.qlearn import (
    AdamState,
    Batch,
    HyperParams,
    ReplayBuffer,
    TargetPair,
    Trainer,
    Transition,
    adam_step,
    greedy,
    loss_and_grad,
    select_action,
    td_target,
    train,
)


def two_action_net(w1=2.4, w2=(0.8, -1.3), T=1, decoder="last_mem"):
    cfg = NeuronConfig(tau=2.0, v_threshold=1.0, v_reset=0.0)
    layers = (Dense(1, 1, "lif", cfg), Dense(2, 1, "li", cfg))
    return QNetwork(layers, [np.array([[w1]]), np.array(w2, dtype=float)[:, None]], (1,), sim_steps=T, decoder=decoder)


def q_net_with_output(q):
    """Single LI layer with T=1 and last_mem: Q = W x / tau, so W = 2 q with x = 1."""
    cfg = NeuronConfig(tau=2.0)
    q = np.asarray(q, dtype=float)
    return QNetwork((Dense(len(q), 1, "li", cfg),), [2.0 * q[:, None]], (1,), sim_steps=1, decoder="last_mem")


def test_td_target_examples():
    net = q_net_with_output([0.2, 1.0, -3.0])
    one = np.ones(1)
    assert td_target(Transition(one, 0, 1.0, one, True), net, 0.99) == 1.0
    assert td_target(Transition(one, 0, 0.3, one, False), net, 0.0) == 0.3
    assert td_target(Transition(one, 0, 0.5, one, False), net, 0.9) == pytest.approx(1.4, abs=1e-15)


def test_loss_zero_when_targets_equal_q():
    net = two_action_net(T=3)
    obs = np.array([[0.9], [1.4]])
    q, _ = forward(net, obs)
    batch = Batch(obs, np.array([0, 1]), np.zeros(2), obs, np.ones(2, bool))
    loss, g = loss_and_grad(batch, TargetPair(net), HyperParams(), targets=q[[0, 1], [0, 1]])
    assert loss == 0.0
    assert all(np.all(x == 0) for x in g.grads)


def test_loss_gradient_by_hand():
    net = two_action_net()
    x, a, y = 1.0, 1, 0.25
    t = Transition(np.array([x]), a, y, np.array([x]), True)
    loss, g = loss_and_grad([t], TargetPair(net), HyperParams())
    w1, w2 = 2.4, np.array([0.8, -1.3])
    h1 = w1 * x / 2
    s1 = float(h1 >= 1.0)
    q = w2 * s1 / 2
    resid = y - q[a]
    assert loss == pytest.approx(resid ** 2, abs=1e-15)
    dq_dw2 = np.array([0.0, s1 / 2])
    dq_dw1 = w2[a] / 2 * surrogate_grad(h1 - 1.0) * x / 2
    np.testing.assert_allclose(g.grads[1][:, 0], -2 * resid * dq_dw2, rtol=1e-10, atol=1e-15)
    assert g.grads[0][0, 0] == pytest.approx(-2 * resid * dq_dw1, rel=1e-10)


def test_residual_doubling_doubles_gradient():
    net = two_action_net(T=4, decoder="max_mem")
    obs = np.array([[1.1], [2.3], [0.7]])
    q, _ = forward(net, obs)
    a = np.array([0, 1, 1])
    r = np.array([0.4, -0.2, 0.9])
    batch = Batch(obs, a, r, obs, np.ones(3, bool))
    _, g1 = loss_and_grad(batch, TargetPair(net), HyperParams(), targets=q[np.arange(3), a] + r)
    _, g2 = loss_and_grad(batch, TargetPair(net), HyperParams(), targets=q[np.arange(3), a] + 2 * r)
    for u, v in zip(g1.grads, g2.grads):
        np.testing.assert_allclose(v, 2 * u, rtol=1e-12, atol=1e-15)


def test_seed_only_at_taken_action():
    net = two_action_net(T=2)
    obs = np.array([[2.2], [2.2]])
    batch = Batch(obs, np.array([1, 0]), np.array([1.0, -1.0]), obs, np.ones(2, bool))
    _, g = loss_and_grad(batch, TargetPair(net), HyperParams())
    nz = g.seed != 0
    np.testing.assert_array_equal(nz, [[False, True], [True, False]])


def test_huber_clips_large_residuals():
    net = two_action_net()
    t = [Transition(np.array([1.0]), 0, 50.0, np.array([1.0]), True)]
    loss, g = loss_and_grad(t, TargetPair(net), HyperParams(huber=True))
    q = 0.8 * 1.0 / 2
    assert loss == pytest.approx(2 * (50 - q) - 1)
    assert g.seed[0, 0] == -2.0


def test_empty_batch_rejected():
    with pytest.raises(ContractViolation):
        loss_and_grad([], TargetPair(two_action_net()), HyperParams())


def test_adam_first_and_second_step():
    p = [np.array([1.0, -2.0, 0.5])]
    g = np.array([0.3, -0.01, 0.0])
    st = AdamState.zeros_like(p)
    lr = 0.1
    adam_step(p, [g], st, lr)
    # step 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    step1 = lr * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p[0], np.array([1.0, -2.0, 0.5]) - step1, rtol=1e-15)
    adam_step(p, [g], st, lr)
    m = 0.9 * 0.1 * g + 0.1 * g
    v = 0.999 * 0.001 * g * g + 0.001 * g * g
    m_hat, v_hat = m / (1 - 0.81), v / (1 - 0.999 ** 2)
    step2 = lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(p[0], np.array([1.0, -2.0, 0.5]) - step1 - step2, rtol=1e-14)


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = [np.array([1.0, 2.0])]
    st = AdamState([np.array([0.5, 0.5])], [np.array([0.25, 0.25])], t=3)
    adam_step(p, [np.zeros(2)], st, 1e-3)
    np.testing.assert_allclose(st.m[0], 0.45)
    np.testing.assert_allclose(st.v[0], 0.25 * 0.999)
    # the moments are still nonzero so the params move; with fresh state they do not
    p2 = [np.array([1.0, 2.0])]
    adam_step(p2, [np.zeros(2)], AdamState.zeros_like(p2), 1e-3)
    np.testing.assert_array_equal(p2[0], [1.0, 2.0])


def test_adam_shape_mismatch():
    with pytest.raises(ContractViolation):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState.zeros_like([np.zeros(2)]), 0.1)


def test_greedy_selection():
    rng = np.random.default_rng(0)
    assert select_action(q_net_with_output([1.0, 3.0, 2.0]), np.ones(1), 0.0, rng) == 1
    assert select_action(q_net_with_output([0.5, 0.5, 0.5]), np.ones(1), 0.0, rng) == 0
    assert greedy(np.array([2.0, 5.0, 5.0])) == 1


def test_constant_shift_keeps_greedy_action():
    rng = np.random.default_rng(1)
    for _ in range(50):
        q = rng.normal(size=4)
        assert greedy(q) == greedy(q + rng.normal() * 10)


def test_uniform_exploration():
    net = q_net_with_output([1.0, 3.0, 2.0])
    rng = np.random.default_rng(12345)
    n = 100_000
    counts = np.bincount([select_action(net, np.ones(1), 1.0, rng) for _ in range(n)], minlength=3)
    p = 1 / 3
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma)


def test_bad_epsilon():
    with pytest.raises(ContractViolation):
        select_action(q_net_with_output([1.0]), np.ones(1), 1.5, np.random.default_rng(0))


def make_transition(i):
    return Transition(np.full(2, i, dtype=float), i % 3, float(i), np.full(2, i + 1.0), i % 5 == 0)


def test_replay_fifo():
    buf = ReplayBuffer(10)
    for i in range(23):
        buf.push(make_transition(i))
    assert len(buf) == 10
    kept = [t.r for t in buf.transitions()]
    assert kept == [float(i) for i in range(13, 23)]


def test_replay_sampling_uniform_with_replacement():
    buf = ReplayBuffer(8)
    for i in range(5):
        buf.push(make_transition(i))
    b = buf.sample(50_000, np.random.default_rng(0))
    counts = np.bincount(b.r.astype(int), minlength=5)
    assert counts.sum() == 50_000 and np.all(np.abs(counts - 10_000) < 4 * np.sqrt(50_000 * 0.2 * 0.8))
    np.testing.assert_array_equal(b.s[:, 0], b.r)


def test_replay_errors():
    with pytest.raises(ContractViolation):
        ReplayBuffer(0)
    with pytest.raises(ContractViolation):
        ReplayBuffer(3).sample(1, np.random.default_rng(0))
    buf = ReplayBuffer(3)
    buf.push(make_transition(1))
    with pytest.raises(ContractViolation):
        buf.push(Transition(np.zeros(3), 0, 0.0, np.zeros(3), False))


def test_target_sync_bit_exact():
    net = build_network((1, 5, 5), 3, rng=np.random.default_rng(0))
    pair = TargetPair(net)
    net.params[0] += 0.125
    assert not np.array_equal(pair.target.params[0], net.params[0])
    pair.sync()
    for a, b in zip(pair.online.params, pair.target.params):
        assert a.tobytes() == b.tobytes()
        assert a is not b


def test_epsilon_schedule():
    hp = HyperParams(eps_start=1.0, eps_end=0.1, eps_anneal=100)
    assert hp.epsilon(0) == 1.0
    assert hp.epsilon(50) == pytest.approx(0.55)
    assert hp.epsilon(100) == 0.1 and hp.epsilon(10_000) == 0.1


@pytest.mark.parametrize("kwargs", [{"gamma": 1.5}, {"batch_size": 0}, {"lr": -1.0}, {"eval_epsilon": 2.0}])
def test_hyperparams_validation(kwargs):
    with pytest.raises(ContractViolation):
        HyperParams(**kwargs)


def small_hp(**kw):
    base = dict(batch_size=8, target_sync=50, eps_anneal=200, replay_capacity=500, warmup=30,
                total_steps=300, eval_interval=100, eval_episodes=3, noop_max=2)
    base.update(kw)
    return HyperParams(**base)


def small_net(seed=0):
    return build_network((1, 5, 5), 3, arch="4C3S1-LIF-Flatten-16-LIF-N_A-LI", rng=np.random.default_rng(seed),
                         init_gain=8.0)


def test_zero_learning_rate_keeps_params():
    net = small_net()
    before = [w.copy() for w in net.params]
    train(CatchEnv(5, 5), TargetPair(net), small_hp(lr=0.0), seed=3)
    for a, b in zip(before, net.params):
        assert a.tobytes() == b.tobytes()


def test_training_is_deterministic():
    h1 = train(CatchEnv(5, 5), TargetPair(small_net()), small_hp(), seed=5)
    h2 = train(CatchEnv(5, 5), TargetPair(small_net()), small_hp(), seed=5)
    assert h1 == h2
    assert any(r["eval_mean"] is not None for r in h1)
    assert any(r["loss"] is not None for r in h1)


def test_target_staleness_bound():
    hp = small_hp(target_sync=40)
    tr = Trainer(CatchEnv(5, 5), TargetPair(small_net()), hp, seed=1)
    worst = 0

    def check(t):
        nonlocal worst
        worst = max(worst, t.nets.steps_since_sync)
        if t.step % hp.target_sync == 0:
            for a, b in zip(t.nets.online.params, t.nets.target.params):
                assert a.tobytes() == b.tobytes()

    tr.run(200, callback=check)
    assert worst < hp.target_sync


def test_env_network_mismatch():
    with pytest.raises(ContractViolation):
        Trainer(CatchEnv(6, 6), TargetPair(small_net()), small_hp(), seed=0)


def test_invalid_action_from_env():
    env = CatchEnv(5, 5)
    env.reset()
    with pytest.raises(ContractViolation):
        env.step(3)
