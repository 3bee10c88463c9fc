import math

import numpy as np
import pytest

from cloudalloc.auction import EnvironmentConfig
from cloudalloc.rl_core import (
    Batch,
    Ddpg,
    Mlp,
    PolicyCheckpoint,
    ReplayBuffer,
    TrainConfig,
    soft_update,
    train,
)
from cloudalloc.special_fn import RngStream

from .conftest import FIXED_DELAY, app


def naive_forward(net: Mlp, x):
    h = list(x)
    n_layers = len(net.layers)
    for k, (w, b) in enumerate(net.layers):
        out = []
        for j in range(w.shape[1]):
            z = b[j]
            for i in range(w.shape[0]):
                z += h[i] * w[i, j]
            out.append(max(z, 0.0) if k < n_layers - 1 else z)
        h = out
    z = h[0]
    if net.output == "sigmoid":
        return net.scale / (1.0 + math.exp(-z))
    return z


def central_difference(f, v, h=1e-6):
    g = np.zeros_like(v)
    for i in range(v.size):
        old = v[i]
        v[i] = old + h
        up = f()
        v[i] = old - h
        down = f()
        v[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def test_zero_network_outputs():
    assert Mlp((4, 20, 15, 1)).forward(np.ones(4)) == 0.0
    # sigmoid of zero sits at the middle of the bid range
    assert Mlp((4, 20, 15, 1), "sigmoid", 1.5).forward(np.ones(4)) == 0.75


def test_hand_computed_forward():
    net = Mlp((2, 1, 1), params=[1.0, -2.0, 0.5, 3.0, -1.0])
    assert net.forward(np.array([2.0, 0.25])) == 5.0
    assert net.forward(np.array([-2.0, 0.25])) == -1.0


@pytest.mark.parametrize("output", ["linear", "sigmoid"])
def test_forward_matches_naive_loops(output):
    rng = RngStream(1)
    for k in range(10):
        net = Mlp((5, 20, 15, 1), output, 1.5).init(rng.child(k))
        x = rng.uniform(5) * 2 - 0.5
        assert net.forward(x) == pytest.approx(naive_forward(net, x), abs=1e-12)
        batch = rng.uniform((7, 5))
        np.testing.assert_allclose(net.forward(batch), [naive_forward(net, r) for r in batch], atol=1e-12)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        Mlp((4, 3, 1)).forward(np.ones(5))
    with pytest.raises(ValueError):
        Mlp((4, 3, 2))
    with pytest.raises(ValueError):
        Mlp((4, 3, 1), params=np.zeros(3))


def test_backward_finite_differences():
    rng = RngStream(2)
    worst = 0.0
    for k in range(100):
        output = "sigmoid" if k % 2 else "linear"
        net = Mlp((5, 20, 15, 1), output, 1.5).init(rng.child(k))
        x = rng.uniform(5)
        up = float(rng.normal())
        net.forward(x)
        grad, grad_in = net.backward(up)
        fd = central_difference(lambda: up * net.forward(x), net.params)
        fd_in = central_difference(lambda: up * net.forward(x), x)
        worst = max(worst, rel_error(grad, fd), rel_error(grad_in, fd_in))
    assert worst < 1e-4


def test_backward_batch_sums_rows():
    net = Mlp((4, 6, 1)).init(RngStream(0))
    xs = RngStream(1).uniform((3, 4))
    up = np.array([0.5, -1.0, 2.0])
    net.forward(xs)
    grad, grad_in = net.backward(up)
    total = np.zeros_like(grad)
    for x, u in zip(xs, up):
        net.forward(x)
        g, gi = net.backward(u)
        total += g
    np.testing.assert_allclose(grad, total, atol=1e-14)
    assert grad_in.shape == (3, 4)


def test_zero_upstream_gradient():
    net = Mlp((4, 20, 15, 1), "sigmoid", 1.5).init(RngStream(0))
    net.forward(np.ones(4))
    grad, grad_in = net.backward(0.0)
    assert not grad.any() and not grad_in.any()


def test_linear_net_gradient_is_input():
    net = Mlp((4, 1)).init(RngStream(3))
    x = np.array([0.3, -1.0, 2.0, 0.5])
    net.forward(x)
    grad, grad_in = net.backward(1.0)
    np.testing.assert_array_equal(grad[:4], x)
    assert grad[4] == 1.0
    np.testing.assert_array_equal(grad_in, net.layers[0][0][:, 0])


def test_backward_requires_forward():
    with pytest.raises(RuntimeError):
        Mlp((2, 1)).backward(1.0)


# One-unit fixtures: actor a = cap * sigmoid(u.s + c), critic Q = v.[s, a/cap] + e.


def tiny_agent(discount=0.9, actor_lr=0.1, critic_lr=0.2, v_action=0.8):
    cfg = TrainConfig(discount=discount, actor_lr=actor_lr, critic_lr=critic_lr, optimizer="sgd",
                      soft_update=0.5, batch_size=1, buffer_size=10, bid_cap=1.5)
    actor = Mlp((4, 1), "sigmoid", 1.5, params=[0.2, -0.1, 0.3, 0.4, 0.05])
    critic = Mlp((5, 1), params=[0.5, 0.1, -0.2, 0.3, v_action, -0.4])
    t_actor = Mlp((4, 1), "sigmoid", 1.5, params=[0.1, 0.1, 0.1, 0.1, 0.0])
    t_critic = Mlp((5, 1), params=[0.2, 0.2, 0.2, 0.2, 0.2, 0.1])
    return Ddpg(actor, critic, cfg, t_actor, t_critic)


S = np.array([[1.0, 0.5, 0.2, 0.8]])
S2 = np.array([[0.6, 0.4, 0.3, 0.6]])


def test_td_update_single_transition_by_hand():
    agent = tiny_agent()
    batch = Batch(S, np.array([0.9]), np.array([-0.3]), S2, np.array([0.0]))
    # bootstrap with target nets
    a2 = 1.5 / (1 + math.exp(-(0.1 * (0.6 + 0.4 + 0.3 + 0.6))))
    q2 = 0.2 * (0.6 + 0.4 + 0.3 + 0.6 + a2 / 1.5) + 0.1
    q = 0.5 * 1.0 + 0.1 * 0.5 - 0.2 * 0.2 + 0.3 * 0.8 + 0.8 * 0.6 - 0.4
    delta = -0.3 + 0.9 * q2 - q
    td = agent.critic_update(batch)
    assert td[0] == pytest.approx(delta, abs=1e-14)
    feats = np.array([1.0, 0.5, 0.2, 0.8, 0.6, 1.0])
    old = np.array([0.5, 0.1, -0.2, 0.3, 0.8, -0.4])
    np.testing.assert_allclose(agent.critic.params, old + 0.2 * delta * feats, atol=1e-14)


def test_td_terminal_and_myopic():
    agent = tiny_agent()
    q = agent.critic.forward(np.array([1.0, 0.5, 0.2, 0.8, 0.6]))
    td = agent.critic_update(Batch(S, np.array([0.9]), np.array([-2.0]), S2, np.array([1.0])))
    assert td[0] == pytest.approx(-2.0 - q, abs=1e-14)
    myopic = tiny_agent(discount=0.0)
    td = myopic.critic_update(Batch(S, np.array([0.9]), np.array([-0.3]), S2, np.array([0.0])))
    assert td[0] == pytest.approx(-0.3 - q, abs=1e-14)


def test_updates_reject_empty_batch():
    agent = tiny_agent()
    empty = Batch(np.zeros((0, 4)), np.zeros(0), np.zeros(0), np.zeros((0, 4)), np.zeros(0))
    with pytest.raises(ValueError):
        agent.critic_update(empty)
    with pytest.raises(ValueError):
        agent.actor_update(empty)


def test_actor_update_by_hand():
    agent = tiny_agent()
    batch = Batch(S, np.array([0.9]), np.array([-0.3]), S2, np.array([0.0]))
    z = 0.2 * 1.0 - 0.1 * 0.5 + 0.3 * 0.2 + 0.4 * 0.8 + 0.05
    sig = 1 / (1 + math.exp(-z))
    dq_da = 0.8 / 1.5
    da_dz = 1.5 * sig * (1 - sig)
    old = np.array([0.2, -0.1, 0.3, 0.4, 0.05])
    agent.actor_update(batch)
    expected = old + 0.1 * dq_da * da_dz * np.array([1.0, 0.5, 0.2, 0.8, 1.0])
    np.testing.assert_allclose(agent.actor.params, expected, atol=1e-14)


def test_actor_unchanged_when_critic_flat_in_action():
    agent = tiny_agent(v_action=0.0)
    before = agent.actor.params.copy()
    agent.actor_update(Batch(S, np.array([0.9]), np.array([-0.3]), S2, np.array([0.0])))
    np.testing.assert_array_equal(agent.actor.params, before)


def test_actor_step_does_not_lower_q():
    rng = RngStream(8)
    cfg = TrainConfig(actor_lr=1e-3, optimizer="sgd")
    for k in range(5):
        agent = Ddpg.create(cfg, rng.child(k))
        s = rng.child("s", k).uniform((32, 4))
        batch = Batch(s, np.zeros(32), np.zeros(32), s, np.zeros(32))

        def mean_q():
            a = agent.actor.forward(s)
            return agent.critic.forward(agent._critic_input(s, a)).mean()

        before = mean_q()
        agent.actor_update(batch)
        assert mean_q() >= before


def test_soft_update():
    live = Mlp((2, 1), params=[1.0, 2.0, 3.0])
    target = Mlp((2, 1), params=[0.0, 0.0, 1.0])
    soft_update(live, target, 0.001)
    np.testing.assert_allclose(target.params, [0.001, 0.002, 0.999 + 0.003], atol=1e-15)
    soft_update(live, target, 1.0)
    np.testing.assert_array_equal(target.params, live.params)
    before = Mlp((2, 1), params=[5.0, 6.0, 7.0])
    after = soft_update(live, before.copy(), 0.0)
    np.testing.assert_array_equal(after.params, before.params)
    with pytest.raises(ValueError):
        soft_update(live, Mlp((3, 1)), 0.5)


def test_target_lag_bounded_by_drift():
    rng = RngStream(4)
    live = Mlp((4, 5, 1)).init(rng.child("init"))
    target = live.copy()
    drift = 0.0
    for k in range(200):
        move = 0.01 * rng.child(k).normal(live.params.size)
        live.params += move
        drift += np.max(np.abs(move))
        soft_update(live, target, 0.001)
        assert np.max(np.abs(target.params - live.params)) <= drift + 1e-15


def test_replay_fifo_and_sampling():
    buf = ReplayBuffer(5)
    for k in range(8):
        buf.add(np.full(4, k), k, -k, np.full(4, k + 1), k == 7)
    assert len(buf) == 5
    assert buf.ordered().a.tolist() == [3, 4, 5, 6, 7]
    batch = buf.sample(5, RngStream(0))
    assert sorted(batch.a.tolist()) == [3, 4, 5, 6, 7]
    with pytest.raises(ValueError):
        buf.sample(6, RngStream(0))


def env_fixed():
    return EnvironmentConfig(33.0, FIXED_DELAY)


def test_train_zero_episodes_returns_initial_checkpoint():
    ck, curve = train(app(2), env_fixed(), TrainConfig(episodes=0), seed=3)
    assert curve == [] and ck.episode == 0
    fresh = Ddpg.create(TrainConfig(episodes=0), RngStream(3).child("train").child("init"))
    np.testing.assert_array_equal(ck.actor.params, fresh.actor.params)
    np.testing.assert_array_equal(ck.target_critic.params, fresh.critic.params)


def test_train_is_deterministic():
    cfg = TrainConfig(episodes=200, eval_every=50, eval_episodes=3, actor_lr=3e-5, critic_lr=3e-4)
    a_ck, a_curve = train(app(3), env_fixed(), cfg, seed=5)
    b_ck, b_curve = train(app(3), env_fixed(), cfg, seed=5)
    assert a_curve == b_curve and len(a_curve) == 4
    np.testing.assert_array_equal(a_ck.actor.params, b_ck.actor.params)
    assert a_ck.episode == max(a_curve, key=lambda p: p.test_mean).episode


def test_checkpoint_round_trip(tmp_path):
    cfg = TrainConfig(episodes=20, eval_every=10, eval_episodes=2)
    ck, _ = train(app(1), env_fixed(), cfg, seed=1)
    path = tmp_path / "ck.json"
    ck.save(path)
    back = PolicyCheckpoint.load(path)
    for name in ("actor", "critic", "target_actor", "target_critic"):
        np.testing.assert_array_equal(getattr(back, name).params, getattr(ck, name).params)
    assert back.config == ck.config and back.seed == 1 and back.episode == ck.episode
    data = ck.to_dict()
    data["version"] = 99
    with pytest.raises(ValueError):
        PolicyCheckpoint.from_dict(data)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(discount=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=64, buffer_size=32)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"episodes": 10, "momentum": 0.9})
