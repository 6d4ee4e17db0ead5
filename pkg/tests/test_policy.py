import math

import numpy as np
import pytest

from esrl.nn import Adam, Layer, Mlp, ParamTensor
from esrl.policy import (
    GaussianPolicy,
    Temperature,
    TwinCritic,
    critic_target,
    critic_update,
    log_prob,
    policy_entropy_estimate,
    polyak_update,
    q_min,
    sample_action,
    temperature_update,
)

LOG_2PI = math.log(2 * math.pi)


def const_policy(mean, log_std, state_dim=2):
    """Trunk with zero weights: outputs (mean, log_std) for every state."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    log_std = np.atleast_1d(np.asarray(log_std, dtype=float))
    d = len(mean)
    w = ParamTensor("w", np.zeros((state_dim, 2 * d)))
    b = ParamTensor("b", np.concatenate([mean, log_std]))
    return GaussianPolicy(Mlp([Layer(w, b, "identity")]), action_dim=d)


def const_critic(v1, v2, state_dim=2, action_dim=1):
    def net(bias):
        w = ParamTensor("w", np.zeros((state_dim + action_dim, 1)))
        b = ParamTensor("b", np.array([float(bias)]))
        return Mlp([Layer(w, b, "identity")])

    return TwinCritic(net(v1), net(v2), net(v1), net(v2))


def hand_log_prob(u, mean, std):
    """Independent evaluation of the squashed-Gaussian density."""
    a = np.tanh(u)
    log_n = -0.5 * LOG_2PI - math.log(std) - 0.5 * ((u - mean) / std) ** 2
    return log_n - math.log(1 - a * a + 1e-6)


def test_sample_center_draw_matches_half_log_2pi():
    pol = const_policy([0.0], [0.0])
    a, lp, _ = pol.sample_with_noise(np.zeros(2), np.zeros(1))
    assert a[0] == 0.0
    assert abs(lp - (-0.5 * LOG_2PI)) < 1e-5  # correction is log(1 + 1e-6)


def test_degenerate_std_collapses_to_tanh_mean():
    pol = const_policy([0.8], [-20.0])  # clamps to -5
    rng = np.random.default_rng(0)
    draws = [pol.sample(np.zeros(2), rng)[0][0] for _ in range(200)]
    assert np.max(np.abs(np.asarray(draws) - np.tanh(0.8))) < 0.02


def test_sample_log_prob_hand_case():
    mean, std, u = 0.5, 0.3, 0.8
    pol = const_policy([mean], [math.log(std)])
    eps = np.array([(u - mean) / std])
    a, lp, _ = pol.sample_with_noise(np.zeros(2), eps)
    assert abs(a[0] - math.tanh(u)) < 1e-12
    assert abs(lp - hand_log_prob(u, mean, std)) < 1e-9


def test_log_prob_round_trip_1000_draws():
    rng = np.random.default_rng(11)
    pol = GaussianPolicy.build(state_dim=3, action_dim=2, master_seed=5)
    states = rng.normal(size=(1000, 3))
    actions, lp_sampled = pol.sample(states, rng)
    lp_again = pol.log_prob(states, actions)
    assert np.max(np.abs(lp_sampled - lp_again)) <= 1e-9


def test_log_prob_peaks_at_tanh_mean_for_small_std():
    pol = const_policy([0.4], [-3.0])
    s = np.zeros(2)
    center = math.tanh(0.4)
    lp_center = log_prob(pol, s, np.array([center]))
    for delta in (-0.1, 0.1):
        assert lp_center > log_prob(pol, s, np.array([center + delta]))


def test_log_prob_rejects_out_of_range_action():
    pol = const_policy([0.0], [0.0])
    with pytest.raises(ValueError):
        log_prob(pol, np.zeros(2), np.array([1.5]))


def test_sampled_actions_strictly_inside_unit_box():
    pol = const_policy([3.0, -3.0], [2.0, 2.0])
    rng = np.random.default_rng(1)
    a, _ = pol.sample(np.zeros((500, 2)), rng)
    assert np.all(np.abs(a) < 1.0)


def test_q_min_equal_twins_and_ordering():
    crit = const_critic(4.5, 4.5)
    assert q_min(crit, np.zeros(2), np.zeros(1)) == 4.5
    crit = const_critic(1.0, 3.0)
    assert q_min(crit, np.zeros(2), np.zeros(1)) == 1.0


def test_q_min_random_nets_componentwise():
    rng = np.random.default_rng(2)
    crit = TwinCritic.build(state_dim=3, action_dim=2, master_seed=8)
    s = rng.normal(size=(16, 3))
    a = rng.uniform(-1, 1, size=(16, 2))
    x = np.concatenate([s, a], axis=1)
    expected = np.minimum(crit.q1.forward(x)[:, 0], crit.q2.forward(x)[:, 0])
    assert np.allclose(crit.q_min(s, a), expected)


def test_critic_target_terminal_and_myopic():
    pol = const_policy([0.0], [0.0])
    crit = const_critic(5.0, 7.0)
    rng = np.random.default_rng(3)
    assert critic_target(1.0, True, np.zeros(2), pol, crit, 0.5, 0.99, rng) == 1.0
    assert critic_target(1.0, False, np.zeros(2), pol, crit, 0.5, 0.0, rng) == 1.0


def test_critic_target_ignores_next_state_when_done():
    pol = GaussianPolicy.build(2, 1, master_seed=1)
    crit = TwinCritic.build(2, 1, master_seed=2)
    y1 = critic_target(1.0, True, np.array([0.1, 0.2]), pol, crit, 0.3, 0.99, np.random.default_rng(4))
    y2 = critic_target(1.0, True, np.array([-5.0, 9.0]), pol, crit, 0.3, 0.99, np.random.default_rng(4))
    assert y1 == y2 == 1.0


def test_critic_target_hand_composition_with_pinned_rng():
    pol = GaussianPolicy.build(2, 1, master_seed=1)
    crit = TwinCritic.build(2, 1, master_seed=2)
    s2 = np.array([0.3, -0.4])
    alpha, gamma, r = 0.2, 0.99, 1.0
    got = critic_target(r, False, s2, pol, crit, alpha, gamma, np.random.default_rng(7))
    # hand composition with an identical generator
    a2, lp = pol.sample(s2[None, :], np.random.default_rng(7))
    want = r + gamma * (crit.q_min_target(s2[None, :], a2)[0] - alpha * lp[0])
    assert abs(got - want) < 1e-12


def test_critic_update_fixed_point_keeps_params():
    pol = const_policy([0.0], [0.0])
    crit = const_critic(0.0, 0.0)
    opt = Adam(crit.params(), lr=1e-3)
    before = [p.values.copy() for p in crit.params()]
    loss = critic_update(
        crit,
        states=np.zeros((4, 2)),
        actions=np.zeros((4, 1)),
        rewards=np.zeros(4),
        next_states=np.zeros((4, 2)),
        dones=np.ones(4),
        policy=pol,
        alpha=0.1,
        gamma=0.99,
        optimizer=opt,
        rng=np.random.default_rng(5),
    )
    assert loss == 0.0
    for p, b in zip(crit.params(), before):
        assert np.array_equal(p.values, b)


def test_critic_update_single_transition_hand_loss():
    pol = GaussianPolicy.build(2, 1, master_seed=3)
    crit = TwinCritic.build(2, 1, master_seed=4)
    s = np.array([[0.2, 0.1]])
    a = np.array([[0.5]])
    s2 = np.array([[0.0, -0.3]])
    alpha, gamma = 0.2, 0.9
    y = critic_target(1.0, False, s2[0], pol, crit, alpha, gamma, np.random.default_rng(6))
    v1, v2 = crit.q_values(s, a)
    want = ((v1[0] - y) ** 2 + (v2[0] - y) ** 2) / 2
    opt = Adam(crit.params(), lr=1e-3)
    got = critic_update(crit, s, a, np.array([1.0]), s2, np.array([0.0]), pol, alpha, gamma, opt, np.random.default_rng(6))
    assert abs(got - want) < 1e-12


def test_critic_update_loss_decreases_on_frozen_batch():
    rng = np.random.default_rng(8)
    pol = GaussianPolicy.build(3, 2, master_seed=5)
    crit = TwinCritic.build(3, 2, master_seed=6)
    opt = Adam(crit.params(), lr=3e-3)
    states = rng.normal(size=(32, 3))
    actions = rng.uniform(-1, 1, size=(32, 2))
    rewards = rng.integers(0, 2, size=32).astype(float)
    dones = np.ones(32)  # terminal: targets are exactly the rewards, no MC noise
    losses = [
        critic_update(crit, states, actions, rewards, states, dones, pol, 0.1, 0.99, opt, np.random.default_rng(9))
        for _ in range(100)
    ]
    assert losses[-1] < losses[0]
    assert losses[-1] < 0.05


def test_polyak_identity_copy_and_affine():
    crit = const_critic(0.0, 0.0)
    for p in crit.q1.params() + crit.q2.params():
        p.values[:] = 0.0
    for p in crit.target_q1.params() + crit.target_q2.params():
        p.values[:] = 1.0
    snap = [p.values.copy() for p in crit.target_q1.params()]
    polyak_update(crit, 1.0)
    for p, s in zip(crit.target_q1.params(), snap):
        assert np.array_equal(p.values, s)
    polyak_update(crit, 0.99)
    for p in crit.target_q1.params():
        assert np.allclose(p.values, 0.99)
    polyak_update(crit, 0.0)
    for p in crit.target_q1.params():
        assert np.allclose(p.values, 0.0)


def test_polyak_is_contraction():
    crit = TwinCritic.build(2, 1, master_seed=7)
    rng = np.random.default_rng(10)
    for p in crit.target_q1.params() + crit.target_q2.params():
        p.values += rng.normal(size=p.values.shape)
    gaps = [
        np.abs(pt.values - po.values).copy()
        for pt, po in zip(crit.target_q1.params() + crit.target_q2.params(), crit.q1.params() + crit.q2.params())
    ]
    for rho in (0.0, 0.3, 0.995, 1.0):
        polyak_update(crit, rho)
        pairs = zip(crit.target_q1.params() + crit.target_q2.params(), crit.q1.params() + crit.q2.params())
        new_gaps = [np.abs(pt.values - po.values) for pt, po in pairs]
        for g_new, g_old in zip(new_gaps, gaps):
            assert np.all(g_new <= g_old + 1e-15)
        gaps = new_gaps


def test_temperature_equilibrium_and_signs():
    t = Temperature(log_alpha=0.0, target_entropy=1.0, lr_alpha=0.1)
    temperature_update(t, 1.0)
    assert t.log_alpha == 0.0
    temperature_update(t, 2.0)
    assert abs(t.log_alpha - (-0.1)) < 1e-15
    t2 = Temperature(log_alpha=0.0, target_entropy=1.0, lr_alpha=0.1)
    alpha_before = t2.alpha
    temperature_update(t2, 0.5)  # entropy below target -> alpha increases
    assert t2.alpha > alpha_before


def test_alpha_positive_after_many_updates():
    t = Temperature(log_alpha=0.0, target_entropy=-2.0, lr_alpha=0.5)
    rng = np.random.default_rng(12)
    for _ in range(200):
        temperature_update(t, float(rng.normal(0, 5)))
        assert t.alpha > 0.0


def test_entropy_estimate_ordering_narrow_vs_wide():
    narrow = const_policy([0.0, 0.0], [-5.0, -5.0])
    wide = const_policy([0.0, 0.0], [0.5, 0.5])
    states = np.zeros((8, 2))
    rng1, rng2 = np.random.default_rng(13), np.random.default_rng(13)
    h_narrow = policy_entropy_estimate(narrow, states, 16, rng1)
    h_wide = policy_entropy_estimate(wide, states, 16, rng2)
    assert h_narrow < h_wide


def test_entropy_estimate_single_state_hand_average():
    pol = const_policy([0.2], [-0.5])
    state = np.zeros((1, 2))
    K = 4
    rng = np.random.default_rng(14)
    eps = np.random.default_rng(14).standard_normal((1, K, 1))
    got = policy_entropy_estimate(pol, state, K, rng)
    mean, std = 0.2, math.exp(-0.5)
    hand = -np.mean([hand_log_prob(mean + std * e, mean, std) for e in eps[0, :, 0]])
    assert abs(got - hand) < 1e-9


def test_entropy_estimate_variance_shrinks_with_k():
    pol = const_policy([0.1, -0.2], [0.0, 0.3])
    states = np.zeros((1, 2))

    def spread(K, n=160, base=0):
        vals = [policy_entropy_estimate(pol, states, K, np.random.default_rng(base + i)) for i in range(n)]
        return np.var(vals)

    v8, v16 = spread(8), spread(16, base=7000)
    assert v16 < v8 / 1.3  # ~1/K scaling with sampling slack


def test_sample_action_single_interface():
    pol = GaussianPolicy.build(3, 2, master_seed=9)
    a, lp = sample_action(pol, np.array([0.1, 0.2, 0.3]), np.random.default_rng(15))
    assert a.shape == (2,)
    assert isinstance(lp, float)
    assert abs(lp - log_prob(pol, np.array([0.1, 0.2, 0.3]), a)) < 1e-9
