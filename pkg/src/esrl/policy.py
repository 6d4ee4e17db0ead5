"""Entropy-regularized actor-critic primitives.

Squashed diagonal-Gaussian policy, twin Q critics with Polyak-averaged
targets, and an adaptive temperature. The pessimistic twin minimum is used
everywhere a Q value is consumed.

Batched entry points take ``(B, dim)`` arrays; the module-level functions
mirror them for single transitions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Adam, Mlp, NonFiniteError

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
ATANH_CLIP = 1.0 - 1e-6
LOG_2PI = math.log(2.0 * math.pi)


class GaussianPolicy:
    """tanh-squashed Gaussian: trunk emits (mean, log_std) per action dim."""

    def __init__(self, trunk: Mlp, action_dim: int):
        if trunk.output_dim != 2 * action_dim:
            raise ValueError(f"trunk must emit 2*action_dim={2 * action_dim} values, got {trunk.output_dim}")
        self.trunk = trunk
        self.action_dim = action_dim

    @classmethod
    def build(cls, state_dim: int, action_dim: int, master_seed: int, hidden_dim: int = 64, hidden_layers: int = 2) -> "GaussianPolicy":
        dims = [state_dim, *([hidden_dim] * hidden_layers), 2 * action_dim]
        return cls(Mlp.build("policy", dims, master_seed), action_dim)

    def dist_params(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.trunk.forward(states)
        mean = out[..., : self.action_dim]
        log_std = np.clip(out[..., self.action_dim :], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def sample_with_noise(self, states: np.ndarray, eps: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Reparameterized draw a = tanh(mean + std*eps); returns (a, log_prob, u).

        Emitted actions are clipped to +-(1 - 1e-6): float64 tanh saturates to
        exactly 1 in the far tail, and the clip keeps actions strictly inside
        (-1, 1) and the density evaluation identical to ``log_prob``.
        """
        mean, log_std = self.dist_params(states)
        if eps.ndim == mean.ndim + 1:  # K draws per state: (S, K, d)
            mean = mean[..., None, :]
            log_std = log_std[..., None, :]
        u = mean + np.exp(log_std) * eps
        a = np.clip(np.tanh(u), -ATANH_CLIP, ATANH_CLIP)
        return a, squashed_log_prob(mean, log_std, a), u

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        shape = (*np.shape(states)[:-1], self.action_dim)
        a, log_prob, _ = self.sample_with_noise(states, rng.standard_normal(shape))
        return a, log_prob

    def log_prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        if np.any(np.abs(actions) > 1.0):
            raise ValueError("action outside [-1, 1]")
        mean, log_std = self.dist_params(states)
        return squashed_log_prob(mean, log_std, actions)

    def mean_action(self, states: np.ndarray) -> np.ndarray:
        mean, _ = self.dist_params(states)
        return np.tanh(mean)


def squashed_log_prob(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Gaussian density in pre-squash space plus the tanh change-of-variables."""
    a = np.clip(actions, -ATANH_CLIP, ATANH_CLIP)
    u = np.arctanh(a)
    z = (u - mean) * np.exp(-log_std)
    log_prob = np.sum(-0.5 * LOG_2PI - log_std - 0.5 * z * z, axis=-1)
    log_prob -= np.sum(np.log(1.0 - a * a + SQUASH_EPS), axis=-1)
    return log_prob


class TwinCritic:
    """Two online Q nets over (state ⊕ action), plus frozen target copies."""

    def __init__(self, q1: Mlp, q2: Mlp, target_q1: Mlp, target_q2: Mlp):
        self.q1, self.q2 = q1, q2
        self.target_q1, self.target_q2 = target_q1, target_q2

    @classmethod
    def build(cls, state_dim: int, action_dim: int, master_seed: int, hidden_dim: int = 64, hidden_layers: int = 2) -> "TwinCritic":
        dims = [state_dim + action_dim, *([hidden_dim] * hidden_layers), 1]
        q1 = Mlp.build("q1", dims, master_seed)
        q2 = Mlp.build("q2", dims, master_seed)
        t1 = Mlp.build("q1", dims, master_seed)
        t2 = Mlp.build("q2", dims, master_seed)
        return cls(q1, q2, t1, t2)

    @staticmethod
    def join(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(states, dtype=np.float64), np.asarray(actions, dtype=np.float64)], axis=-1)

    def q_values(self, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = self.join(states, actions)
        return self.q1.forward(x)[..., 0], self.q2.forward(x)[..., 0]

    def q_min(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        v1, v2 = self.q_values(states, actions)
        return np.minimum(v1, v2)

    def q_min_target(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = self.join(states, actions)
        return np.minimum(self.target_q1.forward(x)[..., 0], self.target_q2.forward(x)[..., 0])

    def q_min_with_action_grad(self, states: np.ndarray, actions: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(q_min, d(sum_b w_b*q_min_b)/d action_b) without touching critic grads.

        The gradient follows the twin that attains the minimum per sample.
        """
        x = self.join(states, actions)
        c1: list = []
        c2: list = []
        v1 = self.q1.forward(x, cache=c1)[..., 0]
        v2 = self.q2.forward(x, cache=c2)[..., 0]
        sel1 = (v1 <= v2).astype(np.float64)
        w = np.asarray(weights, dtype=np.float64)
        g1 = self.q1.backward(x, (w * sel1)[:, None], accumulate=False, cache=c1)
        g2 = self.q2.backward(x, (w * (1.0 - sel1))[:, None], accumulate=False, cache=c2)
        state_dim = np.shape(states)[-1]
        return np.minimum(v1, v2), (g1 + g2)[:, state_dim:]

    def params(self):
        return self.q1.params() + self.q2.params()


@dataclass
class Temperature:
    log_alpha: float
    target_entropy: float
    lr_alpha: float = 3e-4

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)


def sample_action(policy: GaussianPolicy, state: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    action, log_prob = policy.sample(np.asarray(state, dtype=np.float64), rng)
    return action, float(log_prob)


def log_prob(policy: GaussianPolicy, state: np.ndarray, action: np.ndarray) -> float:
    return float(policy.log_prob(np.asarray(state, dtype=np.float64), action))


def q_min(critic: TwinCritic, state: np.ndarray, action: np.ndarray) -> float:
    return float(critic.q_min(np.asarray(state, dtype=np.float64)[None, :], np.asarray(action, dtype=np.float64)[None, :])[0])


def critic_target(
    r: float,
    done: bool,
    next_state: np.ndarray,
    policy: GaussianPolicy,
    critic: TwinCritic,
    alpha: float,
    gamma: float,
    rng: np.random.Generator,
) -> float:
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")
    s = np.asarray(next_state, dtype=np.float64)[None, :]
    a, lp = policy.sample(s, rng)
    boot = critic.q_min_target(s, a)[0] - alpha * lp[0]
    return float(r + gamma * (1.0 - float(done)) * boot)


def critic_targets_batch(
    rewards: np.ndarray,
    dones: np.ndarray,
    next_states: np.ndarray,
    policy: GaussianPolicy,
    critic: TwinCritic,
    alpha: float,
    gamma: float,
    eps: np.ndarray,
) -> np.ndarray:
    a2, lp2, _ = policy.sample_with_noise(next_states, eps)
    boot = critic.q_min_target(next_states, a2) - alpha * lp2
    return rewards + gamma * (1.0 - dones) * boot


def critic_update(
    critic: TwinCritic,
    states: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    next_states: np.ndarray,
    dones: np.ndarray,
    policy: GaussianPolicy,
    alpha: float,
    gamma: float,
    optimizer: Adam,
    rng: np.random.Generator,
) -> float:
    """One squared-Bellman-error step on both twins; returns the pre-step loss."""
    if len(states) == 0:
        raise ValueError("empty batch")
    eps = rng.standard_normal((len(states), policy.action_dim))
    y = critic_targets_batch(rewards, dones, next_states, policy, critic, alpha, gamma, eps)
    x = critic.join(states, actions)
    c1: list = []
    c2: list = []
    v1 = critic.q1.forward(x, cache=c1)[..., 0]
    v2 = critic.q2.forward(x, cache=c2)[..., 0]
    loss = float(np.mean(((v1 - y) ** 2 + (v2 - y) ** 2) / 2.0))
    if not math.isfinite(loss):
        raise NonFiniteError("critic loss is not finite")
    n = len(states)
    critic.q1.zero_grad()
    critic.q2.zero_grad()
    critic.q1.backward(x, ((v1 - y) / n)[:, None], cache=c1)
    critic.q2.backward(x, ((v2 - y) / n)[:, None], cache=c2)
    optimizer.step()
    return loss


def polyak_update(critic: TwinCritic, rho: float) -> None:
    """target <- rho*target + (1-rho)*online, elementwise."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must be in [0, 1]")
    for target, online in ((critic.target_q1, critic.q1), (critic.target_q2, critic.q2)):
        for pt, po in zip(target.params(), online.params()):
            pt.values *= rho
            pt.values += (1.0 - rho) * po.values


def temperature_update(temp: Temperature, entropy_estimate: float) -> Temperature:
    if not math.isfinite(entropy_estimate):
        raise ValueError("entropy estimate must be finite")
    temp.log_alpha -= temp.lr_alpha * (entropy_estimate - temp.target_entropy)
    return temp


def entropy_estimate_with_noise(policy: GaussianPolicy, states: np.ndarray, eps: np.ndarray) -> float:
    """-mean log-prob over states and the K draws encoded in eps (S, K, d)."""
    _, log_probs, _ = policy.sample_with_noise(states, eps)
    return float(-np.mean(log_probs))


def policy_entropy_estimate(policy: GaussianPolicy, states: np.ndarray, K: int, rng: np.random.Generator) -> float:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or len(states) == 0:
        raise ValueError("states must be a nonempty (S, state_dim) array")
    if K < 2:
        raise ValueError("K must be >= 2")
    eps = rng.standard_normal((len(states), K, policy.action_dim))
    return entropy_estimate_with_noise(policy, states, eps)
