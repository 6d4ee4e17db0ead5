"""Per-sample entropy-influence scoring and entropy-bounded selection.

For each stored pair (s, a) we draw K actions from the current policy at s,
form X_k = log pi(a_k|s) and Y_k = pi(a_k|s) * A_soft(s, a_k), and score the
pair by the centered product of its own (X, Y) against the K-draw means:

    c(s, a) = -eta * (X(a) - mean X) * (Y(a) - mean Y)

The batch-level entropy-change prediction is -eta times the mean over batch
states of the K-draw empirical covariance of (X, Y). A batch keeps only the
samples whose |c| lies inside the [low_pct, high_pct] nearest-rank percentile
band; the masked actor objective averages the kept samples' losses.

Densities pi(a|s) = exp(log_prob) are clamped to 1e6 to bound Y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .policy import ATANH_CLIP, SQUASH_EPS, GaussianPolicy, TwinCritic, squashed_log_prob

DENSITY_CLAMP = 1e6
MASK_EPS = 1e-8


@dataclass
class InfluenceRecord:
    sample_id: int
    c_value: float
    abs_c: float
    retained: bool
    source: str

    def to_json_dict(self, step: int) -> dict:
        return {
            "sample_id": self.sample_id,
            "c": self.c_value,
            "abs_c": self.abs_c,
            "retained": int(self.retained),
            "source": self.source,
            "step": step,
        }


@dataclass(frozen=True)
class SelectionBounds:
    lower: float
    upper: float
    low_pct: float
    high_pct: float


@dataclass
class InfluenceBatch:
    """Batched scoring output; arrays are aligned with the input batch."""

    c: np.ndarray  # (B,) signed influence
    state_cov: np.ndarray  # (B,) per-state K-draw covariance of (X, Y)
    dh_pred: float  # -eta * mean(state_cov)
    x_taken: np.ndarray
    y_taken: np.ndarray
    x_mean: np.ndarray
    y_mean: np.ndarray
    v_hat: np.ndarray


def _clamped_density(log_probs: np.ndarray) -> np.ndarray:
    return np.minimum(np.exp(log_probs), DENSITY_CLAMP)


def score_from_values(
    x_k: np.ndarray,
    q_k: np.ndarray,
    x_taken: np.ndarray,
    q_taken: np.ndarray,
    alpha: float,
    eta: float,
) -> InfluenceBatch:
    """Centered-product scoring from already-evaluated log-probs and q values.

    ``x_k``/``q_k`` are (B, K) over the K draws; ``x_taken``/``q_taken`` are
    (B,) for the stored pairs.
    """
    g_k = q_k - alpha * x_k
    v_hat = g_k.mean(axis=1)  # entropy-regularized state value
    a_k = g_k - v_hat[:, None]
    y_k = _clamped_density(x_k) * a_k

    x_mean = x_k.mean(axis=1)
    y_mean = y_k.mean(axis=1)
    state_cov = np.mean((x_k - x_mean[:, None]) * (y_k - y_mean[:, None]), axis=1)

    a_taken = q_taken - alpha * x_taken - v_hat
    y_taken = _clamped_density(x_taken) * a_taken

    c = -eta * (x_taken - x_mean) * (y_taken - y_mean)
    dh_pred = float(-eta * state_cov.mean())
    return InfluenceBatch(c, state_cov, dh_pred, x_taken, y_taken, x_mean, y_mean, v_hat)


def score_pairs(
    states: np.ndarray,
    actions: np.ndarray,
    policy,
    critic,
    alpha: float,
    eta: float,
    eps: np.ndarray,
) -> InfluenceBatch:
    """Duck-typed scorer: any policy with sample_with_noise/log_prob and any
    critic with q_min. Used by the single-pair operations."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    B, K, d = eps.shape
    draws, x_k, _ = policy.sample_with_noise(states, eps)
    flat = np.repeat(states, K, axis=0)
    q_k = np.asarray(critic.q_min(flat, draws.reshape(B * K, d))).reshape(B, K)
    x_taken = np.asarray(policy.log_prob(states, actions))
    q_taken = np.asarray(critic.q_min(states, actions))
    return score_from_values(x_k, q_k, x_taken, q_taken, alpha, eta)


def score_batch(
    states: np.ndarray,
    actions: np.ndarray,
    policy: GaussianPolicy,
    critic: TwinCritic,
    alpha: float,
    eta: float,
    eps: np.ndarray,
) -> InfluenceBatch:
    """Score every (state, action) pair in a batch with shared K draws.

    ``eps`` has shape (B, K, action_dim); the K draws at each state define
    both that state's covariance and the baseline its own pair is centered
    against. Single trunk pass and single fused q_min evaluation.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    B, K, d = eps.shape

    mean, log_std = policy.dist_params(states)
    u = mean[:, None, :] + np.exp(log_std)[:, None, :] * eps
    draws = np.clip(np.tanh(u), -ATANH_CLIP, ATANH_CLIP)
    x_k = squashed_log_prob(mean[:, None, :], log_std[:, None, :], draws)  # (B, K)
    x_taken = squashed_log_prob(mean, log_std, actions)

    all_states = np.concatenate([np.repeat(states, K, axis=0), states])
    all_actions = np.concatenate([draws.reshape(B * K, d), actions])
    q_all = critic.q_min(all_states, all_actions)
    return score_from_values(x_k, q_all[: B * K].reshape(B, K), x_taken, q_all[B * K :], alpha, eta)


def soft_value(
    state: np.ndarray,
    policy: GaussianPolicy,
    critic: TwinCritic,
    alpha: float,
    K: int,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo entropy-regularized state value over K policy draws."""
    if K < 2:
        raise ValueError("K must be >= 2")
    s = np.asarray(state, dtype=np.float64)[None, :]
    eps = rng.standard_normal((1, K, policy.action_dim))
    draws, lp, _ = policy.sample_with_noise(s, eps)
    qm = critic.q_min(np.repeat(s, K, axis=0), draws[0])
    return float(np.mean(qm - alpha * lp[0]))


def soft_advantage(
    state: np.ndarray,
    action: np.ndarray,
    policy: GaussianPolicy,
    critic: TwinCritic,
    alpha: float,
    v_hat: float,
) -> float:
    s = np.asarray(state, dtype=np.float64)[None, :]
    a = np.asarray(action, dtype=np.float64)[None, :]
    return float(critic.q_min(s, a)[0] - alpha * policy.log_prob(s, a)[0] - v_hat)


def influence_value(
    state: np.ndarray,
    action: np.ndarray,
    policy: GaussianPolicy,
    critic: TwinCritic,
    alpha: float,
    eta: float,
    K: int,
    rng: np.random.Generator,
) -> float:
    if K < 2:
        raise ValueError("K must be >= 2")
    if eta <= 0:
        raise ValueError("eta must be > 0")
    eps = rng.standard_normal((1, K, policy.action_dim))
    out = score_pairs(
        np.asarray(state, dtype=np.float64)[None, :],
        np.asarray(action, dtype=np.float64)[None, :],
        policy,
        critic,
        alpha,
        eta,
        eps,
    )
    return float(out.c[0])


def predict_entropy_change(
    states: np.ndarray,
    actions: np.ndarray,
    policy: GaussianPolicy,
    critic: TwinCritic,
    alpha: float,
    eta: float,
    K: int,
    rng: np.random.Generator,
) -> float:
    """-eta * mean over batch states of the K-draw covariance of (X, Y)."""
    states = np.asarray(states, dtype=np.float64)
    if len(states) == 0:
        raise ValueError("empty batch")
    eps = rng.standard_normal((len(states), K, policy.action_dim))
    return score_pairs(states, np.asarray(actions, dtype=np.float64), policy, critic, alpha, eta, eps).dh_pred


def percentile_bounds(abs_values: np.ndarray, low_pct: float = 5.0, high_pct: float = 90.0) -> SelectionBounds:
    """Nearest-rank percentiles: the order statistic at rank ceil(p*n/100)."""
    v = np.sort(np.asarray(abs_values, dtype=np.float64))
    n = len(v)
    if n == 0:
        raise ValueError("empty value list")
    if not (0.0 <= low_pct <= high_pct <= 100.0):
        raise ValueError("need 0 <= low_pct <= high_pct <= 100")

    def at(p: float) -> float:
        rank = max(1, math.ceil(p * n / 100.0))
        return float(v[rank - 1])

    return SelectionBounds(lower=at(low_pct), upper=at(high_pct), low_pct=low_pct, high_pct=high_pct)


def selection_mask(c_values: np.ndarray, bounds: SelectionBounds) -> np.ndarray:
    """1 where |c| lies in the closed interval [lower, upper], else 0."""
    abs_c = np.abs(np.asarray(c_values, dtype=np.float64))
    return ((abs_c >= bounds.lower) & (abs_c <= bounds.upper)).astype(np.float64)


def masked_actor_loss(
    states: np.ndarray,
    mask: np.ndarray,
    policy: GaussianPolicy,
    critic: TwinCritic,
    alpha: float,
    eps: np.ndarray,
    mask_eps: float = MASK_EPS,
) -> float:
    """Masked mean of per-sample losses l = q_min(s, a~) - alpha*log pi(a~|s).

    a~ is a fresh reparameterized draw at each state (noise ``eps``). Returns
    the scalar loss and accumulates its gradient into the policy trunk;
    masked-out samples contribute exactly zero gradient. The critic's
    parameter grads are left untouched.
    """
    states = np.asarray(states, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if len(mask) != len(states):
        raise ValueError("mask length must equal batch size")

    trunk_cache: list = []
    out = policy.trunk.forward(states, cache=trunk_cache)
    mean = out[..., : policy.action_dim]
    log_std_raw = out[..., policy.action_dim :]
    log_std = np.clip(log_std_raw, -5.0, 2.0)
    std = np.exp(log_std)
    u = mean + std * eps
    a = np.tanh(u)
    log_prob = np.sum(-0.5 * np.log(2.0 * np.pi) - log_std - 0.5 * eps * eps, axis=-1)
    log_prob -= np.sum(np.log(1.0 - a * a + SQUASH_EPS), axis=-1)

    denom = float(mask.sum()) + mask_eps
    w = -mask / denom  # dLoss/dl per sample; exactly zero where masked out
    q, dq_da = critic.q_min_with_action_grad(states, a, w)  # grad includes w
    l = q - alpha * log_prob
    loss = float(-(mask * l).sum() / denom)

    # l's explicit action dependence: the squash correction inside -alpha*log_prob.
    dl_da = dq_da + w[:, None] * (-2.0 * alpha * a / (1.0 - a * a + SQUASH_EPS))
    du = dl_da * (1.0 - a * a)
    d_mean = du
    d_log_std = du * std * eps + w[:, None] * alpha
    d_log_std *= (log_std_raw >= -5.0) & (log_std_raw <= 2.0)
    policy.trunk.backward(states, np.concatenate([d_mean, d_log_std], axis=-1), cache=trunk_cache)
    return loss
