"""Exact discrete regime for the covariance-entropy relation.

On a softmax bandit the policy is pi = softmax(z) and everything the
continuous estimator approximates by Monte Carlo can be computed exactly:
the covariance is the pi-weighted sum, and a logit update of size eta moves
the entropy by an amount we can measure directly. Used to validate the
first-order prediction

    dH ~= -eta * Cov_pi(log pi, pi * A)

against the true entropy change of an actual logit step z' = z + eta*pi*A.
"""

from __future__ import annotations

import numpy as np


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def entropy(probs: np.ndarray) -> float:
    p = np.asarray(probs, dtype=np.float64)
    return float(-np.sum(p * np.log(p)))


def exact_influence_covariance(probs: np.ndarray, advantages: np.ndarray) -> float:
    """Cov under pi of (log pi(a), pi(a) * A(a)), summed exactly over actions."""
    p = np.asarray(probs, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    x = np.log(p)
    y = p * adv
    ex = float(np.sum(p * x))
    ey = float(np.sum(p * y))
    return float(np.sum(p * x * y) - ex * ey)


def predicted_entropy_change(probs: np.ndarray, advantages: np.ndarray, eta: float) -> float:
    return -eta * exact_influence_covariance(probs, advantages)


def logit_step(logits: np.ndarray, advantages: np.ndarray, eta: float) -> np.ndarray:
    """Gradient-ascent logit update dz = eta * pi * A."""
    z = np.asarray(logits, dtype=np.float64)
    p = softmax(z)
    return z + eta * p * np.asarray(advantages, dtype=np.float64)


def measured_entropy_change(logits: np.ndarray, advantages: np.ndarray, eta: float) -> float:
    """Entropy after an actual logit step minus entropy before."""
    before = entropy(softmax(logits))
    after = entropy(softmax(logit_step(logits, advantages, eta)))
    return after - before
