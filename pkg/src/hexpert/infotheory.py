"""Distributions, divergences, free energy, and mutual information.

Internal divergences are in nats; mutual information is reported in bits
(divide by ln 2 only at the reporting boundary).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, stop_gradient

LN2 = float(np.log(2.0))
LOG_2PI = float(np.log(2.0 * np.pi))


class DomainError(ValueError):
    """Argument outside the operation's mathematical domain."""


class InfiniteDivergenceError(DomainError):
    """KL(p || q) diverges: q assigns zero mass where p does not."""


class Categorical:
    """Probability vector over finitely many outcomes."""

    __slots__ = ("probs",)

    def __init__(self, probs):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise DomainError("categorical needs a non-empty 1-D vector")
        if np.any(probs < 0.0) or abs(probs.sum() - 1.0) > 1e-9:
            raise DomainError("categorical entries must be >= 0 and sum to 1")
        self.probs = probs

    @classmethod
    def uniform(cls, n):
        return cls(np.full(n, 1.0 / n))

    def sample(self, rng):
        return int(rng.choice(self.probs.size, p=self.probs))

    def argmax(self):
        return int(np.argmax(self.probs))

    def entropy(self):
        p = self.probs[self.probs > 0.0]
        return float(-(p * np.log(p)).sum())

    def __len__(self):
        return self.probs.size


@dataclass
class DiagGaussian:
    """Diagonal Gaussian by mean and log standard deviation.

    Fields may be plain arrays or on-tape Tensors; `mean_value` and
    `log_std_value` always hand back arrays.
    """

    mean: object
    log_std: object

    @property
    def mean_value(self):
        return self.mean.data if isinstance(self.mean, Tensor) else np.asarray(self.mean, dtype=np.float64)

    @property
    def log_std_value(self):
        return self.log_std.data if isinstance(self.log_std, Tensor) else np.asarray(self.log_std, dtype=np.float64)

    @property
    def std_value(self):
        return np.exp(self.log_std_value)

    def log_density(self, x):
        """Log pdf at x (array), summed over dimensions."""
        mu = self.mean_value
        log_sig = self.log_std_value
        z = (np.asarray(x, dtype=np.float64) - mu) / np.exp(log_sig)
        return float(-0.5 * (z * z).sum() - log_sig.sum() - 0.5 * LOG_2PI * mu.size)


@dataclass
class ResourceParams:
    """Inverse temperatures for the two stages, plus the RL discount."""

    beta1: float
    beta2: float
    gamma: float = 0.99

    def __post_init__(self):
        if self.beta1 <= 0.0 or self.beta2 <= 0.0:
            raise DomainError("beta1 and beta2 must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError("gamma must lie in [0, 1]")


def kl(p, q):
    """KL divergence in nats between two same-kind distributions."""
    if isinstance(p, Categorical) and isinstance(q, Categorical):
        return kl_categorical(p.probs, q.probs)
    if isinstance(p, DiagGaussian) and isinstance(q, DiagGaussian):
        return kl_diag_gaussian(
            p.mean_value, p.log_std_value, q.mean_value, q.log_std_value
        )
    raise DomainError(
        f"kl needs two distributions of the same kind, got "
        f"{type(p).__name__} and {type(q).__name__}"
    )


def kl_categorical(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DomainError(f"support mismatch: {p.shape} vs {q.shape}")
    mask = p > 0.0
    if np.any(q[mask] == 0.0):
        raise InfiniteDivergenceError(
            "q assigns zero probability where p has mass"
        )
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def kl_diag_gaussian(mean_p, log_std_p, mean_q, log_std_q):
    mean_p, log_std_p, mean_q, log_std_q = (
        np.asarray(a, dtype=np.float64)
        for a in (mean_p, log_std_p, mean_q, log_std_q)
    )
    if mean_p.shape != mean_q.shape:
        raise DomainError(f"support mismatch: {mean_p.shape} vs {mean_q.shape}")
    var_ratio = np.exp(2.0 * (log_std_p - log_std_q))
    delta = (mean_p - mean_q) / np.exp(log_std_q)
    return float(
        (log_std_q - log_std_p + 0.5 * (var_ratio + delta * delta) - 0.5).sum()
    )


def sample_reparam(gaussian, noise):
    """Reparameterized draw: action = mean + exp(log_std) * noise.

    Returns (action, log_density) as Tensors. Pathwise gradients flow from
    the action into mean and log_std; the log-density treats the sampled
    point as a constant, so its gradient is the score function.
    """
    mean = as_tensor(gaussian.mean)
    log_std = as_tensor(gaussian.log_std)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mean.data.shape:
        raise DomainError(
            f"noise shape {noise.shape} does not match mean {mean.data.shape}"
        )
    action = mean + log_std.exp() * Tensor(noise)
    log_density = gaussian_log_density(mean, log_std, stop_gradient(action))
    return action, log_density


def gaussian_log_density(mean, log_std, x):
    """Diagonal-Gaussian log pdf of constant x, differentiable in (mean, log_std)."""
    mean = as_tensor(mean)
    log_std = as_tensor(log_std)
    x = as_tensor(x)
    z = (x - mean) * (-log_std).exp()
    k = mean.data.size if mean.data.ndim <= 1 else mean.data.shape[-1]
    quad = (z * z).sum(axis=-1) if mean.data.ndim > 1 else (z * z).sum()
    log_sig = log_std.sum(axis=-1) if mean.data.ndim > 1 else log_std.sum()
    return quad * -0.5 - log_sig - 0.5 * LOG_2PI * k


def free_energy(expected_utility, kl_term, beta):
    """Utility penalized by information cost: E[U] - KL / beta."""
    if beta <= 0.0:
        raise DomainError("beta must be positive")
    return expected_utility - kl_term / beta


def mutual_information(joint_counts):
    """Plug-in mutual information in bits from a 2-D count matrix."""
    counts = np.asarray(joint_counts, dtype=np.float64)
    if counts.ndim != 2:
        raise DomainError("joint_counts must be a 2-D matrix")
    if np.any(counts < 0.0):
        raise DomainError("counts must be non-negative")
    total = counts.sum()
    if total <= 0.0:
        raise DomainError("all-zero count matrix")
    joint = counts / total
    row = joint.sum(axis=1, keepdims=True)
    col = joint.sum(axis=0, keepdims=True)
    mask = joint > 0.0
    ratio = joint[mask] / (row @ col)[mask]
    return float((joint[mask] * np.log2(ratio)).sum())


def update_marginal_prior(prior, batch_posteriors, rate):
    """Move the prior toward the batch-mean posterior by `rate`."""
    if not 0.0 < rate <= 1.0:
        raise DomainError("rate must lie in (0, 1]")
    if not batch_posteriors:
        return prior
    mean = np.mean([p.probs for p in batch_posteriors], axis=0)
    mixed = (1.0 - rate) * prior.probs + rate * mean
    return Categorical(mixed / mixed.sum())
