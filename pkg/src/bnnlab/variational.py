"""Gaussian mean-field variational machinery.

Each stochastic weight tensor is a diagonal Gaussian q(w) = N(mu, sigma^2)
with sigma = softplus(rho) so sigma stays positive under unconstrained
optimization.  The prior is a zero-mean isotropic Gaussian N(0, sigma_p^2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import RandomStream
from .tensor import Tensor, as_tensor, log, log_softmax, mul, softplus, sub, tensor_mean, tensor_sum

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    """Zero-mean isotropic Gaussian prior over weights."""

    sigma_p: float = 0.15

    def __post_init__(self):
        if not self.sigma_p > 0:
            raise ValueError(f"prior sigma must be positive, got {self.sigma_p}")


class VariationalParam:
    """Posterior factor for one weight tensor: trainable mu and rho leaves."""

    __slots__ = ("mu", "rho")

    def __init__(self, mu, rho):
        self.mu = as_tensor(mu)
        self.rho = as_tensor(rho)
        if self.mu.shape != self.rho.shape:
            raise ValueError(f"mu/rho shape mismatch: {self.mu.shape} vs {self.rho.shape}")
        self.mu.requires_grad = True
        self.rho.requires_grad = True

    @property
    def shape(self):
        return self.mu.shape

    def sigma_values(self) -> np.ndarray:
        return np.logaddexp(0.0, self.rho.data)


def rho_for_sigma(sigma: float) -> float:
    """Inverse softplus: the rho that makes softplus(rho) == sigma."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return float(np.log(np.expm1(sigma)))


def sigma_from_rho(rho) -> Tensor:
    """Differentiable positive scale, sigma = softplus(rho)."""
    return softplus(rho)


def sample_weights(param: VariationalParam, noise) -> Tensor:
    """Reparameterized draw w = mu + softplus(rho) * noise.

    noise carries no gradient; mu and rho stay differentiable through the
    sample.
    """
    noise = as_tensor(noise).detach()
    if noise.shape != param.shape:
        raise ValueError(f"noise shape {noise.shape} does not match weights {param.shape}")
    return param.mu + mul(sigma_from_rho(param.rho), noise)


def kl_gaussian(param: VariationalParam, prior: PriorSpec) -> Tensor:
    """Closed-form KL(q || prior), summed over tensor elements.

    Per element: log(sigma_p / sigma) + (sigma^2 + mu^2) / (2 sigma_p^2) - 1/2.
    Differentiable in mu and rho.
    """
    sigma = sigma_from_rho(param.rho)
    sp2 = 2.0 * prior.sigma_p * prior.sigma_p
    term = sub(math.log(prior.sigma_p), log(sigma))
    term = term + (mul(sigma, sigma) + mul(param.mu, param.mu)) / sp2
    return tensor_sum(term - 0.5)


def mc_kl(
    param: VariationalParam, prior: PriorSpec, n_samples: int, seed: int
) -> tuple[float, float]:
    """Monte Carlo KL estimate with its standard error.

    Draws w ~ q and averages log q(w) - log p(w); the closed form must sit
    within a few standard errors of this, which is the independent check used
    by the tests.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    mu = param.mu.data.reshape(-1)
    sigma = param.sigma_values().reshape(-1)
    stream = RandomStream(seed)
    eps = stream.normal((n_samples, mu.size))
    w = mu + sigma * eps
    log_q = -_HALF_LOG_2PI - np.log(sigma) - 0.5 * eps * eps
    log_p = -_HALF_LOG_2PI - math.log(prior.sigma_p) - 0.5 * (w / prior.sigma_p) ** 2
    per_draw = (log_q - log_p).sum(axis=1)
    estimate = float(per_draw.mean())
    stderr = float(per_draw.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else float("inf")
    return estimate, stderr


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch; labels are class indices."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"logits must be [batch, classes], got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if n == 0:
        raise ValueError("cross_entropy: empty batch")
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} out of range for {c} classes")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return -tensor_mean(tensor_sum(mul(log_softmax(logits), onehot), axis=1))


def elbo_loss(logits: Tensor, labels: np.ndarray, kl_total, beta: float) -> Tensor:
    """Training objective: cross-entropy plus beta-weighted KL."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return cross_entropy(logits, labels) + mul(beta, as_tensor(kl_total))
