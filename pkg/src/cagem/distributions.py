"""Exact log-densities, reparameterized samplers and analytic divergences.

All densities are summed (not averaged) over the last axis, so values are in
nats per example. Every function accepts a trailing feature axis and arbitrary
leading batch axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import DimensionError

LOG_STD_MIN = -8.0
LOG_STD_MAX = 8.0
BERNOULLI_EPS = 1e-6
PROB_FLOOR = 1e-12

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GaussianParams:
    """Diagonal Gaussian: per-dimension mean and natural-log standard deviation."""

    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise DimensionError(
                f"mean shape {tuple(self.mean.shape)} != log_std shape "
                f"{tuple(self.log_std.shape)}"
            )
        self.log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    @property
    def std(self) -> Tensor:
        return self.log_std.exp()


@dataclass
class BernoulliParams:
    """Independent Bernoulli activation probabilities, clamped away from {0,1}."""

    mean: Tensor

    def __post_init__(self):
        self.mean = self.mean.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)


@dataclass
class CategoricalParams:
    """Point on the K-simplex along the last axis."""

    probs: Tensor

    def __post_init__(self):
        total = self.probs.sum(-1)
        if not torch.all((total - 1.0).abs() < 1e-6):
            raise DimensionError("categorical probs do not sum to 1 within 1e-6")
        if not torch.all(self.probs >= 0):
            raise DimensionError("categorical probs contain negative entries")

    @property
    def n_classes(self) -> int:
        return self.probs.shape[-1]


def _check_last_dim(x: Tensor, p_shape: torch.Size, what: str) -> None:
    if x.shape[-1] != p_shape[-1]:
        raise DimensionError(
            f"{what}: input width {x.shape[-1]} != parameter width {p_shape[-1]}"
        )


def gaussian_log_prob(x: Tensor, p: GaussianParams) -> Tensor:
    """log N(x; mean, diag(exp(log_std)^2)), summed over the last axis."""
    _check_last_dim(x, p.mean.shape, "gaussian_log_prob")
    z = (x - p.mean) / p.std
    return (-_HALF_LOG_2PI - p.log_std - 0.5 * z * z).sum(-1)


def gaussian_rsample(p: GaussianParams, noise: Tensor) -> Tensor:
    """mean + std * noise; differentiable in the parameters."""
    _check_last_dim(noise, p.mean.shape, "gaussian_rsample")
    return p.mean + p.std * noise


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Analytic KL[q || p] between diagonal Gaussians, summed over the last axis."""
    _check_last_dim(q.mean, p.mean.shape, "gaussian_kl")
    var_ratio = (2.0 * (q.log_std - p.log_std)).exp()
    delta = (q.mean - p.mean) / p.std
    return (p.log_std - q.log_std + 0.5 * (var_ratio + delta * delta) - 0.5).sum(-1)


def standard_normal_params(shape, dtype=torch.float64, device=None) -> GaussianParams:
    zeros = torch.zeros(shape, dtype=dtype, device=device)
    return GaussianParams(mean=zeros, log_std=zeros.clone())


def bernoulli_log_prob(x: Tensor, p: BernoulliParams) -> Tensor:
    """log-likelihood of binary x under independent Bernoulli factors."""
    _check_last_dim(x, p.mean.shape, "bernoulli_log_prob")
    if not torch.all((x == 0) | (x == 1)):
        raise DimensionError("bernoulli_log_prob: x must be {0,1}-valued")
    return (x * p.mean.log() + (1.0 - x) * (1.0 - p.mean).log()).sum(-1)


def categorical_log_prob(c, p: CategoricalParams) -> Tensor:
    """log probs[c]; c is an integer or an integer tensor of batch shape."""
    c = torch.as_tensor(c, dtype=torch.long, device=p.probs.device)
    k = p.n_classes
    if torch.any(c < 0) or torch.any(c >= k):
        raise DimensionError(f"class index out of range [0, {k})")
    probs = p.probs.clamp_min(PROB_FLOOR)
    idx = c.expand(probs.shape[:-1]) if c.dim() == 0 else c
    return probs.gather(-1, idx.unsqueeze(-1)).squeeze(-1).log()
