"""Class-probability estimators and error rate.

Two classifiers exist: the inference-side q(y|x), obtained by integrating the
first stochastic layer out by Monte Carlo, and the generative-side p(y|x),
a cascade whose class probabilities are weighted by the inference classifier.
"""
from __future__ import annotations

from typing import Optional

import torch
from torch import Tensor

from .distributions import CategoricalParams, gaussian_rsample
from .errors import ConfigError, DimensionError
from .model import CaGeM
from .nets import BatchNormMode, one_hot

EVAL_SAMPLES_DEFAULT = 100


@torch.no_grad()
def q_classifier(model: CaGeM, x: Tensor, S: int = EVAL_SAMPLES_DEFAULT,
                 generator: Optional[torch.Generator] = None) -> CategoricalParams:
    """(1/S) sum_s pi_phi(z1^s, x) with z1^s ~ q(z1|x)."""
    if S < 1:
        raise ConfigError("S must be >= 1")
    x = x.to(model.dtype)
    mode = BatchNormMode.EVAL_FROZEN
    cfg = model.config
    dt = model.dtype
    acc = torch.zeros(x.shape[0], cfg.n_clusters, dtype=dt, device=x.device)
    qz1 = model.q_z1(x, mode)
    for _ in range(S):
        z1 = gaussian_rsample(qz1, torch.randn(
            x.shape[0], cfg.z1_dim, dtype=dt, generator=generator, device=x.device))
        acc += model.q_y([z1, x], mode).probs
    return CategoricalParams(probs=acc / S)


@torch.no_grad()
def p_classifier(model: CaGeM, x: Tensor, S: int = EVAL_SAMPLES_DEFAULT,
                 generator: Optional[torch.Generator] = None) -> CategoricalParams:
    """Cascade classifier: average of sum_c q(c|z1,x) pi_theta(z2^c)."""
    if S < 1:
        raise ConfigError("S must be >= 1")
    x = x.to(model.dtype)
    mode = BatchNormMode.EVAL_FROZEN
    cfg = model.config
    dt = model.dtype
    b, k = x.shape[0], cfg.n_clusters
    acc = torch.zeros(b, k, dtype=dt, device=x.device)
    qz1 = model.q_z1(x, mode)
    for _ in range(S):
        z1 = gaussian_rsample(qz1, torch.randn(
            b, cfg.z1_dim, dtype=dt, generator=generator, device=x.device))
        w = model.q_y([z1, x], mode).probs
        for c in range(k):
            y = one_hot(torch.full((b,), c, dtype=torch.long, device=x.device), k,
                        dtype=dt, device=x.device)
            qz2 = model.q_z2([x, y, z1], mode)
            z2c = gaussian_rsample(qz2, torch.randn(
                b, cfg.z2_dim, dtype=dt, generator=generator, device=x.device))
            acc += w[:, c:c + 1] * model.p_y(z2c, mode).probs
    return CategoricalParams(probs=acc / S)


def error_rate(output: CategoricalParams, labels) -> float:
    """Fraction misclassified under argmax; ties break toward the lowest index."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() == 0:
        raise DimensionError("error_rate is undefined on an empty set")
    predictions = output.probs.argmax(dim=-1)
    if predictions.shape != labels.shape:
        raise DimensionError("prediction/label count mismatch")
    return (predictions != labels).double().mean().item()
