"""Semi-supervised training objective.

Maximizes   sum_u ELBO(x_u)  -  alpha * sum_l (H_p + H_q)   where H_p and H_q
are categorical cross-entropies of the generative and inference classifiers.
The cross-entropies are treated as functions of the classifier-head parameters
only: every input feeding the two heads is detached, so gradients from
labelled data reach exactly theta_y and phi_y.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor

from .errors import ConfigError, DimensionError, NumericalError
from .model import CaGeM
from .nets import BatchNormMode, one_hot
from .distributions import gaussian_rsample


@dataclass
class LossBreakdown:
    """Objective terms in the sum-over-datapoints convention."""

    elbo_sum: float
    ce_p: float
    ce_q: float
    alpha: float
    total: float


def compute_alpha(beta: float, n_unlabelled: int, n_labelled: int) -> float:
    """Cross-entropy weight balancing the ELBO and classifier terms."""
    if n_labelled < 1:
        raise ConfigError("compute_alpha requires at least one labelled point")
    if beta <= 0:
        raise ConfigError("beta must be positive")
    return beta * (n_unlabelled + n_labelled) / n_labelled


def _classifier_probs(model: CaGeM, x: Tensor, S: int,
                      generator: Optional[torch.Generator]):
    """Monte Carlo class probabilities (q_hat, p_hat), grads only in the heads.

    Latent samples are drawn without gradient tracking and fed to the heads as
    constants; batch-norm runs frozen throughout.
    """
    cfg = model.config
    dt = model.dtype
    k = cfg.n_clusters
    mode = BatchNormMode.EVAL_FROZEN
    b = x.shape[0]
    q_acc = torch.zeros(b, k, dtype=dt, device=x.device)
    p_acc = torch.zeros(b, k, dtype=dt, device=x.device)
    for _ in range(S):
        with torch.no_grad():
            qz1 = model.q_z1(x, mode)
            z1 = gaussian_rsample(
                qz1, torch.randn(b, cfg.z1_dim, dtype=dt, generator=generator,
                                 device=x.device))
        w = model.q_y([z1, x], mode).probs  # grads reach phi_y only
        q_acc = q_acc + w
        pi_sum = torch.zeros(b, k, dtype=dt, device=x.device)
        for c in range(k):
            y = one_hot(torch.full((b,), c, dtype=torch.long, device=x.device), k,
                        dtype=dt, device=x.device)
            with torch.no_grad():
                qz2 = model.q_z2([x, y, z1], mode)
                z2c = gaussian_rsample(
                    qz2, torch.randn(b, cfg.z2_dim, dtype=dt, generator=generator,
                                     device=x.device))
            pi = model.p_y(z2c, mode).probs  # grads reach theta_y only
            pi_sum = pi_sum + w[:, c:c + 1] * pi
        p_acc = p_acc + pi_sum
    return q_acc / S, p_acc / S


def labelled_cross_entropies(model: CaGeM, x_l: Tensor, y_l: Tensor, S: int = 1,
                             generator: Optional[torch.Generator] = None):
    """Per-example mean cross-entropies (ce_p, ce_q) with restricted gradients."""
    y_l = torch.as_tensor(y_l, dtype=torch.long, device=x_l.device)
    k = model.config.n_clusters
    if torch.any(y_l < 0) or torch.any(y_l >= k):
        raise DimensionError(f"label out of range [0, {k})")
    q_hat, p_hat = _classifier_probs(model, x_l.to(model.dtype), S, generator)
    idx = y_l.unsqueeze(1)
    ce_q = -q_hat.gather(1, idx).squeeze(1).clamp_min(1e-12).log().mean()
    ce_p = -p_hat.gather(1, idx).squeeze(1).clamp_min(1e-12).log().mean()
    return ce_p, ce_q


def training_step(model, optimizer, x_u: Tensor,
                  labelled: Optional[tuple] = None,
                  tau: float = 1.0, beta: float = 0.1,
                  n_unlabelled: int = 0, n_labelled: int = 0,
                  generator: Optional[torch.Generator] = None,
                  classifier_samples: int = 1,
                  grad_clip: float = 0.0) -> LossBreakdown:
    """One ascent step on the objective.

    Batch-norm statistics are collected during the unlabelled ELBO forward
    only; the labelled cross-entropy forwards run with frozen statistics.
    A non-finite loss aborts the step before any parameter is touched.
    """
    n_unlabelled = n_unlabelled or x_u.shape[0]
    terms = model.elbo(x_u, tau=tau, mode=BatchNormMode.TRAIN_COLLECT,
                       generator=generator)
    mean_elbo = terms.elbo.mean()

    alpha = 0.0
    ce_p = torch.zeros((), dtype=model.dtype)
    ce_q = torch.zeros((), dtype=model.dtype)
    if labelled is not None and beta > 0:
        x_l, y_l = labelled
        n_labelled = n_labelled or x_l.shape[0]
        alpha = compute_alpha(beta, n_unlabelled, n_labelled)
        ce_p, ce_q = labelled_cross_entropies(model, x_l, y_l,
                                              S=classifier_samples,
                                              generator=generator)

    # Per-example means rescaled so the optimized quantity is the sum-form
    # objective divided by the constant N_u.
    loss = -(mean_elbo - (alpha * n_labelled / n_unlabelled) * (ce_p + ce_q))
    if not torch.isfinite(loss):
        for name, value in (("elbo", mean_elbo), ("ce_p", ce_p), ("ce_q", ce_q)):
            if not torch.isfinite(value):
                raise NumericalError(f"non-finite loss: term '{name}'")
        raise NumericalError("non-finite loss")

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()

    elbo_sum = mean_elbo.item() * n_unlabelled
    ce_p_sum = ce_p.item() * n_labelled
    ce_q_sum = ce_q.item() * n_labelled
    return LossBreakdown(
        elbo_sum=elbo_sum, ce_p=ce_p_sum, ce_q=ce_q_sum, alpha=alpha,
        total=elbo_sum - alpha * (ce_p_sum + ce_q_sum),
    )
