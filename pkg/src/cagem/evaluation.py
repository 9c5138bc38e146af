"""Importance-weighted likelihood bounds, activity diagnostics, latent export.

Metrics are reported in nats per example. Importance samples are evaluated in
chunks with a running stable log-sum-exp so large L fits in memory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, DegenerateDataError, NumericalError
from .model import BaseModel, CaGeM, VAE
from .nets import BatchNormMode, one_hot


@dataclass
class IWEstimate:
    bound: float          # mean over the batch, nats per example
    L: int
    chunk_size: int
    per_example: np.ndarray


@dataclass
class ActivityReport:
    """Per-layer activity in nats; near-zero KL flags an inactive layer."""

    kl_z2: float
    kl_z1: float


@torch.no_grad()
def iw_bound(model: BaseModel, x: Tensor, L: int,
             generator: Optional[torch.Generator] = None,
             chunk_size: int = 100) -> IWEstimate:
    """F_L = log mean of L importance weights, computed with running LSE."""
    if L < 1:
        raise ConfigError("L must be >= 1")
    x = x.to(model.dtype)
    mode = BatchNormMode.EVAL_FROZEN
    running = torch.full((x.shape[0],), -torch.inf, dtype=model.dtype,
                         device=x.device)
    done = 0
    while done < L:
        n = min(chunk_size, L - done)
        logs = []
        for _ in range(n):
            d = model.forward_detail(x, mode, generator=generator)
            logs.append(model.log_weights(d))
        chunk = torch.stack(logs, dim=0)  # [n, B]
        if not torch.isfinite(chunk).all():
            raise NumericalError("non-finite importance weight")
        running = torch.logaddexp(running, torch.logsumexp(chunk, dim=0))
        done += n
    per_example = (running - torch.log(torch.tensor(float(L)))).cpu().numpy()
    return IWEstimate(bound=float(per_example.mean()), L=L, chunk_size=chunk_size,
                      per_example=per_example)


@torch.no_grad()
def elbo_decompose(model: BaseModel, x: Tensor,
                   generator: Optional[torch.Generator] = None,
                   noise: Optional[dict] = None):
    """Returns (ActivityReport, term table).

    The table entries partition the single-sample ELBO at temperature 1:
    reconstruction + z1_terms + z2_log_ratio == elbo on the same noise.
    The ActivityReport carries the analytic Gaussian KLs instead (class-weighted
    for the cluster model), which are the per-layer activity diagnostics.
    """
    x = x.to(model.dtype)
    mode = BatchNormMode.EVAL_FROZEN
    d = model.forward_detail(x, mode, generator=generator, noise=noise)
    if isinstance(model, VAE):
        recon = d.log_px
        z2_ratio = d.log_pz2 - d.log_qz2
        z1_terms = d.log_pz1 - d.log_qz1
        kl_z2 = d.kl_z2.mean().item()
        kl_z1 = d.kl_z1.mean().item()
    else:
        w = d.class_weights
        log_w = w.clamp_min(1e-12).log()
        recon = (w * d.log_px).sum(1)
        z2_ratio = (w * (d.log_pz2 - d.log_qz2)).sum(1)
        z1_terms = (w * (d.log_pz1 + d.log_py - log_w)).sum(1) - d.log_qz1
        kl_z2 = (w * d.kl_z2).sum(1).mean().item()
        kl_z1 = (w * d.kl_z1).sum(1).mean().item()
    table = {
        "reconstruction": recon.mean().item(),
        "z1_terms": z1_terms.mean().item(),
        "z2_log_ratio": z2_ratio.mean().item(),
        "elbo": (recon + z1_terms + z2_ratio).mean().item(),
    }
    return ActivityReport(kl_z2=kl_z2, kl_z1=kl_z1), table


def pca_project(matrix: np.ndarray, n_components: int = 2) -> np.ndarray:
    """Exact PCA via SVD of the centered matrix."""
    if matrix.shape[0] < 2:
        raise DegenerateDataError("PCA needs at least 2 rows")
    centered = matrix - matrix.mean(axis=0, keepdims=True)
    if not np.any(np.abs(centered) > 1e-12):
        raise DegenerateDataError("PCA input has zero variance (identical rows)")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:n_components].T
    if proj.shape[1] < n_components:  # latent narrower than requested components
        proj = np.pad(proj, ((0, 0), (0, n_components - proj.shape[1])))
    return proj


@torch.no_grad()
def latent_export(model: BaseModel, x: Tensor, labels=None) -> dict:
    """Posterior means of both latent layers plus their 2-d PCA projections.

    For the cluster model the z2 mean is averaged over classes under the
    inference classifier evaluated at the z1 posterior mean.
    """
    x = x.to(model.dtype)
    mode = BatchNormMode.EVAL_FROZEN
    z1_mean = model.q_z1(x, mode).mean
    if isinstance(model, VAE):
        z2_mean = model.q_z2(z1_mean, mode).mean
    else:
        k = model.config.n_clusters
        w = model.q_y([z1_mean, x], mode).probs
        z2_mean = torch.zeros(x.shape[0], model.config.z2_dim, dtype=model.dtype)
        for c in range(k):
            y = one_hot(torch.full((x.shape[0],), c, dtype=torch.long), k,
                        dtype=model.dtype)
            z2_mean += w[:, c:c + 1] * model.q_z2([x, y, z1_mean], mode).mean
    z1_np = z1_mean.cpu().numpy()
    z2_np = z2_mean.cpu().numpy()
    out = {
        "z1": z1_np, "z2": z2_np,
        "z1_pca": pca_project(z1_np), "z2_pca": pca_project(z2_np),
    }
    if labels is not None:
        out["labels"] = np.asarray(labels)
    return out


def write_latent_table(path, export: dict) -> None:
    """Tab-separated table: id, label?, z coordinates, pc1, pc2 per layer."""
    z1, z2 = export["z1"], export["z2"]
    labels = export.get("labels")
    header = ["id"]
    if labels is not None:
        header.append("label")
    header += [f"z1_{i}" for i in range(z1.shape[1])]
    header += [f"z2_{i}" for i in range(z2.shape[1])]
    header += ["z1_pc1", "z1_pc2", "z2_pc1", "z2_pc2"]
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for i in range(z1.shape[0]):
            row = [str(i)]
            if labels is not None:
                row.append(str(int(labels[i])))
            row += [repr(float(v)) for v in z1[i]]
            row += [repr(float(v)) for v in z2[i]]
            row += [repr(float(export["z1_pca"][i][0])),
                    repr(float(export["z1_pca"][i][1])),
                    repr(float(export["z2_pca"][i][0])),
                    repr(float(export["z2_pca"][i][1]))]
            fh.write("\t".join(row) + "\n")


class MetricsLogger:
    """Append-only line-delimited metric records."""

    def __init__(self, path, run_id: str, seed: int):
        self.path = path
        self.run_id = run_id
        self.seed = seed

    def log(self, epoch: int, metric: str, value: float, L: Optional[int] = None):
        record = {"run_id": self.run_id, "epoch": epoch, "metric": metric,
                  "value": float(value), "L": L, "seed": self.seed}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
