"""Feed-forward building blocks producing distribution parameters.

Every trunk is a stack of Linear -> batch-norm -> ReLU layers; heads attach
affine output maps (and a squashing where the family needs one). Conditioning
on several variables is feature concatenation, with discrete classes passed
as one-hot vectors.
"""
from __future__ import annotations

from enum import Enum, auto
from typing import Sequence

import torch
from torch import Tensor, nn

from .distributions import BernoulliParams, CategoricalParams, GaussianParams
from .errors import DegenerateBatchError, DimensionError


class BatchNormMode(Enum):
    # TRAIN_COLLECT normalizes with batch statistics and updates the running
    # estimates; EVAL_FROZEN uses the running estimates and never mutates them.
    TRAIN_COLLECT = auto()
    EVAL_FROZEN = auto()


def one_hot(c, n_classes: int, dtype=torch.float64, device=None) -> Tensor:
    c = torch.as_tensor(c, dtype=torch.long, device=device)
    if torch.any(c < 0) or torch.any(c >= n_classes):
        raise DimensionError(f"class index out of range [0, {n_classes})")
    return nn.functional.one_hot(c, n_classes).to(dtype)


def _init_affine(layer: nn.Linear) -> None:
    nn.init.xavier_uniform_(layer.weight)
    nn.init.zeros_(layer.bias)


class DenseStack(nn.Module):
    """Linear -> batch-norm -> ReLU blocks; an empty width list is the identity."""

    def __init__(self, in_dim: int, widths: Sequence[int], batch_norm: bool = True,
                 momentum: float = 0.9):
        super().__init__()
        self.in_dim = in_dim
        self.widths = tuple(widths)
        self.batch_norm = batch_norm
        self.linears = nn.ModuleList()
        self.norms = nn.ModuleList()
        prev = in_dim
        for w in self.widths:
            lin = nn.Linear(prev, w)
            _init_affine(lin)
            self.linears.append(lin)
            if batch_norm:
                # torch momentum is the weight of the new batch statistic, so
                # 0.1 here means the running estimate retains 0.9 per update.
                self.norms.append(nn.BatchNorm1d(w, momentum=1.0 - momentum))
            prev = w

    @property
    def out_dim(self) -> int:
        return self.widths[-1] if self.widths else self.in_dim

    def forward(self, x: Tensor, mode: BatchNormMode) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"dense_forward: input width {x.shape[-1]} != expected {self.in_dim}"
            )
        collect = mode is BatchNormMode.TRAIN_COLLECT
        if collect and self.batch_norm and self.widths and x.shape[0] < 2:
            raise DegenerateBatchError(
                "batch-norm statistics need a batch of at least 2 in TRAIN_COLLECT"
            )
        h = x
        for i, lin in enumerate(self.linears):
            h = lin(h)
            if self.batch_norm:
                bn = self.norms[i]
                bn.train(collect)
                h = bn(h)
            h = torch.relu(h)
        return h


def _concat_inputs(inputs) -> Tensor:
    if isinstance(inputs, Tensor):
        return inputs
    return torch.cat(list(inputs), dim=-1)


class GaussianHead(nn.Module):
    """Trunk plus two affine maps producing mean and log-std of a diagonal Gaussian."""

    def __init__(self, in_dim: int, widths: Sequence[int], out_dim: int,
                 batch_norm: bool = True):
        super().__init__()
        self.trunk = DenseStack(in_dim, widths, batch_norm=batch_norm)
        self.out_dim = out_dim
        self.mean = nn.Linear(self.trunk.out_dim, out_dim)
        self.log_std = nn.Linear(self.trunk.out_dim, out_dim)
        _init_affine(self.mean)
        _init_affine(self.log_std)

    def forward(self, inputs, mode: BatchNormMode) -> GaussianParams:
        h = self.trunk(_concat_inputs(inputs), mode)
        return GaussianParams(mean=self.mean(h), log_std=self.log_std(h))


class BernoulliHead(nn.Module):
    """Trunk plus sigmoid-squashed affine output."""

    def __init__(self, in_dim: int, widths: Sequence[int], out_dim: int,
                 batch_norm: bool = True):
        super().__init__()
        self.trunk = DenseStack(in_dim, widths, batch_norm=batch_norm)
        self.out_dim = out_dim
        self.logits = nn.Linear(self.trunk.out_dim, out_dim)
        _init_affine(self.logits)

    def forward(self, inputs, mode: BatchNormMode) -> BernoulliParams:
        h = self.trunk(_concat_inputs(inputs), mode)
        return BernoulliParams(mean=torch.sigmoid(self.logits(h)))


class CategoricalHead(nn.Module):
    """Trunk plus softmax-squashed affine output."""

    def __init__(self, in_dim: int, widths: Sequence[int], n_classes: int,
                 batch_norm: bool = True):
        super().__init__()
        self.trunk = DenseStack(in_dim, widths, batch_norm=batch_norm)
        self.n_classes = n_classes
        self.logits = nn.Linear(self.trunk.out_dim, n_classes)
        _init_affine(self.logits)

    def forward(self, inputs, mode: BatchNormMode) -> CategoricalParams:
        h = self.trunk(_concat_inputs(inputs), mode)
        return CategoricalParams(probs=torch.softmax(self.logits(h), dim=-1))
