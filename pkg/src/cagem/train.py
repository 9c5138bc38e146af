"""Training orchestration: schedules, checkpointing, periodic evaluation.

Run directory layout:

    <out>/config.json      config + schedule + seeds + labelled indices
    <out>/metrics.jsonl    line-delimited metric records
    <out>/last.pt          full training state (params, optimizer, RNG, epoch)
    <out>/best.pt          parameters at the best validation bound
    <out>/samples.pgm      sample grid from the final model
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import evaluation, objective
from .data import Dataset, LabelledSubset, binarize
from .errors import ConfigError, NumericalError
from .images import to_grid, write_pgm
from .model import (
    DTYPE,
    BaseModel,
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)


@dataclass
class Schedule:
    """Learning-rate decay, temperature warm-up and loop sizes."""

    epochs: int
    batch_size: int = 256
    labelled_batch_size: int = 64
    lr0: float = 1e-3
    lr_decay: float = 0.75
    lr_decay_every: int = 50
    warmup_epochs: int = 100
    eval_every: int = 5
    eval_iw_samples: int = 1
    eval_batch_size: int = 2048
    grad_clip: float = 0.0  # global gradient-norm bound; 0 disables

    def __post_init__(self):
        if self.lr0 <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("invalid learning-rate schedule")

    def learning_rate(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay ** (epoch // self.lr_decay_every)

    def temperature(self, epoch: int) -> float:
        if self.warmup_epochs <= 0:
            return 1.0
        return min(1.0, epoch / self.warmup_epochs)


def _evaluate_bound(model: BaseModel, dataset: Dataset, L: int, seed: int,
                    batch_size: int) -> float:
    """Mean F_L over a split, on its own deterministic RNG stream."""
    gen = torch.Generator().manual_seed(seed)
    bounds, n = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        chunk = torch.as_tensor(dataset.images[start:start + batch_size], dtype=DTYPE)
        x = binarize(chunk, gen)
        est = evaluation.iw_bound(model, x, L, generator=gen)
        bounds += est.per_example.sum()
        n += x.shape[0]
    return bounds / n


def _training_state(model, opt, gen, epoch, best_val, seed, beta,
                    schedule, labelled_indices, run_id) -> dict:
    return {
        "epoch": epoch,
        "optimizer": opt.state_dict(),
        "rng": gen.get_state(),
        "best_val": best_val,
        "seed": seed,
        "beta": beta,
        "schedule": asdict(schedule),
        "labelled_indices": None if labelled_indices is None
        else np.asarray(labelled_indices).tolist(),
        "run_id": run_id,
    }


def run_training(config: ModelConfig, schedule: Schedule, datasets: dict,
                 labelled: Optional[LabelledSubset] = None, seed: int = 0,
                 out_dir="run", beta: float = 0.1, run_id: Optional[str] = None,
                 resume_from=None, final_iw: int = 0) -> dict:
    """Full training loop; returns summary dict with checkpoint paths."""
    train, valid = datasets["train"], datasets["valid"]
    if train.x_dim != config.x_dim:
        raise ConfigError(
            f"dataset x_dim {train.x_dim} != config x_dim {config.x_dim}")
    if config.variant == "vae" and labelled is not None:
        raise ConfigError("the vae variant takes no labelled data")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_id = run_id or f"{config.variant}-seed{seed}"

    labelled_idx = None if labelled is None else np.asarray(labelled.indices)
    torch.manual_seed(seed)  # weight initialization
    model = build_model(config)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr0,
                           betas=(0.9, 0.999), eps=1e-8)
    gen = torch.Generator().manual_seed(seed)
    start_epoch = 0
    best_val = -np.inf

    if resume_from is not None:
        model, state = load_checkpoint(resume_from)
        if model.config.to_dict() != config.to_dict():
            raise ConfigError("resume rejected: checkpoint config differs")
        opt = torch.optim.Adam(model.parameters(), lr=schedule.lr0,
                               betas=(0.9, 0.999), eps=1e-8)
        opt.load_state_dict(state["optimizer"])
        gen.set_state(state["rng"])
        start_epoch = state["epoch"]
        best_val = state["best_val"]
        seed = state["seed"]
        beta = state["beta"]
        if state["labelled_indices"] is not None:
            labelled_idx = np.asarray(state["labelled_indices"])

    with open(out / "config.json", "w") as fh:
        json.dump({
            "config": config.to_dict(), "schedule": asdict(schedule),
            "seed": seed, "beta": beta, "run_id": run_id,
            "labelled_indices": None if labelled_idx is None
            else labelled_idx.tolist(),
        }, fh, indent=2)

    logger = evaluation.MetricsLogger(out / "metrics.jsonl", run_id, seed)

    # The unlabelled set is the training split minus the labelled indices.
    mask = np.ones(len(train), dtype=bool)
    if labelled_idx is not None:
        mask[labelled_idx] = False
        x_l_all = train.images[labelled_idx]
        y_l_all = train.labels[labelled_idx]
    unlabelled_images = train.images[mask]
    n_u, n_l = unlabelled_images.shape[0], 0 if labelled_idx is None else len(labelled_idx)

    for epoch in range(start_epoch, schedule.epochs):
        lr = schedule.learning_rate(epoch)
        tau = schedule.temperature(epoch)
        for group in opt.param_groups:
            group["lr"] = lr

        perm = torch.randperm(n_u, generator=gen).numpy()
        if n_l:
            l_perm = torch.randperm(n_l, generator=gen).numpy()
        l_cursor = 0
        elbo_acc, n_seen = 0.0, 0
        for start in range(0, n_u, schedule.batch_size):
            idx = perm[start:start + schedule.batch_size]
            if idx.size < 2:  # batch-norm needs at least 2 examples
                continue
            x_u = binarize(torch.as_tensor(unlabelled_images[idx], dtype=DTYPE), gen)
            labelled_batch = None
            if n_l:
                take = min(schedule.labelled_batch_size, n_l)
                picked = [l_perm[(l_cursor + j) % n_l] for j in range(take)]
                l_cursor += take
                x_l = binarize(torch.as_tensor(x_l_all[picked], dtype=DTYPE), gen)
                labelled_batch = (x_l, torch.as_tensor(y_l_all[picked]))
            try:
                breakdown = objective.training_step(
                    model, opt, x_u, labelled=labelled_batch, tau=tau, beta=beta,
                    n_unlabelled=n_u, n_labelled=n_l, generator=gen,
                    grad_clip=schedule.grad_clip)
            except NumericalError:
                save_checkpoint(out / "crash.pt", model, extra=_training_state(
                    model, opt, gen, epoch, best_val, seed, beta, schedule,
                    labelled_idx, run_id))
                logger.log(epoch, "crash", float("nan"))
                raise
            elbo_acc += breakdown.elbo_sum / n_u * idx.size
            n_seen += idx.size

        logger.log(epoch, "lr", lr)
        logger.log(epoch, "tau", tau)
        logger.log(epoch, "train_elbo", elbo_acc / max(n_seen, 1))

        last_epoch = epoch == schedule.epochs - 1
        if (epoch + 1) % schedule.eval_every == 0 or last_epoch:
            val_f1 = _evaluate_bound(model, valid, schedule.eval_iw_samples,
                                     seed * 100003 + epoch, schedule.eval_batch_size)
            logger.log(epoch, "valid_F", val_f1, L=schedule.eval_iw_samples)
            if val_f1 > best_val:
                best_val = val_f1
                save_checkpoint(out / "best.pt", model,
                                extra={"epoch": epoch, "valid_F": val_f1,
                                       "seed": seed, "run_id": run_id})

        save_checkpoint(out / "last.pt", model, extra=_training_state(
            model, opt, gen, epoch + 1, best_val, seed, beta, schedule,
            labelled_idx, run_id))

    result = {"best_checkpoint": str(out / "best.pt"),
              "last_checkpoint": str(out / "last.pt"),
              "best_valid_F": best_val, "run_id": run_id}

    grid = model.generate(64, generator=torch.Generator().manual_seed(seed + 7))
    side = int(round(config.x_dim ** 0.5))
    if side * side == config.x_dim:
        write_pgm(out / "samples.pgm", to_grid(grid.means.numpy(), side))

    if final_iw > 0 and "test" in datasets:
        test_f = _evaluate_bound(model, datasets["test"], final_iw,
                                 seed * 999983 + 1, schedule.eval_batch_size)
        logger.log(schedule.epochs - 1, "test_F", test_f, L=final_iw)
        result["test_F"] = test_f
    return result


def resume(checkpoint_path, datasets: dict, out_dir="run_resumed",
           epochs: Optional[int] = None, final_iw: int = 0) -> dict:
    """Continue a run from a `last.pt` training checkpoint."""
    model, state = load_checkpoint(checkpoint_path)
    if "optimizer" not in state:
        raise ConfigError("checkpoint lacks training state; cannot resume")
    schedule = Schedule(**state["schedule"])
    if epochs is not None:
        schedule.epochs = epochs
    return run_training(model.config, schedule, datasets, seed=state["seed"],
                        out_dir=out_dir, beta=state["beta"],
                        run_id=state["run_id"], resume_from=checkpoint_path,
                        final_iw=final_iw)
