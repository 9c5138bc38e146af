"""Command-line surface: train / evaluate / sample / classify / diagnose.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import classify as classify_mod
from . import evaluation, train
from .data import binarize, draw_labelled_subset, load_dataset
from .errors import ConfigError, DataFormatError, NumericalError
from .images import to_grid, write_pgm
from .model import DTYPE, CaGeM, ModelConfig, load_checkpoint

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _add_data_args(p):
    p.add_argument("--dataset", choices=["mnist", "omniglot", "synthetic"],
                   default="synthetic")
    p.add_argument("--data-dir", default=None,
                   help="directory/file holding the dataset containers")
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cagem",
                                     description="Cluster-aware generative model")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_data_args(p)
    p.add_argument("--variant", choices=["vae", "cagem"], default="cagem")
    p.add_argument("--labels", type=int, default=0,
                   help="number of labelled points (0 = fully unsupervised)")
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--z1-dim", type=int, default=64)
    p.add_argument("--z2-dim", type=int, default=32)
    p.add_argument("--hidden", type=int, nargs="+", default=[1024, 512])
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--eval-every", type=int, default=5)
    p.add_argument("--warmup-epochs", type=int, default=100,
                   help="temperature warm-up length (0 = no warm-up)")
    p.add_argument("--grad-clip", type=float, default=0.0,
                   help="global gradient-norm bound (0 = off)")
    p.add_argument("--final-iw", type=int, default=0,
                   help="IW samples for a final test-set bound (0 = skip)")
    p.add_argument("--resume", default=None, help="training checkpoint to resume")
    p.add_argument("--out", default="run")

    p = sub.add_parser("evaluate", help="importance-weighted bound on a split")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--iw", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=2048)

    p = sub.add_parser("sample", help="draw samples from the generative model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--class", dest="class_index", type=int, default=None)
    p.add_argument("--grid", default="samples.pgm")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("classify", help="classification error on a split")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=2048)

    p = sub.add_parser("diagnose", help="activity report and latent export")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latent-table", default=None)
    return parser


def _load_split(args):
    data = load_dataset(args.dataset, args.data_dir)
    return data, data[args.split]


def cmd_train(args) -> int:
    if args.labels > 0 and args.variant != "cagem":
        raise ConfigError("--labels requires --variant cagem")
    data = load_dataset(args.dataset, args.data_dir)
    config = ModelConfig(
        x_dim=data["train"].x_dim, z1_dim=args.z1_dim, z2_dim=args.z2_dim,
        n_clusters=args.clusters, hidden=tuple(args.hidden), variant=args.variant)
    schedule = train.Schedule(epochs=args.epochs, batch_size=args.batch_size,
                              eval_every=args.eval_every,
                              warmup_epochs=args.warmup_epochs,
                              grad_clip=args.grad_clip)
    labelled = None
    if args.labels > 0:
        labelled = draw_labelled_subset(data["train"], args.labels, args.seed)
    result = train.run_training(config, schedule, data, labelled=labelled,
                                seed=args.seed, out_dir=args.out, beta=args.beta,
                                resume_from=args.resume, final_iw=args.final_iw)
    print(json.dumps(result))
    return 0


def cmd_evaluate(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    _, split = _load_split(args)
    gen = torch.Generator().manual_seed(args.seed)
    total, n = 0.0, 0
    for start in range(0, len(split), args.batch_size):
        x = binarize(torch.as_tensor(split.images[start:start + args.batch_size],
                                     dtype=DTYPE), gen)
        est = evaluation.iw_bound(model, x, args.iw, generator=gen)
        total += est.per_example.sum()
        n += x.shape[0]
    bound = total / n
    print(json.dumps({"split": args.split, "L": args.iw,
                      "F": bound, "nats_per_example": bound}))
    return 0


def cmd_sample(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    gen = torch.Generator().manual_seed(args.seed)
    batch = model.generate(args.n, y_fixed=args.class_index, generator=gen)
    side = int(round(model.config.x_dim ** 0.5))
    if side * side != model.config.x_dim:
        raise ConfigError("cannot render non-square images")
    write_pgm(args.grid, to_grid(batch.means.numpy(), side))
    print(json.dumps({"written": str(args.grid), "n": args.n,
                      "class": args.class_index}))
    return 0


def cmd_classify(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if not isinstance(model, CaGeM):
        raise ConfigError("classification requires a cagem checkpoint")
    _, split = _load_split(args)
    if split.labels is None:
        raise ConfigError(f"split {args.split!r} carries no labels")
    gen = torch.Generator().manual_seed(args.seed)
    errors_p, errors_q, n = 0.0, 0.0, 0
    for start in range(0, len(split), args.batch_size):
        x = binarize(torch.as_tensor(split.images[start:start + args.batch_size],
                                     dtype=DTYPE), gen)
        labels = split.labels[start:start + args.batch_size]
        b = x.shape[0]
        errors_p += classify_mod.error_rate(
            classify_mod.p_classifier(model, x, args.samples, gen), labels) * b
        errors_q += classify_mod.error_rate(
            classify_mod.q_classifier(model, x, args.samples, gen), labels) * b
        n += b
    print(json.dumps({"split": args.split, "samples": args.samples,
                      "error_p": errors_p / n, "error_q": errors_q / n}))
    return 0


def cmd_diagnose(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    _, split = _load_split(args)
    gen = torch.Generator().manual_seed(args.seed)
    x = binarize(torch.as_tensor(split.images[:args.n], dtype=DTYPE), gen)
    report, table = evaluation.elbo_decompose(model, x, generator=gen)
    out = {"kl_z2": report.kl_z2, "kl_z1": report.kl_z1, "terms": table}
    if args.latent_table:
        export = evaluation.latent_export(model, x, labels=split.labels[:args.n]
                                          if split.labels is not None else None)
        evaluation.write_latent_table(args.latent_table, export)
        out["latent_table"] = str(args.latent_table)
    print(json.dumps(out))
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sample": cmd_sample,
    "classify": cmd_classify,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
