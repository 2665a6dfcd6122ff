"""Command line entry point: ``hetctr {gen-data,pretrain,finetune,eval,ablate,sweep}``.

Every TrainConfig field is a flag. ``--config file.json`` supplies values
for the same fields; explicit flags override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import train as tr
from .schema import SyntheticConfig, build_schema, generate_dataset, heterogeneity_benchmark, load_dataset, save_dataset
from .train import TrainConfig

log = logging.getLogger("hetctr")


def _flag_type(f):
    if f.name in ("recon_t",):
        return int
    if f.name == "finetune_lr":
        return float
    return type(f.default)


def add_config_flags(parser):
    parser.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    for f in fields(TrainConfig):
        kwargs = {"dest": f.name, "default": None, "help": f"TrainConfig.{f.name} (default {f.default})"}
        if f.name == "variant":
            kwargs["choices"] = tr.VARIANTS
        elif f.name == "optimizer":
            kwargs["choices"] = ("sgd", "adam")
        parser.add_argument("--" + f.name.replace("_", "-"), type=_flag_type(f), **kwargs)


def resolve_config(args) -> TrainConfig:
    payload = {}
    if args.config is not None:
        payload.update(json.loads(args.config.read_text()))
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            payload[f.name] = value
    return TrainConfig.from_dict(payload)


def _summary(results: dict) -> dict:
    out = {}
    for key, reports in results.items():
        aucs = np.array([r.auc for r in reports])
        out[str(key)] = {
            "auc_mean": float(aucs.mean()),
            "auc_std": float(aucs.std(ddof=1)) if len(aucs) > 1 else 0.0,
            "runs": [r.to_dict() for r in reports],
        }
    return out


def cmd_gen_data(args):
    if args.benchmark == "heterogeneity":
        schema, synth = heterogeneity_benchmark(args.seed, args.n_samples, args.label_noise)
    else:
        synth = SyntheticConfig(n_samples=args.n_samples, label_noise=args.label_noise, latent_dim=args.latent_dim)
        schema = build_schema(synth, seed=args.seed)
    train, test = generate_dataset(schema, synth).split(args.test_fraction, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    save_dataset(train, args.out / "train.tsv")
    save_dataset(test, args.out / "test.tsv")
    print(f"wrote {len(train)} train / {len(test)} test rows to {args.out}")


def cmd_pretrain(args):
    config = resolve_config(args)
    train = load_dataset(args.train)
    args.out.mkdir(parents=True, exist_ok=True)
    state = tr.ModelState.initial(train.schema, train, config)
    trainlog = tr.TrainLog(args.out / "trainlog.csv")
    tr.pretrain(state, state.tokens(train), config, trainlog=trainlog)
    trainlog.write()
    path = tr.save_checkpoint(state, config, args.out / "pretrain.npz")
    print(f"pretrained {state.step} steps -> {path}")


def cmd_finetune(args):
    train = load_dataset(args.train)
    state, stored = tr.load_checkpoint(args.checkpoint, train.schema)
    config = resolve_config_over(stored, args)
    tr.finetune(state, state.tokens(train), config)
    args.out.mkdir(parents=True, exist_ok=True)
    path = tr.save_checkpoint(state, config, args.out / "finetune.npz")
    print(f"fine-tuned {state.finetune_step} steps -> {path}")


def resolve_config_over(stored: TrainConfig, args) -> TrainConfig:
    payload = stored.to_dict()
    if args.config is not None:
        payload.update(json.loads(args.config.read_text()))
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            payload[f.name] = value
    return TrainConfig.from_dict(payload)


def cmd_eval(args):
    from .metrics import EvalReport

    test = load_dataset(args.test)
    train = load_dataset(args.train)
    state, stored = tr.load_checkpoint(args.checkpoint, test.schema)
    config = resolve_config_over(stored, args)
    ctr = tr.ctr_report(state, train, test, config)
    recon = tr.reconstruction_report(state, state.tokens(test), config)
    report = EvalReport(ctr["auc"], ctr["logloss"], recon, float("nan"), ctr["strata_auc"], {"checkpoint": str(args.checkpoint)})
    out = args.out or Path(args.checkpoint).with_name("report.json")
    report.write_json(out)
    print(json.dumps({"auc": report.auc, "logloss": report.logloss}, indent=2))


def cmd_ablate(args):
    config = resolve_config(args)
    results = tr.ablate(config, range(args.seeds), tr.VARIANTS, args.n_samples, args.label_noise, args.out)
    summary = _summary(results)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(json.dumps(summary, indent=2))
    for variant, row in summary.items():
        print(f"{variant:8s} auc {row['auc_mean']:.4f} +- {row['auc_std']:.4f}")


def cmd_sweep(args):
    config = resolve_config(args)
    kind = _flag_type(next(f for f in fields(TrainConfig) if f.name == args.param))
    values = [kind(v) for v in args.values.split(",")]
    results = tr.sweep(config, args.param, values, range(args.seeds), args.n_samples, args.label_noise, args.out)
    summary = _summary(results)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(json.dumps(summary, indent=2))
    for value, row in summary.items():
        print(f"{args.param}={value}: auc {row['auc_mean']:.4f} +- {row['auc_std']:.4f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="hetctr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic train/test split")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--benchmark", choices=("default", "heterogeneity"), default="heterogeneity")
    p.add_argument("--n-samples", type=int, default=20000)
    p.add_argument("--label-noise", type=float, default=0.1)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="generative pretraining")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="BCE fine-tuning from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--train", type=Path, required=True, help="training split, for user activity strata")
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--out", type=Path)
    add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("ablate", cmd_ablate, "all variants over several seeds"), ("sweep", cmd_sweep, "vary one config field")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seeds", type=int, default=5)
        p.add_argument("--n-samples", type=int, default=20000)
        p.add_argument("--label-noise", type=float, default=0.1)
        if name == "sweep":
            p.add_argument("--param", required=True)
            p.add_argument("--values", required=True, help="comma separated")
        add_config_flags(p)
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
