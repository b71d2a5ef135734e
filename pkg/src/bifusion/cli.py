"""Command-line entry point: dataset generation, training, cost analysis,
and gradient checking.

Subcommands: ``gen``, ``train``, ``cost``, ``gradcheck``.  Every subcommand
is deterministic given its config and seeds; output files carry no
timestamps.  Exit codes: 0 success, 2 config error, 3 I/O error,
4 training divergence, 5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import costs, plots
from .checkpoint import save_checkpoint
from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .gradcheck import TOLERANCE, run_all
from .models import build_model
from .synthetic import make_dataset, read_examples, write_examples
from .training import (
    DivergenceError,
    evaluate,
    load_params,
    train,
    write_metrics_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_GRADCHECK = 5


def _load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None):
        cfg.seeds = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    if getattr(args, "arch", None):
        cfg.model.arch = args.arch
    if getattr(args, "no_mha", False):
        cfg.model.use_intra_attention = False
    if getattr(args, "no_ortho", False):
        cfg.train.alpha_max = 0.0
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    return cfg.validate()


def cmd_gen(args) -> int:
    cfg = _load_experiment(args)
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    train_set, test_set = make_dataset(cfg.task)
    n_train = write_examples(os.path.join(out_dir, "train.jsonl"), train_set)
    n_test = write_examples(os.path.join(out_dir, "test.jsonl"), test_set)
    manifest = {
        "format": "jsonl-v1",
        "seed": cfg.task.seed,
        "spec_hash": config_hash(cfg.task),
        "n_train": n_train,
        "n_test": n_test,
        "n_examples": n_train + n_test,
        "answers": cfg.task.answers,
        "image_dim": cfg.task.image_dim,
        "question_dim": cfg.task.question_dim,
        "max_question_tokens": cfg.task.max_question_tokens,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {n_train} train / {n_test} test records to {out_dir}")
    return EXIT_OK


def _train_one(cfg: ExperimentConfig, seed: int, train_set, test_set):
    tc = dataclasses.replace(cfg.train, seed=seed)
    result = train(cfg.model, tc, train_set,
                   include_ortho=cfg.train.alpha_max > 0.0,
                   checkpoint_dir=cfg.out_dir if tc.checkpoint_every > 0 else None)
    model = build_model(cfg.model, seed=seed)
    load_params(model, result.best_params)
    test_acc = evaluate(model, test_set, tc.batch_size)
    return result, test_acc


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    if not cfg.data_dir:
        raise ConfigError("train needs a dataset: pass --data DIR or set "
                          "[experiment] data_dir (run `gen` first)")
    train_set = read_examples(os.path.join(cfg.data_dir, "train.jsonl"))
    test_set = read_examples(os.path.join(cfg.data_dir, "test.jsonl"))
    if not train_set:
        raise ConfigError(f"no training records under {cfg.data_dir}")
    os.makedirs(cfg.out_dir, exist_ok=True)

    with ThreadPoolExecutor(max_workers=min(len(cfg.seeds), os.cpu_count() or 1)) as pool:
        futures = [pool.submit(_train_one, cfg, seed, train_set, test_set)
                   for seed in cfg.seeds]
        outcomes = [f.result() for f in futures]

    model_hash = config_hash(cfg.model)
    rows, histories = [], {}
    for seed, (result, test_acc) in zip(cfg.seeds, outcomes):
        write_metrics_csv(
            os.path.join(cfg.out_dir, f"metrics_seed{seed}.csv"), result.history)
        save_checkpoint(
            os.path.join(cfg.out_dir, f"checkpoint_seed{seed}.ckpt"),
            result.best_params, model_hash,
            extra={"seed": seed, "arch": cfg.model.arch,
                   "best_epoch": result.best_epoch,
                   "best_val_acc": result.best_val_acc})
        rows.append((seed, result.best_epoch, result.best_val_acc, test_acc))
        histories[seed] = result.history

    accs = np.array([r[3] for r in rows], dtype=float)
    with open(os.path.join(cfg.out_dir, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write("seed,best_epoch,best_val_acc,test_acc\n")
        for seed, best_epoch, best_val, test_acc in rows:
            fh.write(f"{seed},{best_epoch},{best_val!r},{test_acc!r}\n")
        fh.write(f"aggregate,,,{float(accs.mean())!r}\n")
    summary = (f"{cfg.model.arch} test accuracy over {len(rows)} seed(s): "
               f"{100 * accs.mean():.1f} ± {100 * accs.std():.1f}")
    with open(os.path.join(cfg.out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary + "\n")
    plots.save_training_curves(
        histories, os.path.join(cfg.out_dir, "training_curves.png"))
    print(summary)
    return EXIT_OK


SWEEP_KEYS = ("n_q", "d_m", "glimpses", "coattention_layers")


def _parse_sweep(text: str) -> tuple:
    if "=" not in text:
        raise ConfigError(f"--sweep expects KEY=V[,V...], got {text!r}")
    key, _, raw = text.partition("=")
    key = key.strip().lower()
    if key not in SWEEP_KEYS:
        raise ConfigError(f"--sweep key must be one of {SWEEP_KEYS}, got {key!r}")
    try:
        values = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--sweep values must be integers: {raw!r}")
    if not values:
        raise ConfigError("--sweep needs at least one value")
    return key, values


def cmd_cost(args) -> int:
    cfg = _load_experiment(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    n_v, n_q = 1, cfg.task.max_question_tokens
    base = dataclasses.replace(cfg.model, d_hid=cfg.task.image_dim)
    omni = costs.build_cost_report(
        dataclasses.replace(base, arch="omniban"), n_v, n_q)
    coatt = costs.build_cost_report(
        dataclasses.replace(base, arch="coattention"), n_v, n_q)
    comp = costs.compare(omni, coatt)
    text = costs.comparison_to_text(comp)
    costs.comparison_to_csv(comp, os.path.join(cfg.out_dir, "cost_report.csv"))
    with open(os.path.join(cfg.out_dir, "cost_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    plots.save_cost_comparison(
        [omni, coatt], os.path.join(cfg.out_dir, "cost_comparison.png"))
    print(text)

    if args.sweep:
        key, values = _parse_sweep(args.sweep)
        rows_by_arch = {}
        for arch in ("omniban", "coattention"):
            rows_by_arch[arch] = costs.sweep_costs(
                dataclasses.replace(base, arch=arch), key, values, n_v, n_q)
        costs.sweep_to_csv(rows_by_arch, key,
                           os.path.join(cfg.out_dir, f"sweep_{key}.csv"))
        plots.save_scaling_plot(
            rows_by_arch, key,
            os.path.join(cfg.out_dir, f"scaling_{key}.png"))
        print(f"sweep over {key} written to {cfg.out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all()
    worst_name, worst = "", 0.0
    for name, err in results:
        status = "PASS" if err < TOLERANCE else "FAIL"
        print(f"{status}  {name:<22} worst_rel_err={err:.3e}")
        if err > worst:
            worst_name, worst = name, err
    if worst >= TOLERANCE:
        print(f"gradient check FAILED: {worst_name} at {worst:.3e}")
        return EXIT_GRADCHECK
    print(f"all {len(results)} checks passed (worst {worst:.3e})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bifusion",
        description="Bilinear-attention fusion experiments: synthetic data "
                    "generation, training, cost analysis, gradient checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--config", help="INI experiment file")
        p.add_argument("--out", help="output directory")
        if seeds:
            p.add_argument("--seed", "--seeds", dest="seed", type=_seed_list,
                           help="seed or comma-separated seed list")

    p_gen = sub.add_parser("gen", help="generate a planted-pair dataset")
    common(p_gen, seeds=False)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train one architecture per seed")
    common(p_train)
    p_train.add_argument("--data", help="dataset directory from `gen`")
    p_train.add_argument("--arch", choices=("omniban", "coattention", "concat"))
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--no-mha", action="store_true",
                         help="disable intra-modal multi-head attention")
    p_train.add_argument("--no-ortho", action="store_true",
                         help="disable the orthogonality penalty")
    p_train.set_defaults(func=cmd_train)

    p_cost = sub.add_parser("cost", help="parameter/FLOP comparison report")
    common(p_cost, seeds=False)
    p_cost.add_argument("--sweep", help="KEY=V[,V...], e.g. N_q=8,16,32,64")
    p_cost.set_defaults(func=cmd_cost)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p_gc.add_argument("--config", help="accepted for symmetry; checks use tiny dims")
    p_gc.set_defaults(func=cmd_gradcheck)
    return parser


def _seed_list(text: str) -> list:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
