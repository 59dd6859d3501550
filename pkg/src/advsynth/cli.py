"""Command-line entry points.

Subcommands: train, eval, diversity, ablate, export-dataset.  Each command
owns its output directory; every artifact it writes embeds the config hash
so runs can be audited after the fact.  Exit codes: 0 success, 2 bad
arguments or config, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import glob as globlib
import os
import sys

from .attacks import AttackSpec
from .config import ConfigError, RunConfig, canonical_text, config_hash, load_config, parse_fraction, resolve_data_path
from .data import Dataset, load_cifar10_binary, load_cifar100_binary, load_dataset, save_dataset, synth_toy


def _load_datasets(rc: RunConfig):
    if rc.dataset == "toy":
        return synth_toy(rc.toy)
    path = resolve_data_path(rc.dataset_path)
    if rc.dataset == "cifar10":
        return load_cifar10_binary(path)
    if rc.dataset == "cifar100":
        return load_cifar100_binary(path)
    return load_dataset(path), None


def _die(msg: str, code: int = 2) -> int:
    print(msg, file=sys.stderr)
    return code


def cmd_train(args) -> int:
    try:
        rc = load_config(args.config)
    except ConfigError as e:
        return _die(str(e))
    h = config_hash(rc)
    train_ds, _ = _load_datasets(rc)
    from .training import train

    os.makedirs(rc.out_dir, exist_ok=True)
    with open(os.path.join(rc.out_dir, "config.canonical"), "w") as f:
        f.write(f"# hash={h}\n")
        f.write(canonical_text(rc))
    resume = None
    if args.resume:
        ckpts = sorted(globlib.glob(os.path.join(rc.out_dir, "ckpt_*.bin")))
        if not ckpts:
            return _die(f"--resume: no checkpoints under {rc.out_dir}")
        resume = ckpts[-1]
    try:
        result = train(
            train_ds,
            rc.train,
            out_dir=rc.out_dir,
            checkpoint_interval=rc.checkpoint_interval or None,
            log_interval=rc.log_interval,
            resume_from=resume,
            force_resume=args.force,
            config_hash=h,
        )
    except ValueError as e:
        return _die(str(e), 1)
    print(f"trained {result.total_steps} steps; metrics at {result.metrics_path}; hash {h}")
    return 0


def _parse_sweep(text: str) -> list[float]:
    """start:stop:step in 1/255 units, endpoints inclusive."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"--sweep wants start:stop:step, got {text!r}")
    a, b, s = (int(p) for p in parts)
    if s <= 0 or b < a:
        raise ValueError(f"--sweep range is empty: {text!r}")
    return [v / 255.0 for v in range(a, b + 1, s)]


def _attack_specs(args) -> list[AttackSpec]:
    if args.attack == "none":
        return []
    eps = parse_fraction(args.eps)
    alpha = parse_fraction(args.alpha)
    steps = 1 if args.attack == "fgsm" else args.steps
    kind = {"fgsm": "fgsm", "pgd": "pgd", "cw": "cw_margin"}[args.attack]
    return [AttackSpec(kind, eps, alpha=alpha, steps=steps, random_init=args.attack != "fgsm")]


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint, restore_models
    from .evaluation import blackbox_transfer, budget_sweep, sweep_to_csv, whitebox_grid

    ck = load_checkpoint(args.checkpoint)
    clf, _ = restore_models(ck)
    ds = load_dataset(args.dataset)
    model_id = os.path.basename(args.checkpoint)
    try:
        specs = _attack_specs(args)
    except ValueError as e:
        return _die(str(e))

    if args.sweep:
        try:
            eps_list = _parse_sweep(args.sweep)
        except ValueError as e:
            return _die(str(e))
        curve = budget_sweep(clf, ds, eps_list, seed=args.seed)
        sweep_to_csv(curve, args.out, model_id=model_id, config_hash=ck.config_hash)
        print(f"wrote {len(curve)}-point sweep to {args.out}")
        return 0

    if args.surrogate:
        sck = load_checkpoint(args.surrogate)
        surrogate, _ = restore_models(sck)
        try:
            report = blackbox_transfer(
                clf, surrogate, ds, specs, seed=args.seed,
                model_id=model_id, config_hash=ck.config_hash,
            )
        except ValueError as e:
            return _die(str(e), 1)
    else:
        report = whitebox_grid(clf, ds, specs, seed=args.seed, model_id=model_id, config_hash=ck.config_hash)
    report.to_csv(args.out)
    report.to_summary(args.out + ".json")
    for name, acc in report.rows():
        print(f"{name}: {acc:.4f}")
    return 0


def cmd_diversity(args) -> int:
    from .evaluation import diversity_study

    if args.k < 2:
        return _die(f"--k must be >= 2, got {args.k}")
    paths = sorted(globlib.glob(args.checkpoints))
    if not paths:
        return _die(f"no checkpoints match {args.checkpoints!r}")
    ds = load_dataset(args.dataset)
    trace = diversity_study(paths, ds, args.k, seed=args.seed, subset_size=args.subset)
    trace.to_csv(args.out)
    print(f"wrote {len(trace.entries)}-checkpoint diversity trace to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    try:
        rc = load_config(args.config)
    except ConfigError as e:
        return _die(str(e))
    h = config_hash(rc)
    train_ds, test_ds = _load_datasets(rc)
    if test_ds is None:
        return _die("ablate needs a dataset family with a test split", 1)
    from .evaluation import ablation_grid, write_ablation_csv

    os.makedirs(rc.out_dir, exist_ok=True)
    reports = ablation_grid(train_ds, test_ds, rc.train, out_dir=rc.out_dir, eval_seed=args.seed, config_hash=h)
    out = os.path.join(rc.out_dir, "ablation.csv")
    write_ablation_csv(reports, out, seed=rc.train.seed)
    for rep in reports:
        rep.to_summary(os.path.join(rc.out_dir, f"{rep.model_id.replace('+', '_')}.json"))
    print(f"wrote ablation table to {out}")
    return 0


def cmd_export_dataset(args) -> int:
    try:
        rc = load_config(args.config)
    except ConfigError as e:
        return _die(str(e))
    train_ds, test_ds = _load_datasets(rc)
    ds: Dataset = train_ds if args.split == "train" else test_ds
    if ds is None:
        return _die(f"dataset family {rc.dataset!r} has no {args.split} split", 1)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n} {args.split} samples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advsynth", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in out_dir")
    t.add_argument("--force", action="store_true", help="resume even if the config hash changed")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", required=True, help="dataset file (see export-dataset)")
    e.add_argument("--attack", choices=["none", "fgsm", "pgd", "cw"], default="pgd")
    e.add_argument("--steps", type=int, default=20)
    e.add_argument("--eps", default="8/255")
    e.add_argument("--alpha", default="2/255")
    e.add_argument("--surrogate", default="", help="transfer: generate attacks on this checkpoint")
    e.add_argument("--sweep", default="", help="epsilon sweep start:stop:step in 1/255 units")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="eval.csv")
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("diversity", help="perturbation diversity across checkpoints")
    d.add_argument("checkpoints", help="glob over checkpoint files")
    d.add_argument("--dataset", required=True)
    d.add_argument("--k", type=int, default=32)
    d.add_argument("--subset", type=int, default=256)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default="diversity.csv")
    d.set_defaults(fn=cmd_diversity)

    a = sub.add_parser("ablate", help="train and compare the three variants")
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int, default=0, help="evaluation seed")
    a.set_defaults(fn=cmd_ablate)

    x = sub.add_parser("export-dataset", help="write a dataset split to the binary format")
    x.add_argument("--config", required=True)
    x.add_argument("--split", choices=["train", "test"], default="test")
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_dataset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
