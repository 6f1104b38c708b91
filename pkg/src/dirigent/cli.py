"""``dirigent`` command line: gen-data, train, eval, infer, sweep, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (ABLATION_LABELS, ABLATIONS, DATA_ROOT_ENV, ConfigError, ablation_config, apply_overrides,
                     load_config)

log = logging.getLogger("dirigent")


class UsageError(Exception):
    pass


def _experiment_config(args):
    cfg = apply_overrides(load_config(args.config), args.set)
    if getattr(args, "data", None):
        cfg = replace(cfg, data=replace(cfg.data, root=str(args.data)))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


# -- subcommands -------------------------------------------------------------------------

def cmd_gen_data(args):
    from .dataset import SyntheticConfig, generate_synthetic
    from .experiment import write_provenance

    out = args.output or _env_root()
    cfg = SyntheticConfig(layout_id=args.layout, count=args.count, image_size=args.image_size, profile=args.profile,
                          participants=args.participants, runs=args.runs)
    seed = 0 if args.seed is None else args.seed
    manifest = generate_synthetic(cfg, out, seed=seed)
    write_provenance(out, None, "gen-data", {"seed": seed, "samples": manifest.sample_count,
                                             "layout_id": manifest.layout_id})
    print(f"wrote {manifest.sample_count} samples to {out}")


def _env_root():
    import os

    root = os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise UsageError(f"--output is required (or export {DATA_ROOT_ENV})")
    return root


def cmd_train(args):
    from .experiment import train_experiment, write_provenance

    cfg = _experiment_config(args)
    out = Path(args.output)
    write_provenance(out, cfg, "train")
    model, history, _ = train_experiment(cfg, run_dir=out, progress=not args.quiet)
    print(f"checkpoint: {out / 'model.pt'}")


def cmd_eval(args):
    from .config import config_from_dict
    from .experiment import evaluate_experiment, load_experiment_data, split_experiment_data, write_provenance
    from .model import DirigentModel

    model = DirigentModel.load(args.checkpoint)
    stored = model.checkpoint_extra.get("config")
    cfg = config_from_dict(stored) if stored else load_config(None)
    cfg = apply_overrides(cfg, args.set)
    if args.data:
        cfg = replace(cfg, data=replace(cfg.data, root=str(args.data)))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.steps is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, steps=args.steps))
    data = load_experiment_data(cfg)
    if args.all:
        test_set = data
    else:
        _, _, test_set = split_experiment_data(cfg, data)
    out = Path(args.output)
    write_provenance(out, cfg, "eval", {"checkpoint": str(args.checkpoint)})
    report = evaluate_experiment(cfg, model, test_set, run_dir=out)
    from .evaluation import compare_runs

    print(compare_runs([report], [cfg.name]))


def cmd_infer(args):
    from .dataset import load_image
    from .model import DirigentModel

    model = DirigentModel.load(args.checkpoint)
    size = model.cfg.image_size
    img = load_image(args.image, size)
    cond = img.transpose(2, 0, 1).astype(np.float32) / 255.0
    config = model.predict_x0(cond, steps=args.steps, seed=0 if args.seed is None else args.seed)
    names = [n for c in model.robot.chains for n in c.joint_names]
    print(",".join(names))
    print(",".join(f"{v:.6f}" for v in config.values))
    if args.render:
        _write_overlay(model.robot, config.values, args.image, args.render)


def _write_overlay(robot, q, image_path, out_path, size=256):
    from PIL import Image

    from .dataset import load_image
    from .render import render_arm

    arm = render_arm(robot, q, size=size).astype(np.float64)
    src = load_image(image_path, size).astype(np.float64)
    blend = np.round(0.5 * arm + 0.5 * src).astype(np.uint8)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(blend).save(out_path)


def _sweep_group(configs, run_dirs, shared_dir):
    """Train once for a group of configs with identical training sections, evaluate each."""
    from .experiment import evaluate_experiment, train_experiment

    model, _, test_set = train_experiment(configs[0], run_dir=shared_dir)
    reports = []
    for cfg, run_dir in zip(configs, run_dirs):
        reports.append(evaluate_experiment(cfg, model, test_set, run_dir=run_dir).to_dict())
    return reports


def cmd_sweep(args):
    from .evaluation import EvalReport, aggregate_reports
    from .experiment import write_provenance

    names = [a.strip() for a in args.ablations.split(",") if a.strip()]
    unknown = [a for a in names if a not in ABLATIONS]
    if unknown:
        raise UsageError(f"unknown ablation(s) {unknown}; known: {sorted(ABLATIONS)}")
    if "baseline" not in names:
        names = ["baseline"] + names
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0 if args.seed is None else args.seed]
    base = _experiment_config(args)
    out = Path(args.output)
    write_provenance(out, base, "sweep", {"ablations": names, "seeds": seeds})

    groups: dict[str, list] = {}
    for name in names:
        for seed in seeds:
            cfg = ablation_config(base, name).with_seed(seed)
            groups.setdefault(cfg.training_key(), []).append((name, seed, cfg))
    jobs = []
    for key, members in groups.items():
        cfgs = [m[2] for m in members]
        dirs = [out / m[0] / f"seed_{m[1]}" for m in members]
        jobs.append((members, (cfgs, dirs, out / "checkpoints" / key)))

    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_sweep_group, *zip(*[j[1] for j in jobs])))
    else:
        results = [_sweep_group(*j[1]) for j in jobs]

    by_name: dict[str, list] = {n: [] for n in names}
    for (members, _), reports in zip(jobs, results):
        for (name, _, _), rep in zip(members, reports):
            by_name[name].append(EvalReport.from_dict(rep))
    reports = [r[0] if len(r) == 1 else aggregate_reports(r, name) for name, r in by_name.items()]
    labels = [ABLATION_LABELS.get(n, n) for n in names]
    _write_table(out, reports, labels)


def _write_table(out, reports, labels):
    from .evaluation import compare_runs, write_comparison_csv
    from .plotting import plot_comparison

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table = compare_runs(reports, labels)
    (out / "comparison.txt").write_text(table + "\n")
    write_comparison_csv(out / "comparison.csv", reports, labels)
    plot_comparison(reports, labels, out / "comparison.png")
    print(table)


def cmd_report(args):
    from .evaluation import EvalReport
    from .experiment import write_provenance

    reports, labels = [], []
    for run in args.runs:
        path = Path(run)
        if not (path / "report.json").is_file():
            raise FileNotFoundError(f"no report.json in {path}")
        reports.append(EvalReport.read(path))
        labels.append(path.name)
    if args.labels:
        labels = [s.strip() for s in args.labels.split(",")]
        if len(labels) != len(reports):
            raise UsageError(f"{len(labels)} labels for {len(reports)} runs")
    write_provenance(args.output, None, "report", {"runs": [str(r) for r in args.runs]})
    _write_table(args.output, reports, labels)


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dirigent", description="Image-to-joint-configuration diffusion model.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, data=True):
        sp.add_argument("--output", "-o", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        if config:
            sp.add_argument("--config", type=Path, default=None, help="YAML experiment config")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="dotted config override, e.g. train.epochs=5 (repeatable)")
        if data:
            sp.add_argument("--data", type=Path, default=None, help=f"dataset root (default: ${DATA_ROOT_ENV})")

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--output", "-o", default=None, help=f"dataset root (default: ${DATA_ROOT_ENV})")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--count", type=int, default=5000)
    g.add_argument("--layout", default="synthetic-3dof")
    g.add_argument("--profile", choices=("diri", "emil"), default="diri")
    g.add_argument("--participants", type=int, default=2)
    g.add_argument("--runs", type=int, default=3)
    g.add_argument("--image-size", type=int, default=256)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    common(t)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e, config=False)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--steps", type=int, default=None)
    e.add_argument("--all", action="store_true", help="evaluate every sample instead of the test split")
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict joint values for one image")
    i.add_argument("--image", type=Path, required=True)
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--steps", type=int, default=1)
    i.add_argument("--seed", type=int, default=None)
    i.add_argument("--render", type=Path, default=None, help="write the predicted arm over the input image")
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("sweep", help="train/evaluate a set of ablations plus the baseline")
    common(s)
    s.add_argument("--ablations", required=True, help=f"comma list from {sorted(ABLATIONS)}")
    s.add_argument("--seeds", default=None, help="comma list of seeds, averaged per ablation")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="compare finished runs")
    r.add_argument("runs", nargs="+", type=Path)
    r.add_argument("--output", "-o", required=True)
    r.add_argument("--labels", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"dirigent {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"dirigent {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
