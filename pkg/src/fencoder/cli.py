"""Command-line driver: ``fencoder <subcommand> [--seed N] [--config cfg.json] [--out DIR]``.

Exit codes: 0 success, 1 validation error (bad flags, bad config, bad input
files), 2 runtime failure (divergence, failed check suites).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, fields

import numpy as np

from . import experiments as ex
from .analysis import eval_contexts, svg_scatter
from .encoder import TrainConfig, adapt_one_shot, calibrate, train, train_monolithic, write_history, write_run
from .numerics import DivergenceError, load_checkpoint, save_checkpoint
from .skillnet import BasisNetwork, MonolithicNetwork, network_from_meta
from .worlds import (WorldSpec, context_from_json, generate_world, read_datasets, read_jsonl,
                     write_datasets)


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

def load_config(path):
    """Read ``{"world": {...}, "train": {...}}``; both sections optional."""
    if path is None:
        return {}, {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read config {path}: {e}")
    if not isinstance(doc, dict) or set(doc) - {"world", "train"}:
        raise ValidationError("config must be an object with optional 'world' and 'train' keys")
    world, tr = doc.get("world", {}), doc.get("train", {})
    for name, section, cls in (("world", world, WorldSpec), ("train", tr, TrainConfig)):
        unknown = set(section) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown {name} keys: {sorted(unknown)}")
    return world, tr


def make_world(args, world_over):
    kw = dict(ex.WORLD_1D if getattr(args, "world", "grid") == "1d" else ex.WORLD_GRID)
    kw.update(world_over)
    if getattr(args, "world", None):
        kw["kind"] = args.world
    try:
        return WorldSpec(**kw)
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e))


def make_train_config(kind, train_over, seed):
    try:
        return ex.desk_config(kind, **dict(train_over, seed=seed))
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e))


def load_net(path):
    try:
        meta, params = load_checkpoint(path)
        return network_from_meta(meta, params), meta
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot load checkpoint {path}: {e}")


def load_data(path):
    try:
        return read_datasets(path)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read dataset directory {path}: {e}")


def dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, world_over, train_over):
    spec = make_world(args, world_over)
    tc, hc, tr, ho = generate_world(spec, args.seed)
    write_datasets(args.out, tr + ho, spec, tc + hc, args.seed)
    print(f"wrote {len(tr)} train + {len(ho)} held-out contexts to {args.out}")
    return 0


def _world_for(args, world_over):
    if args.data:
        datasets, manifest = load_data(args.data)
        return datasets, WorldSpec(**manifest["world"]), manifest
    spec = make_world(args, world_over)
    tc, hc, tr, ho = generate_world(spec, args.seed)
    return tr + ho, spec, None


def cmd_train(args, world_over, train_over):
    datasets, spec, _ = _world_for(args, world_over)
    cfg = make_train_config(spec.kind, train_over, args.seed)
    train_ds = [d for d in datasets if d.split == "train"]
    if args.model == "mono":
        net, hist = train_monolithic(cfg, train_ds)
        os.makedirs(args.out, exist_ok=True)
        dump_json(os.path.join(args.out, "config.json"), cfg.to_json())
        write_history(os.path.join(args.out, "history.csv"), hist)
        save_checkpoint(os.path.join(args.out, "checkpoint.json"),
                        dict(net.meta(), seed=cfg.seed), net.params())
    else:
        state = train(cfg, train_ds)
        write_run(args.out, state, {"world": asdict(spec)})
        hist = state.history
    print(f"trained {args.model} for {cfg.total_steps} steps, final loss {hist[-1][1]:.6g}")
    return 0


def cmd_adapt(args, world_over, train_over):
    net, _ = load_net(args.ckpt)
    if not isinstance(net, BasisNetwork):
        raise ValidationError("adapt needs a basis-network checkpoint")
    try:
        demos = read_jsonl(args.demo)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read demonstration {args.demo}: {e}")
    if len(demos) != 1:
        raise ValidationError(f"demonstration file must hold one context, found {len(demos)}")
    demo = demos[0]
    t0 = time.perf_counter()
    coeff = adapt_one_shot(net, demo)
    wall_ms = 1e3 * (time.perf_counter() - t0)
    os.makedirs(args.out, exist_ok=True)
    dump_json(os.path.join(args.out, "alpha.json"), {
        "context_id": demo.context_id, "alpha": coeff.alpha.tolist(), "k": int(coeff.alpha.size),
        "solver_objective": coeff.objective, "wall_ms": wall_ms if args.timing else None})
    print(f"calibrated {len(demo)} pairs in {wall_ms:.1f} ms")
    return 0


def cmd_eval(args, world_over, train_over):
    net, _ = load_net(args.ckpt)
    baseline = load_net(args.baseline)[0] if args.baseline else None
    if baseline is not None and not isinstance(baseline, MonolithicNetwork):
        raise ValidationError("--baseline must be a monolithic checkpoint")
    datasets, _ = load_data(args.data)
    try:
        report = eval_contexts(net, datasets, args.calib, args.seed, baseline)
    except ValueError as e:
        raise ValidationError(str(e))
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "report.csv"))
    if baseline is not None:
        report.write_csv(os.path.join(args.out, "baseline_report.csv"), "baseline_l1")
    dump_json(os.path.join(args.out, "report.json"), report.to_json())
    for s in report.splits():
        print(f"{s}: mean L1 {report.aggregate(s):.6g}")
    return 0


def cmd_rollout_eval(args, world_over, train_over):
    net, _ = load_net(args.ckpt)
    datasets, manifest = load_data(args.data)
    ctxs = {c["id"]: context_from_json(c) for c in manifest["contexts"]}
    step = manifest["world"]["step_size"]
    train_alphas = []
    for ds in datasets:
        if ds.split == "train":
            n = min(args.calib, len(ds))
            train_alphas.append(calibrate(net, ds.obs[:n], ds.act[:n]).alpha)
    mean_alpha = np.mean(train_alphas, axis=0)
    rows = []
    for ds in sorted(datasets, key=lambda d: d.context_id):
        if ds.split != "ood":
            continue
        r = ex.one_shot_eval(net, ctxs[ds.context_id], args.seed, mean_alpha, args.demo_horizon,
                             args.rollouts, args.horizon, step,
                             manifest["world"].get("resample_goals", True))
        rows.append(r)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "rollouts.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["context_id", "successes", "baseline_successes", "n"])
        for r in rows:
            w.writerow([r["context_id"], r["successes"], r["baseline_successes"], args.rollouts])
    dump_json(os.path.join(args.out, "rollouts.json"), [
        dict(r, alpha=r["alpha"].tolist()) for r in rows])
    for r in rows:
        print(f"{r['context_id']}: {r['successes']}/{args.rollouts} "
              f"(uncalibrated {r['baseline_successes']}/{args.rollouts})")
    return 0


def cmd_pca(args, world_over, train_over):
    net, _ = load_net(args.ckpt)
    spec = make_world(args, dict(world_over, kind="grid"))
    coeffs, fam, proj, (intra, inter) = ex.coefficient_clusters(
        net, args.families, args.per_family, args.seed, spec.band_width,
        spec.trajectories_per_context, args.calib, spec)
    os.makedirs(args.out, exist_ok=True)
    proj.write_csv(os.path.join(args.out, "projection.csv"))
    dump_json(os.path.join(args.out, "clusters.json"), {
        "mean_intra": intra, "mean_inter": inter,
        "explained_variance": proj.explained_variance.tolist(),
        "components": proj.components.tolist(),
        "coefficients": {c: a.tolist() for c, a in sorted(coeffs.items())},
        "family": dict(sorted(fam.items()))})
    if args.svg:
        svg_scatter(os.path.join(args.out, "projection.svg"), proj.points,
                    [fam[c] for c in proj.context_ids], "coefficient PCA")
    print(f"intra {intra:.6g} inter {inter:.6g}")
    return 0


def cmd_overfit_demo(args, world_over, train_over):
    cfg = ex.OverfitConfig(seed=args.seed, world=dict(dict(ex.WORLD_1D, **world_over), kind="1d"),
                           train=dict(ex.DESK_1D, **train_over), calib_samples=args.calib)
    try:
        TrainConfig(**cfg.train)
        WorldSpec(**cfg.world)
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e))
    s = ex.overfit_demo(cfg, args.out, args.svg)
    print(f"held-out L1: basis {s['fe_holdout_l1']:.6g}, pooled {s['mono_holdout_l1']:.6g}")
    return 0


def cmd_grad_check(args, world_over, train_over):
    from .checks import grad_check_suite
    rows = grad_check_suite(args.nets, args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "grad_check.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["net", "kind", "max_rel_error", "excluded", "passed"])
        for r in rows:
            w.writerow([r["net"], r["kind"], repr(r["error"]), r["excluded"], int(r["passed"])])
    ok = sum(r["passed"] for r in rows)
    print(f"grad-check: {ok}/{len(rows)} passed")
    return 0 if ok == len(rows) else 2


def cmd_solver_check(args, world_over, train_over):
    from .checks import solver_check_suite
    rows = solver_check_suite(args.problems, args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "solver_check.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["problem", "m", "k", "lae_objective", "oracle_objective", "passed"])
        for r in rows:
            w.writerow([r["problem"], r["m"], r["k"], repr(r["lae"]), repr(r["oracle"]),
                        int(r["passed"])])
    ok = sum(r["passed"] for r in rows)
    print(f"solver-check: {ok}/{len(rows)} passed")
    return 0 if ok == len(rows) else 2


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help="JSON with 'world' / 'train' sections")
    common.add_argument("--out", default="out", help="output directory")

    p = _Parser(prog="fencoder", description="basis-function policy toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a world's datasets")
    sp.add_argument("--world", choices=["grid", "1d"], default="grid")

    sp = add("train", cmd_train, "train the basis model or the pooled baseline")
    sp.add_argument("--world", choices=["grid", "1d"], default="grid")
    sp.add_argument("--data", default=None, help="dataset directory (default: generate)")
    sp.add_argument("--model", choices=["basis", "mono"], default="basis")

    sp = add("adapt", cmd_adapt, "calibrate coefficients from a demonstration")
    sp.add_argument("--demo", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--timing", action="store_true", help="record wall_ms in alpha.json")

    sp = add("eval", cmd_eval, "per-context calibrate-then-score report")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--baseline", default=None)
    sp.add_argument("--calib", type=int, default=512)

    sp = add("rollout-eval", cmd_rollout_eval, "one-shot adaptation rollouts on held-out contexts")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--calib", type=int, default=512)
    sp.add_argument("--demo-horizon", type=int, default=40)
    sp.add_argument("--rollouts", type=int, default=10)
    sp.add_argument("--horizon", type=int, default=80)

    sp = add("pca", cmd_pca, "cluster and project coefficients of banded contexts")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--families", type=int, default=3)
    sp.add_argument("--per-family", type=int, default=4)
    sp.add_argument("--calib", type=int, default=512)
    sp.add_argument("--svg", action="store_true")

    sp = add("overfit-demo", cmd_overfit_demo, "basis fit vs pooled network on the 1D family")
    sp.add_argument("--calib", type=int, default=512)
    sp.add_argument("--svg", action="store_true")

    sp = add("grad-check", cmd_grad_check, "finite-difference gradient suite")
    sp.add_argument("--nets", type=int, default=20)

    sp = add("solver-check", cmd_solver_check, "LAE solver vs brute-force oracle")
    sp.add_argument("--problems", type=int, default=200)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        world_over, train_over = load_config(args.config)
        return args.func(args, world_over, train_over)
    except ValidationError as e:
        print(e, file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:          # --help
        return 0 if e.code in (0, None) else 1


if __name__ == "__main__":
    sys.exit(main())
