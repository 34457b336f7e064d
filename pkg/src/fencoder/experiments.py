"""Desk-scale experiment pipelines shared by the CLI and the acceptance tests."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .analysis import cluster_score, eval_contexts, pca_project, svg_lines
from .encoder import (TrainConfig, adapt_one_shot, calibrate, reg_loss,
                      gram_matrix, train, train_monolithic, write_history)
from .numerics import Prng
from .skillnet import policy_action, policy_actions
from .worlds import (WorldSpec, banded_grid_contexts, context_family, expert_1d,
                     expert_episode, generate_dataset, generate_world, rollout)

# Desk presets. Full-scale defaults live on TrainConfig itself; these trade
# the 1e-4 constant rate for a cosine-decayed 1e-2 so 2000 steps suffice.
DESK_1D = dict(k=3, lr=1e-2, lr_schedule="cosine", total_steps=2000, batch_size=256,
               hidden=128, n_hidden=3, gram_probes=512, head_gain=1.0, reg_weight=3.0)
DESK_GRID = dict(k=8, lr=1e-2, lr_schedule="cosine", total_steps=2000, batch_size=256,
                 hidden=128, n_hidden=3, gram_probes=512, head_gain=1.0, reg_weight=3.0)
WORLD_1D = dict(kind="1d", n_train=6, n_holdout=1, trajectories_per_context=1, horizon=1024)
WORLD_GRID = dict(kind="grid", n_train=8, n_holdout=5, trajectories_per_context=20, horizon=40)


def desk_config(kind, **overrides):
    base = DESK_1D if kind == "1d" else DESK_GRID
    return TrainConfig(**dict(base, **overrides))


def final_coefficients(state):
    """Fresh coefficients for every training context from its buffer."""
    return {cid: calibrate(state.net, buf.obs, buf.act, cid).alpha
            for cid, buf in sorted(state.buffers.items())}


# ---------------------------------------------------------------------------
# Mixed-context overfitting (1D)
# ---------------------------------------------------------------------------

@dataclass
class OverfitConfig:
    seed: int = 1
    world: dict = field(default_factory=lambda: dict(WORLD_1D))
    train: dict = field(default_factory=lambda: dict(DESK_1D))
    calib_samples: int = 512
    curve_points: int = 201


def overfit_demo(cfg=None, out_dir=None, svg=False):
    """Basis model vs one pooled network on the 1D family.

    Returns a summary dict; with ``out_dir`` also writes curves.csv,
    summary.json and both training histories.
    """
    cfg = cfg or OverfitConfig()
    spec = WorldSpec(**cfg.world)
    train_ctx, hold_ctx, train_ds, hold_ds = generate_world(spec, cfg.seed)
    tcfg = TrainConfig(**dict(cfg.train, seed=cfg.seed))
    state = train(tcfg, train_ds)
    mono, mono_hist = train_monolithic(tcfg, train_ds)

    # fresh samples for the training contexts so scoring never reuses training pairs
    val_ds = generate_dataset(spec, train_ctx, spec.trajectories_per_context, cfg.seed + 7919)
    report = eval_contexts(state.net, val_ds + hold_ds, cfg.calib_samples, cfg.seed,
                           baseline=mono)
    K = gram_matrix(state.net, state.probe_obs)
    summary = {
        "fe_train_l1": report.aggregate("train"),
        "fe_holdout_l1": report.aggregate("ood"),
        "mono_train_l1": report.aggregate("train", "baseline_l1"),
        "mono_holdout_l1": report.aggregate("ood", "baseline_l1"),
        "reg_initial": state.history[0][2],
        "reg_final": reg_loss(K),
        "gram_asymmetry": float(np.abs(K - K.T).max()),
        "diverged": False,
    }
    summary["mono_over_fe_holdout"] = summary["mono_holdout_l1"] / max(summary["fe_holdout_l1"], 1e-300)

    x = np.linspace(-np.pi, np.pi, cfg.curve_points)
    curves = {"x": x}
    for ctx, ds in zip(train_ctx + hold_ctx, val_ds + hold_ds):
        row = next(r for r in report.rows if r.context_id == ctx.context_id)
        curves[f"{ctx.context_id}_true"] = expert_1d(ctx, x)
        curves[f"{ctx.context_id}_fe"] = policy_actions(state.net, row.alpha, x[:, None])[:, 0]
    curves["mono"] = mono.predict(x[:, None])[:, 0]

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "curves.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            names = list(curves)
            w.writerow(names)
            for i in range(len(x)):
                w.writerow([repr(float(curves[n][i])) for n in names])
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        report.write_csv(os.path.join(out_dir, "report.csv"))
        report.write_csv(os.path.join(out_dir, "baseline_report.csv"), "baseline_l1")
        write_history(os.path.join(out_dir, "history_fe.csv"), state.history)
        write_history(os.path.join(out_dir, "history_mono.csv"), mono_hist)
        if svg:
            svg_lines(os.path.join(out_dir, "curves.svg"), x,
                      {k: v for k, v in curves.items() if k != "x"},
                      "true / basis-fit / pooled network")
    summary["report"] = report
    summary["state"] = state
    summary["mono"] = mono
    return summary


# ---------------------------------------------------------------------------
# Gridworld
# ---------------------------------------------------------------------------

@dataclass
class GridExperiment:
    spec: WorldSpec
    train_ctx: list
    hold_ctx: list
    state: object
    mono: object
    report: object


def grid_experiment(seed=1, world=None, train_overrides=None, calib_samples=512,
                    with_baseline=True):
    """Train the basis model (and the pooled baseline) on the gridworld, then
    score every context with the calibrate-then-evaluate protocol."""
    spec = WorldSpec(**dict(WORLD_GRID, **(world or {})))
    train_ctx, hold_ctx, train_ds, hold_ds = generate_world(spec, seed)
    tcfg = desk_config("grid", seed=seed, **(train_overrides or {}))
    state = train(tcfg, train_ds)
    mono = train_monolithic(tcfg, train_ds)[0] if with_baseline else None
    val_ds = generate_dataset(spec, train_ctx, spec.trajectories_per_context, seed + 7919)
    report = eval_contexts(state.net, val_ds + hold_ds, calib_samples, seed, baseline=mono)
    return GridExperiment(spec, train_ctx, hold_ctx, state, mono, report)


def sample_start_goal(rng, min_dist=0.0):
    while True:
        start, goal = rng.uniform(0, 1, (2,)), rng.uniform(0, 1, (2,))
        if np.linalg.norm(goal - start) >= min_dist:
            return start, goal


def one_shot_eval(net, ctx, seed, alpha_baseline=None, demo_horizon=40, n_rollouts=10,
                  horizon=80, step_size=0.05, resample_goals=True):
    """Adapt from one expert demonstration, then roll out on fresh start/goal pairs.

    Returns a dict with the calibrated coefficients, the success count and
    (if ``alpha_baseline`` is given) the success count of the uncalibrated policy.
    """
    rng = Prng(seed).spawn(7)
    demo = expert_episode(ctx, rng, demo_horizon, step_size, resample_goals)
    coeff = adapt_one_shot(net, demo)
    pairs = [sample_start_goal(rng) for _ in range(n_rollouts)]
    out = {"context_id": ctx.context_id, "alpha": coeff.alpha, "demo_len": demo.horizon,
           "successes": 0, "baseline_successes": None}
    for s, g in pairs:
        _, ok = rollout(lambda o: policy_action(net, coeff.alpha, o), ctx, s, g, horizon,
                        step_size, stop_on_success=True)
        out["successes"] += int(ok)
    if alpha_baseline is not None:
        out["baseline_successes"] = 0
        for s, g in pairs:
            _, ok = rollout(lambda o: policy_action(net, alpha_baseline, o), ctx, s, g,
                            horizon, step_size, stop_on_success=True)
            out["baseline_successes"] += int(ok)
    return out


def coefficient_clusters(net, n_families=3, per_family=4, seed=11, band_width=0.3,
                         trajectories=20, calib_samples=512, spec=None):
    """Calibrate fresh banded contexts and score how their coefficients group.

    Returns (coefficients, family per context, Projection2D, (intra, inter)).
    """
    spec = spec or WorldSpec(**WORLD_GRID)
    rng = Prng(seed).spawn(55)
    ctxs = banded_grid_contexts(n_families, n_families * per_family, band_width, rng)
    data = generate_dataset(spec, ctxs, trajectories, seed)
    coeffs, family, groups = {}, {}, {}
    for ctx, ds in zip(ctxs, data):
        n = min(calib_samples, len(ds))
        alpha = calibrate(net, ds.obs[:n], ds.act[:n], ctx.context_id).alpha
        coeffs[ctx.context_id] = alpha
        family[ctx.context_id] = context_family(ctx, n_families)
        groups.setdefault(family[ctx.context_id], []).append(alpha)
    return coeffs, family, pca_project(coeffs), cluster_score(groups)
