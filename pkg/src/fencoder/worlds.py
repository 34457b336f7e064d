"""Multi-context data generators with known experts.

Two worlds:

* ``1d``: f(x) = a sin(3x) + b cos(2x) + d x on [-pi, pi]; the context is (a, b, d)
  and the family spans exactly three dimensions.
* ``grid``: a point agent in the unit square. The commanded action is passed
  through a hidden context matrix M = s R(theta) before it moves the agent, so
  the same observation [pos, goal] calls for different actions per context.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .encoder import ContextDataset
from .numerics import Prng

SUCCESS_RADIUS = 0.05
ARRIVAL_TOL = 1e-9      # the expert lands on its goal up to rounding


# ---------------------------------------------------------------------------
# 1D family
# ---------------------------------------------------------------------------

FAMILY_1D = (lambda x: np.sin(3 * x), lambda x: np.cos(2 * x), lambda x: x)


@dataclass(frozen=True)
class FunctionContext1D:
    a: float
    b: float
    d: float
    context_id: str = ""

    def __post_init__(self):
        if max(abs(self.a), abs(self.b), abs(self.d)) > 3.0:
            raise ValueError("1D context coefficients must lie in [-3, 3]")

    def to_json(self):
        return {"id": self.context_id, "a": self.a, "b": self.b, "d": self.d}


def expert_1d(ctx, x):
    return ctx.a * np.sin(3 * x) + ctx.b * np.cos(2 * x) + ctx.d * x


# ---------------------------------------------------------------------------
# Gridworld
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridContext:
    theta: float
    scale: float
    context_id: str = ""

    def __post_init__(self):
        if not 0.5 <= self.scale <= 2.0:
            raise ValueError("grid context scale must lie in [0.5, 2]")

    @property
    def matrix(self):
        c, s = np.cos(self.theta), np.sin(self.theta)
        return self.scale * np.array([[c, -s], [s, c]])

    @property
    def inverse(self):
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.array([[c, s], [-s, c]]) / self.scale

    def to_json(self):
        return {"id": self.context_id, "theta": self.theta, "scale": self.scale}


@dataclass
class GridState:
    pos: np.ndarray
    goal: np.ndarray

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64)
        self.goal = np.asarray(self.goal, dtype=np.float64)
        if np.any(self.pos < 0) or np.any(self.pos > 1) or np.any(self.goal < 0) or np.any(self.goal > 1):
            raise ValueError("positions must lie in the unit square")

    def obs(self):
        return np.concatenate([self.pos, self.goal])


@dataclass
class Trajectory:
    context_id: str
    obs: np.ndarray
    act: np.ndarray

    @property
    def horizon(self):
        return len(self.obs)


def grid_step(state, action, ctx, step_size=0.05):
    action = np.asarray(action, dtype=np.float64)
    if np.max(np.abs(action)) > 1.0 + 1e-12:
        raise ValueError("commanded action must satisfy ||a||_inf <= 1")
    pos = np.clip(state.pos + step_size * (ctx.matrix @ action), 0.0, 1.0)
    return GridState(pos, state.goal)


def grid_expert(state, ctx, step_size=0.05):
    """Context-aware expert: realized motion points straight at the goal.

    The command that would land exactly on the goal is M^-1 (goal - pos) / step;
    when its inf-norm exceeds 1 it is rescaled onto the unit box, so far from
    the goal the agent moves at full speed and close to it it stops on target.
    """
    v = ctx.inverse @ (state.goal - state.pos) / step_size
    n = np.max(np.abs(v))
    return v / max(1.0, n)


def rollout(policy, ctx, start, goal, horizon, step_size=0.05, radius=SUCCESS_RADIUS,
            stop_on_success=False):
    """Run ``policy(obs) -> action`` in context ``ctx``.

    Returns (Trajectory, success). Commands are clipped to [-1, 1] per axis.
    Success means the agent came within ``radius`` of the goal at some step.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    state = GridState(start, goal)
    obs_list, act_list = [], []
    success = bool(np.linalg.norm(state.pos - state.goal) < radius)
    for _ in range(horizon):
        if success and stop_on_success:
            break
        o = state.obs()
        a = np.asarray(policy(o), dtype=np.float64)
        if not np.all(np.isfinite(a)):
            return Trajectory(ctx.context_id, np.array(obs_list).reshape(-1, 4),
                              np.array(act_list).reshape(-1, 2)), False
        a = np.clip(a, -1.0, 1.0)
        obs_list.append(o)
        act_list.append(a)
        state = grid_step(state, a, ctx, step_size)
        success = success or bool(np.linalg.norm(state.pos - state.goal) < radius)
    return Trajectory(ctx.context_id, np.array(obs_list).reshape(-1, 4),
                      np.array(act_list).reshape(-1, 2)), success


def expert_policy(ctx, step_size=0.05):
    return lambda o: grid_expert(GridState(o[:2], o[2:]), ctx, step_size)


def expert_episode(ctx, rng, horizon, step_size=0.05, resample_goals=True, start=None):
    """One expert trajectory of exactly ``horizon`` pairs.

    With ``resample_goals`` a fresh goal is drawn whenever the agent has landed
    on the current one, so the episode keeps moving instead of idling at a
    single goal for most of its length.
    """
    pos = rng.uniform(0, 1, (2,)) if start is None else np.asarray(start, dtype=np.float64)
    state = GridState(pos, rng.uniform(0, 1, (2,)))
    obs, act = [], []
    for _ in range(horizon):
        if resample_goals and np.linalg.norm(state.pos - state.goal) < ARRIVAL_TOL:
            state = GridState(state.pos, rng.uniform(0, 1, (2,)))
        a = grid_expert(state, ctx, step_size)
        obs.append(state.obs())
        act.append(a)
        state = grid_step(state, a, ctx, step_size)
    return Trajectory(ctx.context_id, np.array(obs), np.array(act))


# ---------------------------------------------------------------------------
# World specs and dataset generation
# ---------------------------------------------------------------------------

@dataclass
class WorldSpec:
    kind: str = "grid"                 # "grid" | "1d"
    n_train: int = 8
    n_holdout: int = 5
    trajectories_per_context: int = 20
    horizon: int = 40                  # grid: steps per trajectory; 1d: points per trajectory
    step_size: float = 0.05
    label_noise: float = 0.0           # Laplace scale added to expert actions
    families: int = 0                  # grid only: >0 draws contexts in rotation bands
    band_width: float = 0.3
    max_train_cond: float = 2.5        # 1d only: conditioning of the train coefficient matrix
    resample_goals: bool = True        # grid only: new goal once the current one is reached

    def __post_init__(self):
        if self.kind not in ("grid", "1d"):
            raise ValueError(f"unknown world kind {self.kind!r}")
        if min(self.n_train, self.trajectories_per_context, self.horizon) < 1 or self.n_holdout < 0:
            raise ValueError("world counts must be >= 1")

    @property
    def obs_dim(self):
        return 4 if self.kind == "grid" else 1

    @property
    def d_a(self):
        return 2 if self.kind == "grid" else 1


def sample_contexts(spec, seed):
    """Train and held-out contexts for ``spec`` (deterministic in ``seed``)."""
    rng = Prng(seed).spawn(101)
    if spec.kind == "1d":
        mk = lambda i, tag: FunctionContext1D(rng.uniform(-3, 3), rng.uniform(-3, 3),
                                              rng.uniform(-3, 3), f"{tag}{i:02d}")
        # redraw until the training contexts cover all three family directions
        while True:
            train = [mk(i, "f") for i in range(spec.n_train)]
            coeffs = np.array([[c.a, c.b, c.d] for c in train])
            if spec.n_train < 3 or np.linalg.cond(coeffs) <= spec.max_train_cond:
                break
        return train, [mk(i, "h") for i in range(spec.n_holdout)]
    if spec.families > 0:
        ctxs = banded_grid_contexts(spec.families, spec.n_train + spec.n_holdout,
                                    spec.band_width, rng)
        return ctxs[:spec.n_train], ctxs[spec.n_train:]
    train = []
    for i in range(spec.n_train):
        theta = 2 * np.pi * (i + rng.uniform(-0.25, 0.25)) / spec.n_train
        train.append(GridContext(theta % (2 * np.pi), rng.uniform(0.5, 2.0), f"g{i:02d}"))
    holdout = [GridContext(rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 2.0), f"h{i:02d}")
               for i in range(spec.n_holdout)]
    return train, holdout


def banded_grid_contexts(n_families, n_contexts, width, rng, prefix="b"):
    """Contexts drawn round-robin from ``n_families`` rotation-angle bands."""
    out = []
    for i in range(n_contexts):
        fam = i % n_families
        center = 2 * np.pi * fam / n_families
        theta = (center + rng.uniform(-width / 2, width / 2)) % (2 * np.pi)
        out.append(GridContext(theta, rng.uniform(0.5, 2.0), f"{prefix}{fam}-{i:02d}"))
    return out


def context_family(ctx, n_families):
    """Index of the rotation band nearest to ``ctx.theta``."""
    step = 2 * np.pi / n_families
    return int(np.round(ctx.theta / step)) % n_families


def generate_context_data(spec, ctx, trajectories, rng, split="train"):
    obs, act, traj, t = [], [], [], []
    for n in range(trajectories):
        if spec.kind == "1d":
            x = rng.uniform(-np.pi, np.pi, (spec.horizon,))
            o, a = x[:, None], expert_1d(ctx, x)[:, None]
        else:
            tr = expert_episode(ctx, rng, spec.horizon, spec.step_size, spec.resample_goals)
            o, a = tr.obs, tr.act
        if spec.label_noise > 0:
            a = a + rng.laplace(spec.label_noise, a.shape)
        obs.append(o)
        act.append(a)
        traj += [n] * len(o)
        t += list(range(len(o)))
    return ContextDataset(ctx.context_id, np.vstack(obs), np.vstack(act),
                          np.array(traj), np.array(t), split=split)


def generate_dataset(spec, contexts, trajectories_per_context, seed, split="train"):
    """One ContextDataset per context; per-context streams derive from ``seed``."""
    if trajectories_per_context < 1:
        raise ValueError("trajectories_per_context must be >= 1")
    root = Prng(seed)
    out = []
    for i, ctx in enumerate(contexts):
        rng = root.spawn(1000 + _stable_key(ctx.context_id))
        out.append(generate_context_data(spec, ctx, trajectories_per_context, rng, split))
    n = len(out)
    for ds in out:
        ds.mixture_weight = 1.0 / n
    return out


def generate_world(spec, seed):
    """Contexts plus train and held-out datasets for ``spec``."""
    train_ctx, hold_ctx = sample_contexts(spec, seed)
    train = generate_dataset(spec, train_ctx, spec.trajectories_per_context, seed, "train")
    hold = generate_dataset(spec, hold_ctx, spec.trajectories_per_context, seed, "ood")
    return train_ctx, hold_ctx, train, hold


def _stable_key(text):
    h = 0
    for ch in text.encode():
        h = (h * 131 + ch) % (1 << 61)
    return h


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def write_datasets(out_dir, datasets, spec, contexts, seed):
    """Write data.jsonl (one record per pair) and manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "data.jsonl"), "w") as fh:
        for ds in datasets:
            for o, a, n, t in zip(ds.obs, ds.act, ds.traj, ds.t):
                fh.write(json.dumps({"ctx": ds.context_id, "traj": int(n), "t": int(t),
                                     "obs": o.tolist(), "act": a.tolist()}) + "\n")
    manifest = {
        "world": asdict(spec),
        "seed": seed,
        "contexts": [dict(c.to_json(), split=ds.split, n=len(ds), weight=ds.mixture_weight)
                     for c, ds in zip(contexts, datasets)],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def read_jsonl(path):
    """Group a JSON Lines pair file into per-context datasets (file order)."""
    groups = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            g = groups.setdefault(r["ctx"], ([], [], [], []))
            g[0].append(r["obs"])
            g[1].append(r["act"])
            g[2].append(r["traj"])
            g[3].append(r["t"])
    return [ContextDataset(cid, np.array(o, dtype=np.float64), np.array(a, dtype=np.float64),
                           np.array(n), np.array(t))
            for cid, (o, a, n, t) in groups.items()]


def read_datasets(out_dir):
    """Inverse of :func:`write_datasets`. Returns (datasets, manifest)."""
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    by_id = {ds.context_id: ds for ds in read_jsonl(os.path.join(out_dir, "data.jsonl"))}
    out = []
    for c in manifest["contexts"]:
        ds = by_id[c["id"]]
        ds.split = c["split"]
        ds.mixture_weight = c["weight"]
        out.append(ds)
    return out, manifest


def context_from_json(doc):
    if "theta" in doc:
        return GridContext(doc["theta"], doc["scale"], doc["id"])
    return FunctionContext1D(doc["a"], doc["b"], doc["d"], doc["id"])


def write_trajectory(path, traj, n=0):
    with open(path, "w") as fh:
        for t, (o, a) in enumerate(zip(traj.obs, traj.act)):
            fh.write(json.dumps({"ctx": traj.context_id, "traj": n, "t": t,
                                 "obs": o.tolist(), "act": a.tolist()}) + "\n")
