"""Function-encoder training and gradient-free calibration with L1 coefficients.

Training alternates two phases. Every ``recalibration_period`` steps each
context's coefficients are re-solved (exact LAE) from its calibration buffer
and then held fixed; in between, the basis parameters take Adam steps on the
L1 reconstruction loss plus a Gram-matrix regularizer that pulls the basis
towards orthonormality. No gradient flows through the coefficient solve.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics
from .lae import RegressionProblem, solve_lae
from .numerics import AdamState, DivergenceError, Prng, adam_step, save_checkpoint
from .skillnet import BasisNetwork, MonolithicNetwork, NetConfig


@dataclass
class ContextDataset:
    context_id: str
    obs: np.ndarray
    act: np.ndarray
    traj: np.ndarray = None
    t: np.ndarray = None
    mixture_weight: float = 1.0
    split: str = "train"

    def __post_init__(self):
        self.obs = np.atleast_2d(np.asarray(self.obs, dtype=np.float64))
        self.act = np.asarray(self.act, dtype=np.float64).reshape(len(self.obs), -1)
        n = len(self.obs)
        if n < 1:
            raise ValueError(f"context {self.context_id} has no samples")
        self.traj = np.zeros(n, dtype=np.int64) if self.traj is None else np.asarray(self.traj)
        self.t = np.arange(n) if self.t is None else np.asarray(self.t)
        if self.mixture_weight < 0:
            raise ValueError("mixture weight must be >= 0")

    def __len__(self):
        return len(self.obs)

    def subset(self, idx):
        idx = np.asarray(idx)
        return ContextDataset(self.context_id, self.obs[idx], self.act[idx], self.traj[idx],
                              self.t[idx], self.mixture_weight, self.split)


@dataclass
class CoefficientVector:
    alpha: np.ndarray
    objective: float = 0.0
    n_samples: int = 0
    status: str = "optimal"
    solver: str = "lae-simplex"
    context_id: str = None


@dataclass
class CalibrationBuffer:
    context_id: str
    capacity: int
    obs: np.ndarray
    act: np.ndarray

    def __len__(self):
        return len(self.obs)


@dataclass
class TrainConfig:
    k: int = 8
    lr: float = 1e-4
    warmup_steps: int = 10
    total_steps: int = 5000
    batch_size: int = 64
    recalibration_period: int = 16
    buffer_capacity: int = 512
    reg_weight: float = 1.0
    num_virtual_nodes: int = 1
    seed: int = 0
    gram_probes: int = 1024
    hidden: int = 128
    n_hidden: int = 2
    activation: str = "tanh"
    head_mode: str = "fused"
    head_hidden: int = 32
    residual: bool = False
    head_gain: float = 0.1
    lr_schedule: str = "constant"      # "constant" | "cosine"
    min_lr_frac: float = 0.0

    def __post_init__(self):
        counts = (self.k, self.warmup_steps, self.total_steps, self.batch_size,
                  self.recalibration_period, self.buffer_capacity, self.num_virtual_nodes,
                  self.gram_probes, self.hidden, self.n_hidden)
        if min(counts) < 1:
            raise ValueError("all TrainConfig counts must be >= 1")
        if self.reg_weight < 0 or self.lr <= 0:
            raise ValueError("reg_weight must be >= 0 and lr > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    @classmethod
    def full_scale(cls, **kw):
        """Full-scale schedule: 16 bases, batch 320, 5000 steps."""
        return cls(**dict(dict(k=16, batch_size=320, total_steps=5000), **kw))

    def net_config(self, obs_dim, d_a):
        return NetConfig(obs_dim=obs_dim, d_a=d_a, k=self.k, hidden=self.hidden,
                         n_hidden=self.n_hidden, activation=self.activation,
                         head_mode=self.head_mode, head_hidden=self.head_hidden,
                         residual=self.residual, head_gain=self.head_gain)

    def make_optimizer(self, params):
        decay = self.total_steps if self.lr_schedule == "cosine" else 0
        return AdamState.for_params(params, lr=self.lr, decay_steps=decay,
                                    min_lr_frac=self.min_lr_frac)

    def to_json(self):
        return asdict(self)


@dataclass
class TrainState:
    net: object
    opt: AdamState
    config: TrainConfig
    step: int = 0
    table: dict = field(default_factory=dict)     # context_id -> (alpha, calibrated_at_step)
    buffers: dict = field(default_factory=dict)
    probe_obs: np.ndarray = None
    history: list = field(default_factory=list)   # (step, loss_l1, loss_reg, lr)
    snapshots: list = field(default_factory=list)  # (step, {context_id: alpha})


# ---------------------------------------------------------------------------
# Losses, calibration, Gram matrix
# ---------------------------------------------------------------------------

def empirical_l1(pred, target):
    """Mean over samples of the summed absolute error across action dims."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return float(np.abs(pred - target).sum(axis=1).mean())


def stack_problem(B, act):
    """Stack per-sample basis outputs (n, k, d_a) into G (n*d_a, k) and y."""
    n, k, d_a = B.shape
    act = np.asarray(act, dtype=np.float64).reshape(n, d_a)
    return RegressionProblem(B.transpose(0, 2, 1).reshape(n * d_a, k), act.reshape(-1))


def calibrate(net, obs, act, context_id=None):
    """Coefficients minimising the L1 error of the basis on (obs, act) pairs.

    Forward passes only: the basis is evaluated once on every observation and
    the resulting LP is solved exactly.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if len(obs) < 1:
        raise ValueError("calibration needs at least one sample")
    B, _ = net.forward(obs)
    sol = solve_lae(stack_problem(B, act))
    return CoefficientVector(sol.alpha, sol.objective, len(obs), sol.status,
                             context_id=context_id)


def adapt_one_shot(net, demonstration):
    """Coefficients for an unseen context from one demonstration trajectory.

    The trajectory (anything with ``obs``/``act`` arrays) is used as an
    unordered set of (obs, action) pairs.
    """
    if len(demonstration.obs) < 1:
        raise ValueError("empty demonstration")
    return calibrate(net, demonstration.obs, demonstration.act, demonstration.context_id)


def gram_from_basis(B):
    return np.einsum("nia,nja->ij", B, B) / B.shape[0]


def gram_matrix(net, probe_obs):
    """K_ij = mean over probes of g_i(s) . g_j(s)."""
    probe_obs = np.atleast_2d(np.asarray(probe_obs, dtype=np.float64))
    if probe_obs.shape[0] == 0:
        raise ValueError("empty probe set")
    return gram_from_basis(net.forward(probe_obs)[0])


def reg_loss(K):
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("K must be square")
    return float(((K - np.eye(K.shape[0])) ** 2).sum())


# ---------------------------------------------------------------------------
# Loss + gradient for one training step
# ---------------------------------------------------------------------------

def _batch_arrays(batch):
    obs = np.vstack([o for _, o, _ in batch])
    sizes = [len(o) for _, o, _ in batch]
    return obs, sizes


def total_loss(net, batch, table, probe_obs, reg_weight, with_grad=True):
    """L + reg_weight * L_reg and its parameter gradient.

    ``batch`` is a list of (context_id, obs, act) groups; L sums the per-context
    empirical L1 errors of combine(B(s), alpha_c). Coefficients are constants.
    Returns (L, L_reg, grads, residuals); grads is None when not requested.
    """
    for cid, _, _ in batch:
        if cid not in table:
            raise KeyError(f"no coefficients for context {cid!r}")
    obs, sizes = _batch_arrays(batch)
    n_batch = len(obs)
    use_reg = reg_weight > 0 and probe_obs is not None
    all_obs = np.vstack([obs, probe_obs]) if use_reg else obs
    B_all, cache = net.forward(all_obs)
    B = B_all[:n_batch]
    dB = np.zeros_like(B_all)
    L = 0.0
    residuals = []
    start = 0
    for (cid, _, act), n in zip(batch, sizes):
        alpha = table[cid][0]
        Bc = B[start:start + n]
        pred = np.einsum("nia,i->na", Bc, alpha)
        r = pred - np.asarray(act).reshape(pred.shape)
        L += float(np.abs(r).sum(axis=1).mean())
        residuals.append(r)
        # sign(0) := 0
        dB[start:start + n] = np.einsum("i,na->nia", alpha, np.sign(r)) / n
        start += n
    L_reg = 0.0
    if use_reg:
        Bp = B_all[n_batch:]
        K = gram_from_basis(Bp)
        E = K - np.eye(K.shape[0])
        L_reg = float((E ** 2).sum())
        # dL_reg/dB_p = (2/m) (E + E^T) B_p, with E symmetric
        dB[n_batch:] = reg_weight * (4.0 / len(Bp)) * np.einsum("ij,nja->nia", E, Bp)
    if not (np.isfinite(L) and np.isfinite(L_reg)):
        raise DivergenceError("non-finite loss")
    grads = net.backward(cache, dB) if with_grad else None
    return L, L_reg, grads, np.concatenate([r.ravel() for r in residuals])


def train_step(state, batch):
    """One Adam step on L + lambda * L_reg with coefficients held fixed."""
    cfg = state.config
    L, L_reg, grads, _ = total_loss(state.net, batch, state.table, state.probe_obs,
                                    cfg.reg_weight)
    try:
        lr = adam_step(state.net.params(), grads, state.opt, cfg.warmup_steps)
    except DivergenceError as e:
        raise DivergenceError("non-finite gradient", state.step) from e
    state.history.append((state.step, L, L_reg, lr))
    state.step += 1
    return L, L_reg


def train_step_grad_check(net, batch, table, probe_obs, reg_weight, h=1e-5, kink=1e-6):
    """Finite-difference check of the training-loss gradient.

    Parameters whose +/-h perturbation moves any residual across (or within
    ``kink`` of) zero are excluded, since |.| is not differentiable there.
    """
    L, R, grads, base = total_loss(net, batch, table, probe_obs, reg_weight)
    params = net.params()
    crossed = {}

    def f():
        L, R, _, res = total_loss(net, batch, table, probe_obs, reg_weight, with_grad=False)
        crossed["res"] = res
        return L + reg_weight * R

    excluded = [0]

    def skip(pi, j):
        # func() was just evaluated at -h; compare against +h by re-evaluation
        p = params[pi].reshape(-1)
        orig = p[j]
        p[j] = orig + h
        f()
        res_plus = crossed["res"]
        p[j] = orig - h
        f()
        res_minus = crossed["res"]
        p[j] = orig
        bad = (np.any(np.sign(res_plus) != np.sign(res_minus))
               or np.any(np.abs(res_plus) < kink) or np.any(np.abs(res_minus) < kink))
        excluded[0] += bool(bad)
        return bad

    if np.any(np.abs(base) < kink):
        raise ValueError("base point lies on a kink of the L1 loss")
    err = numerics.finite_difference_check(f, params, grads, h, skip)
    return err, excluded[0]


# ---------------------------------------------------------------------------
# Buffers, recalibration, minibatches
# ---------------------------------------------------------------------------

def fill_buffers(datasets, capacity, rng):
    """First ``capacity`` samples of each context under a seeded shuffle."""
    buffers = {}
    for i, ds in enumerate(sorted(datasets, key=lambda d: d.context_id)):
        perm = rng.spawn(i).permutation(len(ds))[:capacity]
        buffers[ds.context_id] = CalibrationBuffer(ds.context_id, capacity,
                                                   ds.obs[perm], ds.act[perm])
    return buffers


def node_assignment(context_ids, num_nodes):
    """Round-robin by sorted id: context j lives on node j mod num_nodes."""
    if num_nodes < 1:
        raise ValueError("num_nodes must be >= 1")
    nodes = [[] for _ in range(num_nodes)]
    for j, cid in enumerate(sorted(context_ids)):
        nodes[j % num_nodes].append(cid)
    return nodes


def recalibrate_all(state, num_virtual_nodes=1):
    """Each virtual node solves for the contexts it hosts; results are merged."""
    for cid, buf in state.buffers.items():
        if len(buf) == 0:
            raise ValueError(f"empty calibration buffer for {cid!r}")
    per_node = []
    for hosted in node_assignment(state.buffers, num_virtual_nodes):
        per_node.append({cid: calibrate(state.net, state.buffers[cid].obs,
                                        state.buffers[cid].act, cid).alpha
                         for cid in hosted})
    # broadcast: every node ends up with the same merged table
    merged = {}
    for table in per_node:
        merged.update(table)
    for cid in sorted(merged):
        state.table[cid] = (merged[cid], state.step)
    state.snapshots.append((state.step, {cid: state.table[cid][0] for cid in sorted(merged)}))
    return state.table


def sample_minibatch(datasets, batch_size, rng):
    """Contexts drawn by mixture weight, then samples uniformly within context."""
    cdf = list(itertools.accumulate(ds.mixture_weight for ds in datasets))
    picks = {}
    for _ in range(batch_size):
        c = rng.choice(cdf=cdf)
        picks.setdefault(c, []).append(rng.integers(len(datasets[c])))
    batch = []
    for c in sorted(picks, key=lambda c: datasets[c].context_id):
        idx = np.array(picks[c])
        batch.append((datasets[c].context_id, datasets[c].obs[idx], datasets[c].act[idx]))
    return batch


def _probe_set(buffers, max_probes, rng):
    obs = np.vstack([buffers[cid].obs for cid in sorted(buffers)])
    if len(obs) > max_probes:
        obs = obs[np.sort(rng.permutation(len(obs))[:max_probes])]
    return obs


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def init_state(config, datasets):
    if not datasets:
        raise ValueError("need at least one dataset")
    root = Prng(config.seed)
    ds0 = datasets[0]
    net = BasisNetwork(config.net_config(ds0.obs.shape[1], ds0.act.shape[1]), root.spawn(0))
    state = TrainState(net, config.make_optimizer(net.params()), config)
    state.buffers = fill_buffers(datasets, config.buffer_capacity, root.spawn(1))
    state.probe_obs = _probe_set(state.buffers, config.gram_probes, root.spawn(3))
    return state


def train(config, datasets, callback=None):
    """Run the full schedule and return the final TrainState.

    Coefficients are recomputed before the update at every step that is a
    multiple of ``recalibration_period`` (including step 0).
    """
    total = sum(ds.mixture_weight for ds in datasets)
    if total <= 0:
        raise ValueError("mixture weights must not all be zero")
    for ds in datasets:
        ds.mixture_weight = ds.mixture_weight / total
    state = init_state(config, datasets)
    rng = Prng(config.seed).spawn(2)
    for _ in range(config.total_steps):
        if state.step % config.recalibration_period == 0:
            recalibrate_all(state, config.num_virtual_nodes)
        batch = sample_minibatch(datasets, config.batch_size, rng)
        train_step(state, batch)
        if callback is not None:
            callback(state)
    return state


def train_monolithic(config, datasets):
    """Pooled-data baseline: one head, mean L1 over the minibatch, no contexts.

    Returns (net, history) with history rows (step, loss_l1, 0.0, lr).
    """
    total = sum(ds.mixture_weight for ds in datasets)
    for ds in datasets:
        ds.mixture_weight = ds.mixture_weight / total
    root = Prng(config.seed)
    ds0 = datasets[0]
    net = MonolithicNetwork(config.net_config(ds0.obs.shape[1], ds0.act.shape[1]),
                            root.spawn(0))
    opt = config.make_optimizer(net.params())
    rng = root.spawn(2)
    history = []
    for step in range(config.total_steps):
        batch = sample_minibatch(datasets, config.batch_size, rng)
        obs = np.vstack([o for _, o, _ in batch])
        act = np.vstack([a for _, _, a in batch])
        loss, grads = monolithic_loss(net, obs, act)
        lr = adam_step(net.params(), grads, opt, config.warmup_steps)
        history.append((step, loss, 0.0, lr))
    return net, history


def monolithic_loss(net, obs, act, with_grad=True):
    y, cache = net.forward(obs)
    r = y - act
    loss = float(np.abs(r).sum(axis=1).mean())
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")
    grads = net.backward(cache, np.sign(r) / len(obs)) if with_grad else None
    return loss, grads


# ---------------------------------------------------------------------------
# Run directory
# ---------------------------------------------------------------------------

def write_run(out_dir, state, extra_meta=None):
    """config.json, history.csv, coefficients.json and checkpoint.json."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(state.config.to_json(), fh, indent=2)
        fh.write("\n")
    write_history(os.path.join(out_dir, "history.csv"), state.history)
    with open(os.path.join(out_dir, "coefficients.json"), "w") as fh:
        json.dump([{"step": s, "alpha": {c: a.tolist() for c, a in tab.items()}}
                   for s, tab in state.snapshots], fh)
        fh.write("\n")
    meta = dict(state.net.meta(), seed=state.config.seed, dims=state.net.cfg.trunk_dims(),
                step=state.step)
    meta.update(extra_meta or {})
    save_checkpoint(os.path.join(out_dir, "checkpoint.json"), meta, state.net.params())


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_l1", "loss_reg", "lr"])
        for step, L, R, lr in history:
            w.writerow([step, repr(float(L)), repr(float(R)), repr(float(lr))])
