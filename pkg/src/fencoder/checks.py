"""Self-check suites behind ``grad-check`` and ``solver-check``."""

from __future__ import annotations

import numpy as np

from .encoder import ContextDataset, TrainConfig, init_state, train_step_grad_check
from .lae import RegressionProblem, brute_force_lae, solve_lae
from .numerics import Prng, finite_difference_check
from .skillnet import BasisNetwork, MonolithicNetwork, NetConfig

GRAD_KINDS = ("fused", "per_head", "residual", "monolithic", "train_step_fused",
              "train_step_per_head")
GRAD_TOL = 1e-4
SOLVER_TOL = 1e-8


def _smooth_check(net, obs, rng, h):
    """Gradient of a smooth scalar of the network output vs central differences."""
    y, cache = net.forward(obs)
    W = rng.uniform(-1, 1, y.shape)

    def value():
        out = net.forward(obs)[0]
        return float(np.sum(W * out) + 0.5 * np.sum(out ** 2))

    grads = net.backward(cache, W + y)
    return finite_difference_check(value, net.params(), grads, h)


def grad_check_one(kind, seed, h=1e-5):
    """Returns (max relative error, number of kink-excluded entries)."""
    rng = Prng(seed)
    obs_dim, d_a, k = 2 + seed % 3, 1 + seed % 2, 2 + seed % 3
    if kind.startswith("train_step"):
        mode = "per_head" if kind.endswith("per_head") else "fused"
        cfg = TrainConfig(k=k, hidden=5, n_hidden=2, head_mode=mode, head_hidden=4,
                          head_gain=1.0, gram_probes=8, seed=seed)
        ds = [ContextDataset(f"c{i}", rng.uniform(-1, 1, (5, obs_dim)),
                             rng.uniform(-1, 1, (5, d_a))) for i in range(2)]
        st = init_state(cfg, ds)
        table = {d.context_id: (rng.uniform(-1, 1, (k,)), 0) for d in ds}
        batch = [(d.context_id, d.obs, d.act) for d in ds]
        return train_step_grad_check(st.net, batch, table, st.probe_obs, 1.0, h)
    cfg = NetConfig(obs_dim=obs_dim, d_a=d_a, k=k, hidden=5, n_hidden=2,
                    head_mode="per_head" if kind == "per_head" else "fused", head_hidden=4,
                    residual=kind == "residual", head_gain=1.0)
    net = (MonolithicNetwork(cfg, rng.spawn(0)) if kind == "monolithic"
           else BasisNetwork(cfg, rng.spawn(0)))
    return _smooth_check(net, rng.uniform(-1, 1, (6, obs_dim)), rng.spawn(1), h), 0


def grad_check_suite(n_nets=20, seed=0):
    rows = []
    for i in range(n_nets):
        kind = GRAD_KINDS[i % len(GRAD_KINDS)]
        err, excluded = grad_check_one(kind, seed * 1000 + i)
        rows.append({"net": i, "kind": kind, "error": float(err), "excluded": excluded,
                     "passed": bool(err < GRAD_TOL)})
    return rows


def random_problem(rng, max_m=10, max_k=3):
    k = 1 + rng.integers(max_k)
    m = k + rng.integers(max_m - k + 1)
    return RegressionProblem(rng.uniform(-1, 1, (m, k)), rng.uniform(-1, 1, (m,)))


def solver_check_suite(n_problems=200, seed=0):
    rng = Prng(seed).spawn(31)
    rows = []
    for i in range(n_problems):
        p = random_problem(rng)
        got, want = solve_lae(p).objective, brute_force_lae(p).objective
        rows.append({"problem": i, "m": p.G.shape[0], "k": p.k, "lae": float(got),
                     "oracle": float(want), "passed": bool(abs(got - want) <= SOLVER_TOL)})
    return rows
