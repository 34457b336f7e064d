"""Shared-trunk basis network with k action heads, and the single-head baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Mlp, mlp_backward, mlp_forward


@dataclass
class NetConfig:
    obs_dim: int
    d_a: int = 2
    k: int = 8
    hidden: int = 128
    n_hidden: int = 2
    activation: str = "tanh"
    head_mode: str = "fused"     # "fused" | "per_head"
    head_hidden: int = 32        # per_head mode only
    residual: bool = False
    head_gain: float = 0.1

    def trunk_dims(self):
        return [self.obs_dim] + [self.hidden] * self.n_hidden

    @property
    def feature_dim(self):
        return self.trunk_dims()[-1]


def _make_trunk(cfg, rng):
    return Mlp.init(cfg.trunk_dims(), rng, activation=cfg.activation,
                    out_activation=cfg.activation, residual=cfg.residual)


class BasisNetwork:
    """k basis functions g_1..g_k sharing one trunk.

    ``basis_eval`` returns, per observation, a k x d_a matrix whose row i is
    g_i(obs). In fused mode a single linear layer emits k*d_a numbers which are
    reshaped; in per_head mode each basis has its own small MLP head.
    """

    def __init__(self, cfg, rng=None, trunk=None, heads=None):
        self.cfg = cfg
        self.k, self.d_a = cfg.k, cfg.d_a
        if cfg.k < 1 or cfg.d_a < 1:
            raise ValueError("k and d_a must be >= 1")
        if cfg.head_mode not in ("fused", "per_head"):
            raise ValueError(f"unknown head mode {cfg.head_mode!r}")
        self.trunk = trunk if trunk is not None else _make_trunk(cfg, rng)
        if heads is not None:
            self.heads = heads
        elif cfg.head_mode == "fused":
            self.heads = [Mlp.init([cfg.feature_dim, cfg.k * cfg.d_a], rng,
                                   activation=cfg.activation, out_gain=cfg.head_gain)]
        else:
            self.heads = [Mlp.init([cfg.feature_dim, cfg.head_hidden, cfg.d_a], rng,
                                   activation=cfg.activation, out_gain=cfg.head_gain)
                          for _ in range(cfg.k)]

    @property
    def obs_dim(self):
        return self.cfg.obs_dim

    def nets(self):
        return [self.trunk] + self.heads

    def params(self):
        return [p for net in self.nets() for p in net.params()]

    def set_params(self, params):
        i = 0
        for net in self.nets():
            n = 2 * net.n_layers
            net.set_params(params[i:i + n])
            i += n

    def n_params(self):
        return sum(net.n_params() for net in self.nets())

    def forward(self, obs):
        """Batched basis evaluation: (n, obs_dim) -> ((n, k, d_a), cache)."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        feat, t_trunk = mlp_forward(self.trunk, obs)
        if self.cfg.head_mode == "fused":
            out, t_head = mlp_forward(self.heads[0], feat)
            B = out.reshape(len(obs), self.k, self.d_a)
            return B, (t_trunk, [t_head])
        outs, tapes = [], []
        for head in self.heads:
            o, t = mlp_forward(head, feat)
            outs.append(o)
            tapes.append(t)
        return np.stack(outs, axis=1), (t_trunk, tapes)

    def backward(self, cache, dB):
        """Gradients of a scalar loss given dLoss/dB of shape (n, k, d_a)."""
        t_trunk, t_heads = cache
        n = dB.shape[0]
        if self.cfg.head_mode == "fused":
            g_head, dfeat = mlp_backward(self.heads[0], t_heads[0], dB.reshape(n, -1))
            head_grads = g_head
        else:
            head_grads, dfeat = [], 0.0
            for i, (head, t) in enumerate(zip(self.heads, t_heads)):
                g, df = mlp_backward(head, t, dB[:, i, :])
                head_grads += g
                dfeat = dfeat + df
        g_trunk, _ = mlp_backward(self.trunk, t_trunk, dfeat)
        return g_trunk + head_grads

    def basis_eval(self, obs):
        """k x d_a matrix of basis outputs at a single observation."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (self.obs_dim,):
            raise ValueError(f"expected observation of dim {self.obs_dim}")
        return self.forward(obs)[0][0]

    def meta(self):
        c = self.cfg
        return {"kind": "basis", "obs_dim": c.obs_dim, "d_a": c.d_a, "k": c.k,
                "hidden": c.hidden, "n_hidden": c.n_hidden, "activation": c.activation,
                "head_mode": c.head_mode, "head_hidden": c.head_hidden,
                "residual": c.residual, "trunk_dims": c.trunk_dims()}


class MonolithicNetwork:
    """Same trunk architecture with a single d_a-dimensional head.

    Deliberately exposes no coefficient interface: it cannot be calibrated.
    """

    def __init__(self, cfg, rng=None, trunk=None, head=None):
        self.cfg = cfg
        self.d_a = cfg.d_a
        self.trunk = trunk if trunk is not None else _make_trunk(cfg, rng)
        self.head = head if head is not None else Mlp.init(
            [cfg.feature_dim, cfg.d_a], rng, activation=cfg.activation, out_gain=cfg.head_gain)

    @property
    def obs_dim(self):
        return self.cfg.obs_dim

    def nets(self):
        return [self.trunk, self.head]

    def params(self):
        return self.trunk.params() + self.head.params()

    def set_params(self, params):
        n = 2 * self.trunk.n_layers
        self.trunk.set_params(params[:n])
        self.head.set_params(params[n:])

    def n_params(self):
        return self.trunk.n_params() + self.head.n_params()

    def forward(self, obs):
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        feat, t1 = mlp_forward(self.trunk, obs)
        y, t2 = mlp_forward(self.head, feat)
        return y, (t1, t2)

    def backward(self, cache, dy):
        t1, t2 = cache
        g_head, dfeat = mlp_backward(self.head, t2, dy)
        g_trunk, _ = mlp_backward(self.trunk, t1, dfeat)
        return g_trunk + g_head

    def predict(self, obs):
        obs = np.asarray(obs, dtype=np.float64)
        y = self.forward(obs)[0]
        return y[0] if obs.ndim == 1 else y

    def meta(self):
        c = self.cfg
        return {"kind": "monolithic", "obs_dim": c.obs_dim, "d_a": c.d_a,
                "hidden": c.hidden, "n_hidden": c.n_hidden, "activation": c.activation,
                "residual": c.residual, "trunk_dims": c.trunk_dims()}


def combine(B, alpha):
    """Linear combination of basis rows: B^T alpha (also batched over leading axis)."""
    B = np.asarray(B, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (B.shape[-2],):
        raise ValueError(f"alpha must have length {B.shape[-2]}")
    return np.einsum("...ij,i->...j", B, alpha)


def policy_action(net, alpha, obs):
    """Action of the calibrated policy at ``obs`` (a single observation)."""
    return combine(net.basis_eval(obs), alpha)


def policy_actions(net, alpha, obs):
    """Batched form of :func:`policy_action`."""
    return combine(net.forward(obs)[0], alpha)


def network_from_meta(meta, params):
    """Rebuild a network from checkpoint meta and parameter arrays."""
    cfg = NetConfig(obs_dim=meta["obs_dim"], d_a=meta["d_a"], k=meta.get("k", 1),
                    hidden=meta["hidden"], n_hidden=meta["n_hidden"],
                    activation=meta["activation"], head_mode=meta.get("head_mode", "fused"),
                    head_hidden=meta.get("head_hidden", 32), residual=meta["residual"])
    net = (BasisNetwork(cfg, trunk=_blank_trunk(cfg), heads=_blank_heads(cfg))
           if meta["kind"] == "basis" else
           MonolithicNetwork(cfg, trunk=_blank_trunk(cfg),
                             head=Mlp([cfg.feature_dim, cfg.d_a], cfg.activation)))
    net.set_params(params)
    return net


def _blank_trunk(cfg):
    return Mlp(cfg.trunk_dims(), cfg.activation, cfg.activation, cfg.residual)


def _blank_heads(cfg):
    if cfg.head_mode == "fused":
        return [Mlp([cfg.feature_dim, cfg.k * cfg.d_a], cfg.activation)]
    return [Mlp([cfg.feature_dim, cfg.head_hidden, cfg.d_a], cfg.activation)
            for _ in range(cfg.k)]
