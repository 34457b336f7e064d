"""Dense float64 numerics: seeded PRNG, MLPs with analytic backprop, Adam,
finite-difference gradient checks and JSON checkpoints.

Everything here is deterministic given a seed. Networks are evaluated on
batches (rows are samples) with numpy; a 1-D input is treated as a batch of
one and returned as a 1-D output.
"""

from __future__ import annotations

import bisect
import itertools
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

MASK64 = (1 << 64) - 1
CHECKPOINT_SCHEMA = 1

# Instrumentation: counts forward/backward passes so callers can assert that
# a code path is gradient-free.
counters: Counter = Counter()


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


# ---------------------------------------------------------------------------
# PRNG
# ---------------------------------------------------------------------------

def splitmix64(state):
    """One splitmix64 step. Returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


class Prng:
    """xoshiro256** stream seeded through splitmix64.

    Pure-integer arithmetic, so a given seed yields the same stream on every
    platform.
    """

    def __init__(self, seed):
        sm = int(seed) & MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self.s = s
        self.seed = int(seed)

    def next_u64(self):
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self):
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, low=0.0, high=1.0, size=None):
        if size is None:
            return low + (high - low) * self.random()
        n = int(np.prod(size))
        out = np.fromiter((self.random() for _ in range(n)), dtype=np.float64, count=n)
        return (low + (high - low) * out).reshape(size)

    def integers(self, n):
        """Uniform integer in [0, n), unbiased (rejection sampling)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self, size=None):
        """Standard normal draws (Box-Muller, one output per pair)."""
        def one():
            u1 = 1.0 - self.random()
            u2 = self.random()
            return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        if size is None:
            return one()
        n = int(np.prod(size))
        return np.fromiter((one() for _ in range(n)), dtype=np.float64, count=n).reshape(size)

    def laplace(self, scale, size):
        u = self.uniform(-0.5, 0.5, size)
        return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))

    def permutation(self, n):
        """Fisher-Yates shuffle of range(n)."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return np.array(idx, dtype=np.int64)

    def choice(self, weights=None, cdf=None):
        """Index drawn with probability proportional to ``weights``.

        Pass a precomputed cumulative ``cdf`` (a list) to skip the cumsum.
        """
        if cdf is None:
            cdf = list(itertools.accumulate(float(w) for w in weights))
        u = self.random() * cdf[-1]
        return min(bisect.bisect_right(cdf, u), len(cdf) - 1)

    def spawn(self, key):
        """Independent child stream derived from this stream's seed and ``key``."""
        _, mixed = splitmix64((self.seed * 0x100000001B3 + int(key) + 1) & MASK64)
        return Prng(mixed)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class Mlp:
    """Fully connected network.

    ``activation`` is applied after every hidden layer and ``out_activation``
    after the last one. With ``residual`` set, any layer whose input and output
    widths agree (and which has a non-identity activation) becomes a skip block
    ``h + act(W h + b)``.
    """

    dims: list
    activation: str = "tanh"
    out_activation: str = "identity"
    residual: bool = False
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.dims) < 2:
            raise ValueError("an Mlp needs at least input and output dims")
        for a in (self.activation, self.out_activation):
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if not self.weights:
            self.weights = [np.zeros((o, i)) for i, o in zip(self.dims[:-1], self.dims[1:])]
            self.biases = [np.zeros(o) for o in self.dims[1:]]
        for W, b, i, o in zip(self.weights, self.biases, self.dims[:-1], self.dims[1:]):
            if W.shape != (o, i) or b.shape != (o,):
                raise ValueError("weight shapes do not match dims")

    @classmethod
    def init(cls, dims, rng, activation="tanh", out_activation="identity",
             residual=False, out_gain=1.0):
        """Kaiming-style uniform fan-in init; the last layer is scaled by ``out_gain``."""
        net = cls(list(dims), activation, out_activation, residual)
        n = len(net.weights)
        for l, (i, o) in enumerate(zip(net.dims[:-1], net.dims[1:])):
            bound = np.sqrt(6.0 / i) if activation == "relu" else np.sqrt(3.0 / i)
            gain = out_gain if l == n - 1 else 1.0
            net.weights[l] = gain * rng.uniform(-bound, bound, (o, i))
            net.biases[l] = gain * rng.uniform(-1.0 / np.sqrt(i), 1.0 / np.sqrt(i), (o,))
        return net

    @property
    def n_layers(self):
        return len(self.weights)

    def layer_activation(self, l):
        return self.out_activation if l == self.n_layers - 1 else self.activation

    def is_skip(self, l):
        return (self.residual and self.dims[l] == self.dims[l + 1]
                and self.layer_activation(l) != "identity")

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def set_params(self, params):
        self.weights = [np.array(p, dtype=np.float64) for p in params[0::2]]
        self.biases = [np.array(p, dtype=np.float64) for p in params[1::2]]

    def n_params(self):
        return sum((i + 1) * o for i, o in zip(self.dims[:-1], self.dims[1:]))

    def copy(self):
        return Mlp(list(self.dims), self.activation, self.out_activation, self.residual,
                   [W.copy() for W in self.weights], [b.copy() for b in self.biases])


@dataclass
class Tape:
    net_id: int
    squeeze: bool
    inputs: list    # input to each layer
    outputs: list   # activation output of each layer (before any skip add)


def mlp_forward(net, x):
    """Evaluate ``net`` on ``x`` (a vector or an n x d batch). Returns (y, tape)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != net.dims[0]:
        raise ValueError(f"input dim {h.shape[1]} != {net.dims[0]}")
    counters["forward"] += 1
    inputs, outputs = [], []
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        a = _act(net.layer_activation(l), h @ W.T + b)
        outputs.append(a)
        h = h + a if net.is_skip(l) else a
    y = h[0] if squeeze else h
    return y, Tape(id(net), squeeze, inputs, outputs)


def mlp_backward(net, tape, grad_out):
    """Backpropagate ``grad_out`` (same shape as forward output).

    Returns (param_grads, grad_in) with param_grads ordered like
    ``net.params()`` and summed over the batch.
    """
    if tape.net_id != id(net) or len(tape.inputs) != net.n_layers:
        raise ValueError("tape does not belong to this network")
    counters["backward"] += 1
    g = np.asarray(grad_out, dtype=np.float64)
    g = g[None, :] if tape.squeeze else g
    if g.shape != tape.outputs[-1].shape:
        raise ValueError("grad_out shape does not match forward output")
    grads = [None] * (2 * net.n_layers)
    for l in range(net.n_layers - 1, -1, -1):
        x, a = tape.inputs[l], tape.outputs[l]
        name = net.layer_activation(l)
        if name == "identity":
            dz = g
        else:
            z = x @ net.weights[l].T + net.biases[l] if name == "relu" else None
            dz = g * _act_grad(name, z, a)
        grads[2 * l] = dz.T @ x
        grads[2 * l + 1] = dz.sum(axis=0)
        gin = dz @ net.weights[l]
        g = g + gin if net.is_skip(l) else gin
    return grads, (g[0] if tape.squeeze else g)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_steps: int = 0     # >0: cosine decay of the lr over this many steps
    min_lr_frac: float = 0.0

    @classmethod
    def for_params(cls, params, lr=1e-4, **kw):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   lr=lr, **kw)

    def effective_lr(self, warmup_steps):
        lr = self.lr * min(1.0, (self.t + 1) / max(1, warmup_steps))
        if self.decay_steps > 0:
            frac = min(1.0, self.t / self.decay_steps)
            lr *= self.min_lr_frac + (1.0 - self.min_lr_frac) * 0.5 * (1.0 + np.cos(np.pi * frac))
        return lr


def adam_step(params, grads, opt, warmup_steps=1):
    """In-place Adam update with linear warmup. Returns the effective lr used."""
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ValueError("params, grads and moments must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient", opt.t)
    lr = opt.effective_lr(warmup_steps)
    t = opt.t + 1
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    opt.t = t
    return lr


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_difference_check(func, params, analytic, h=1e-5, skip=None):
    """Max relative error between ``analytic`` and central differences of ``func``.

    ``func()`` evaluates the scalar loss at the current contents of ``params``,
    which are perturbed in place and restored. ``skip(idx_param, idx_flat)``
    may return True to exclude an entry (e.g. when a perturbation crosses a kink).
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError("h must lie in (0, 1e-2]")
    worst = 0.0
    for pi, (p, g) in enumerate(zip(params, analytic)):
        flat, gflat = p.reshape(-1), np.asarray(g).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = func()
            flat[j] = orig - h
            fm = func()
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise DivergenceError("non-finite loss during finite differences")
            if skip is not None and skip(pi, j):
                continue
            fd = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(gflat[j] - fd) / max(1.0, abs(fd)))
    return worst


def grad_check(net, loss, x, h=1e-5, corrupt=None):
    """Check mlp_backward against central differences.

    ``loss(y)`` returns (value, dvalue/dy). ``corrupt`` optionally mutates the
    analytic gradient list before comparison (fault injection).
    """
    y, tape = mlp_forward(net, x)
    value, dy = loss(y)
    if not np.isfinite(value):
        raise DivergenceError("non-finite loss")
    grads, _ = mlp_backward(net, tape, dy)
    if corrupt is not None:
        corrupt(grads)
    params = net.params()
    return finite_difference_check(lambda: loss(mlp_forward(net, x)[0])[0], params, grads, h)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, meta, params):
    """Write {meta, params} as JSON. Python's float repr round-trips exactly."""
    doc = {"meta": dict(meta, schema_version=CHECKPOINT_SCHEMA),
           "params": [np.asarray(p).tolist() for p in params]}
    with open(path, "w") as fh:
        json.dump(doc, fh, allow_nan=False)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("meta", {}).get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError("unsupported checkpoint schema")
    return doc["meta"], [np.array(p, dtype=np.float64) for p in doc["params"]]
