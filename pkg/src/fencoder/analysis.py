"""Per-context error tables, PCA of coefficient vectors and cluster scores."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .encoder import calibrate, empirical_l1
from .numerics import Prng
from .skillnet import policy_actions

EVAL_PROTOCOL = ("per context: seeded shuffle, first n_calib pairs calibrate the "
                 "coefficients, the disjoint remainder is scored")


@dataclass
class EvalRow:
    context_id: str
    split: str
    mean_l1: float
    n: int
    alpha: np.ndarray = None
    baseline_l1: float = None


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def aggregate(self, split, column="mean_l1"):
        rows = [r for r in self.rows if r.split == split]
        if not rows:
            return float("nan")
        return sum(getattr(r, column) * r.n for r in rows) / sum(r.n for r in rows)

    def splits(self):
        return sorted({r.split for r in self.rows})

    def write_csv(self, path, column="mean_l1"):
        with open(path, "w", newline="") as fh:
            fh.write(f"# {EVAL_PROTOCOL}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["context_id", "split", "mean_l1", "n"])
            for r in self.rows:
                w.writerow([r.context_id, r.split, repr(float(getattr(r, column))), r.n])

    def to_json(self):
        return {
            "protocol": EVAL_PROTOCOL,
            "rows": [{"context_id": r.context_id, "split": r.split, "mean_l1": r.mean_l1,
                      "n": r.n, "baseline_l1": r.baseline_l1,
                      "alpha": None if r.alpha is None else r.alpha.tolist()}
                     for r in self.rows],
            "aggregate": {s: self.aggregate(s) for s in self.splits()},
        }


def calib_eval_split(ds, n_calib, seed=0):
    """Disjoint calibration / evaluation indices for one context."""
    if len(ds) <= n_calib:
        raise ValueError(f"context {ds.context_id} has {len(ds)} samples, "
                         f"needs more than {n_calib}")
    key = sum(ord(ch) * 257 ** i for i, ch in enumerate(ds.context_id)) % (1 << 40)
    perm = Prng(seed).spawn(key).permutation(len(ds))
    calib, held = perm[:n_calib], perm[n_calib:]
    keys_c = set(zip(ds.traj[calib].tolist(), ds.t[calib].tolist()))
    keys_e = set(zip(ds.traj[held].tolist(), ds.t[held].tolist()))
    assert not keys_c & keys_e, "calibration and evaluation pairs overlap"
    return calib, held


def eval_contexts(net, datasets, calib_samples_per_context=512, seed=0, baseline=None):
    """Calibrate on each context's calibration split and score the rest.

    ``baseline`` (a MonolithicNetwork) is scored on the same evaluation pairs.
    """
    report = EvalReport()
    for ds in sorted(datasets, key=lambda d: d.context_id):
        calib, held = calib_eval_split(ds, calib_samples_per_context, seed)
        coeff = calibrate(net, ds.obs[calib], ds.act[calib], ds.context_id)
        pred = policy_actions(net, coeff.alpha, ds.obs[held])
        row = EvalRow(ds.context_id, ds.split, empirical_l1(pred, ds.act[held]), len(held),
                      coeff.alpha)
        if baseline is not None:
            row.baseline_l1 = empirical_l1(baseline.predict(ds.obs[held]), ds.act[held])
        report.rows.append(row)
    return report


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def jacobi_eigh(A, tol=1e-14, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors as columns), sorted by decreasing value.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(A, 1) ** 2))
        if off <= tol * max(1.0, np.linalg.norm(A)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q], J[q, p] = s, -s
                A = J.T @ A @ J
                V = V @ J
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


@dataclass
class Projection2D:
    context_ids: list
    points: np.ndarray                 # (n, 2)
    explained_variance: np.ndarray     # (2,)
    components: np.ndarray             # (2, k)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["context_id", "x", "y"])
            for cid, (x, y) in zip(self.context_ids, self.points):
                w.writerow([cid, repr(float(x)), repr(float(y))])


def pca_project(coeff_vectors):
    """Project coefficient vectors (dict id -> k-vector) onto their top-2 PCs."""
    ids = sorted(coeff_vectors)
    X = np.array([np.asarray(coeff_vectors[c], dtype=np.float64) for c in ids])
    if X.shape[0] < 3 or X.ndim != 2 or X.shape[1] < 2:
        raise ValueError("PCA needs >= 3 contexts and k >= 2")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / X.shape[0]
    if np.allclose(C, 0.0, atol=1e-300):
        k = X.shape[1]
        return Projection2D(ids, np.zeros((len(ids), 2)), np.zeros(2), np.eye(2, k))
    w, V = jacobi_eigh(C)
    comps = V[:, :2].T.copy()
    for i in range(2):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    var = np.maximum(w[:2], 0.0)
    var[np.abs(var) < 1e-14 * max(1.0, w[0])] = 0.0
    return Projection2D(ids, Xc @ comps.T, var, comps)


# ---------------------------------------------------------------------------
# Cluster score
# ---------------------------------------------------------------------------

def cluster_score(groups):
    """Mean pairwise distance within families and across families.

    ``groups`` maps a family label to a list of coefficient vectors.
    """
    labels = sorted(groups)
    if len(labels) < 2 or any(len(groups[l]) < 2 for l in labels):
        raise ValueError("need >= 2 families with >= 2 points each")
    pts = [(l, np.asarray(v, dtype=np.float64)) for l in labels for v in groups[l]]
    intra, inter = [], []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            d = float(np.linalg.norm(pts[i][1] - pts[j][1]))
            (intra if pts[i][0] == pts[j][0] else inter).append(d)
    return float(np.mean(intra)), float(np.mean(inter))


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]


def _scale(v, lo, hi, a, b):
    return a + (b - a) * (0.5 if hi == lo else (v - lo) / (hi - lo))


def svg_scatter(path, points, labels, title=""):
    """Dependency-free scatter plot; ``labels`` pick the colour per point."""
    points = np.asarray(points)
    W, H, m = 480, 360, 30
    xs, ys = points[:, 0], points[:, 1]
    uniq = sorted(set(labels))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
           f'<text x="{m}" y="18" font-size="13">{title}</text>']
    for (x, y), lab in zip(points, labels):
        cx = _scale(x, xs.min(), xs.max(), m, W - m)
        cy = _scale(y, ys.min(), ys.max(), H - m, m)
        col = _COLORS[uniq.index(lab) % len(_COLORS)]
        out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="4" fill="{col}"/>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def svg_lines(path, x, series, title=""):
    """Line plot of several named series sharing one x grid."""
    x = np.asarray(x)
    W, H, m = 560, 360, 30
    allv = np.concatenate([np.asarray(v) for v in series.values()])
    lo, hi = float(allv.min()), float(allv.max())
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
           f'<text x="{m}" y="18" font-size="13">{title}</text>']
    for i, (name, v) in enumerate(series.items()):
        pts = " ".join(f"{_scale(a, x.min(), x.max(), m, W - m):.2f},"
                       f"{_scale(b, lo, hi, H - m, m):.2f}" for a, b in zip(x, v))
        col = _COLORS[i % len(_COLORS)]
        out.append(f'<polyline fill="none" stroke="{col}" points="{pts}"/>')
        out.append(f'<text x="{W - 150}" y="{30 + 14 * i}" font-size="11" fill="{col}">{name}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
