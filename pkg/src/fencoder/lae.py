"""Least-absolute-error regression: min_alpha ||y - G alpha||_1.

The LP  min sum t  s.t.  -t <= y - G alpha <= t  has the dual

    max  y.u   s.t.  G^T u = 0,  -1 <= u <= 1,

which has only k equality rows no matter how many samples are stacked. We run
a bounded-variable revised simplex on the dual. At an optimal basis the simplex
multipliers are exactly the primal coefficients: they interpolate the k basic
rows (G_B alpha = y_B), and the reduced costs are the residuals y - G alpha.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

FEAS_TOL = 1e-9
OPT_TOL = 1e-9


class SolverError(RuntimeError):
    pass


@dataclass
class RegressionProblem:
    G: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.G = np.atleast_2d(np.asarray(self.G, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.G.shape[0] != self.y.size:
            raise ValueError("G and y must have the same number of rows")
        if self.G.shape[0] < 1 or self.G.shape[1] < 1:
            raise ValueError("need at least one row and one column")
        if not (np.all(np.isfinite(self.G)) and np.all(np.isfinite(self.y))):
            raise ValueError("non-finite entries in regression problem")

    @property
    def k(self):
        return self.G.shape[1]

    def objective(self, alpha):
        return float(np.abs(self.y - self.G @ alpha).sum())

    def to_json(self):
        return {"G": self.G.tolist(), "y": self.y.tolist()}

    @classmethod
    def from_json(cls, doc):
        return cls(np.array(doc["G"]), np.array(doc["y"]))


@dataclass
class LaeSolution:
    alpha: np.ndarray
    objective: float
    status: str          # "optimal" | "degenerate-optimal"
    iterations: int = 0
    basis: tuple = ()


@dataclass
class LeastSquaresSolution:
    alpha: np.ndarray
    jittered: bool


def _simplex(A, b, c, lower, upper, x, basis, rule, max_iter, tol):
    """Bounded-variable revised simplex, maximising c.x s.t. A x = b.

    ``x`` holds a feasible point with every non-basic entry at one of its
    bounds; ``basis`` lists k column indices with A[:, basis] nonsingular.
    Mutates ``x`` and ``basis``; returns (multipliers, iterations).
    """
    k, n = A.shape
    is_basic = np.zeros(n, dtype=bool)
    is_basic[basis] = True
    degenerate_run = 0
    use_bland = rule == "bland"
    for it in range(max_iter):
        lu = scipy.linalg.lu_factor(A[:, basis], check_finite=False)
        pi = scipy.linalg.lu_solve(lu, c[basis], trans=1, check_finite=False)
        d = c - pi @ A
        at_lower = x <= lower + tol
        at_upper = x >= upper - tol
        can_inc = ~is_basic & (d > tol) & ~at_upper
        can_dec = ~is_basic & (d < -tol) & ~at_lower
        cand = np.flatnonzero(can_inc | can_dec)
        if cand.size == 0:
            return pi, it
        if use_bland:
            j = int(cand[0])
        else:
            j = int(cand[np.argmax(np.abs(d[cand]))])
        sign = 1.0 if can_inc[j] else -1.0
        # basic variables move by -sign * t * w per unit step t of x_j
        w = scipy.linalg.lu_solve(lu, A[:, j], check_finite=False)
        xb = x[basis]
        step = upper[j] - lower[j]
        leave, leave_to = -1, None
        dx = -sign * w
        for r in range(k):
            if dx[r] > tol:
                lim = (upper[basis[r]] - xb[r]) / dx[r]
                bound = upper[basis[r]]
            elif dx[r] < -tol:
                lim = (lower[basis[r]] - xb[r]) / dx[r]
                bound = lower[basis[r]]
            else:
                continue
            lim = max(lim, 0.0)
            if lim < step - tol or (leave >= 0 and abs(lim - step) <= tol
                                    and basis[r] < basis[leave]):
                step, leave, leave_to = lim, r, bound
        if not np.isfinite(step):
            raise SolverError("unbounded LP (should be impossible for LAE)")
        x[basis] = xb + dx * step
        x[j] += sign * step
        degenerate_run = degenerate_run + 1 if step <= tol else 0
        if degenerate_run > 50:
            use_bland = True
        if leave >= 0:
            out = basis[leave]
            x[out] = leave_to
            is_basic[out] = False
            is_basic[j] = True
            basis[leave] = j
        else:
            # bound flip; snap to the exact bound
            x[j] = upper[j] if sign > 0 else lower[j]
    raise SolverError(f"simplex did not converge in {max_iter} iterations")


def solve_lae(p, rule="dantzig", max_iter=None):
    """Exact least-absolute-error coefficients for ``p``.

    ``rule`` picks the entering variable: ``"bland"`` (smallest eligible
    index, guaranteed termination) or ``"dantzig"`` (largest reduced cost,
    falling back to Bland after a run of degenerate pivots).
    """
    if not isinstance(p, RegressionProblem):
        p = RegressionProblem(*p)
    G, y = p.G, p.y
    m, k = G.shape
    scale = max(1.0, float(np.abs(G).max()), float(np.abs(y).max()))
    tol = FEAS_TOL * scale
    # columns: u_1..u_m then k artificials
    n = m + k
    # start the dual at the residual signs of the least-squares fit; any sign
    # pattern is a valid start, this one is usually close to optimal
    u0 = np.where(y - G @ solve_least_squares(p).alpha > 0, 1.0, -1.0)
    r = G.T @ u0
    sigma = np.where(r > 0, -1.0, 1.0)
    A = np.hstack([G.T, np.diag(sigma)])
    lower = np.concatenate([-np.ones(m), np.zeros(k)])
    upper = np.concatenate([np.ones(m), np.full(k, np.inf)])
    x = np.concatenate([u0, np.abs(r)])
    basis = list(range(m, n))
    max_iter = max_iter or 50 * (m + k) + 1000

    c1 = np.concatenate([np.zeros(m), -np.ones(k)])
    _, it1 = _simplex(A, np.zeros(k), c1, lower, upper, x, basis, rule, max_iter, tol)
    if x[m:].sum() > 1e-7 * scale * max(1, m):
        raise SolverError("phase 1 failed to find a feasible dual point")
    # artificials are pinned to zero for phase 2
    upper[m:] = 0.0
    x[m:] = 0.0
    c2 = np.concatenate([y, np.zeros(k)])
    pi, it2 = _simplex(A, np.zeros(k), c2, lower, upper, x, basis, rule, max_iter, tol)

    alpha = pi
    resid = y - G @ alpha
    objective = float(np.abs(resid).sum())
    dual_obj = float(y @ x[:m])
    if abs(objective - dual_obj) > 1e-7 * max(1.0, objective):
        raise SolverError(f"duality gap {objective - dual_obj:.3e} at termination")
    nonbasic = np.ones(m, dtype=bool)
    nonbasic[[j for j in basis if j < m]] = False
    xb = np.array([x[j] for j in basis])
    degenerate = (np.any(np.abs(resid[nonbasic]) <= tol)
                  or np.any(np.abs(np.abs(xb) - 1.0) <= tol)
                  or any(j >= m for j in basis))
    return LaeSolution(alpha, objective, "degenerate-optimal" if degenerate else "optimal",
                       it1 + it2, tuple(basis))


def solve_lae_irls(p, iters=200, eps=1e-8):
    """Iteratively reweighted least squares approximation of the LAE fit.

    A refinement/diagnostic path only; ``solve_lae`` is the exact solver.
    """
    if not isinstance(p, RegressionProblem):
        p = RegressionProblem(*p)
    alpha = solve_least_squares(p).alpha
    for _ in range(iters):
        w = 1.0 / np.maximum(np.abs(p.y - p.G @ alpha), eps)
        Gw = p.G * w[:, None]
        alpha_new = solve_least_squares(RegressionProblem(Gw.T @ p.G, Gw.T @ p.y)).alpha
        if np.max(np.abs(alpha_new - alpha)) < 1e-12:
            alpha = alpha_new
            break
        alpha = alpha_new
    return alpha


def solve_least_squares(p):
    """Normal-equations least squares, with ridge jitter if G^T G is singular."""
    if not isinstance(p, RegressionProblem):
        p = RegressionProblem(*p)
    GtG = p.G.T @ p.G
    rhs = p.G.T @ p.y
    k = GtG.shape[0]
    try:
        L = np.linalg.cholesky(GtG)
        if np.linalg.cond(L) ** 2 < 1e12:
            z = np.linalg.solve(L, rhs)
            return LeastSquaresSolution(np.linalg.solve(L.T, z), False)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10 * max(np.trace(GtG), 1e-300) / k
    alpha = np.linalg.solve(GtG + jitter * np.eye(k), rhs)
    return LeastSquaresSolution(alpha, True)


@dataclass
class BruteForceResult:
    objective: float
    alpha: np.ndarray
    fallback: bool


def brute_force_lae(p, grid_points=41):
    """Vertex enumeration oracle for small problems.

    Some LAE optimum interpolates r = rank(G) linearly independent rows, so
    we try every r-row subset whose rows span the row space of G. If G is all
    zeros there is nothing to enumerate and a dense grid is searched instead.
    """
    if not isinstance(p, RegressionProblem):
        p = RegressionProblem(*p)
    G, y = p.G, p.y
    m, k = G.shape
    if m > 12 or k > 3:
        raise ValueError("brute force is limited to m <= 12, k <= 3")
    r = np.linalg.matrix_rank(G)
    best, best_alpha = np.inf, None
    if r > 0:
        for rows in itertools.combinations(range(m), r):
            S = G[list(rows)]
            if np.linalg.matrix_rank(S) < r:
                continue
            alpha = np.linalg.pinv(S) @ y[list(rows)]
            obj = float(np.abs(y - G @ alpha).sum())
            if obj < best:
                best, best_alpha = obj, alpha
    if best_alpha is not None:
        return BruteForceResult(best, best_alpha, False)
    span = 2.0 * max(1.0, float(np.abs(y).max()))
    axes = [np.linspace(-span, span, grid_points)] * k
    for alpha in itertools.product(*axes):
        alpha = np.array(alpha)
        obj = float(np.abs(y - G @ alpha).sum())
        if obj < best:
            best, best_alpha = obj, alpha
    return BruteForceResult(best, best_alpha, True)
