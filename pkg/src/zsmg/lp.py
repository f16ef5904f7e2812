"""Dense two-phase primal simplex (Bland's rule) and the game LPs built on it.

Problems are posed as::

    maximize    c @ x
    subject to  G @ x <= g
                E @ x == e
                x >= lb

Equalities enter the tableau as two opposite inequalities.  Everything is
double precision with a fixed pivot tolerance; the problems solved here have
at most a few dozen variables.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-9
MAX_PIVOTS = 1_000_000
CCE_TOL = 1e-8


class LPError(RuntimeError):
    pass


class Stalled(LPError):
    """The pivot cap was hit before the simplex terminated."""


class DimensionError(LPError, ValueError):
    pass


class Status(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


@dataclass
class DenseLP:
    c: np.ndarray
    G: np.ndarray | None = None
    g: np.ndarray | None = None
    E: np.ndarray | None = None
    e: np.ndarray | None = None
    lb: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64).ravel()
        n = self.c.size
        self.G = np.zeros((0, n)) if self.G is None else np.atleast_2d(np.asarray(self.G, dtype=np.float64))
        self.g = np.zeros(0) if self.g is None else np.asarray(self.g, dtype=np.float64).ravel()
        self.E = np.zeros((0, n)) if self.E is None else np.atleast_2d(np.asarray(self.E, dtype=np.float64))
        self.e = np.zeros(0) if self.e is None else np.asarray(self.e, dtype=np.float64).ravel()
        self.lb = np.zeros(n) if self.lb is None else np.asarray(self.lb, dtype=np.float64).ravel()
        if self.G.shape[0] == 0:
            self.G = self.G.reshape(0, n)
        if self.E.shape[0] == 0:
            self.E = self.E.reshape(0, n)
        if self.G.shape[1] != n or self.E.shape[1] != n or self.lb.size != n:
            raise DimensionError("column counts of c, G, E, lb disagree")
        if self.G.shape[0] != self.g.size or self.E.shape[0] != self.e.size:
            raise DimensionError("row counts of G/g or E/e disagree")
        for name in ("c", "G", "g", "E", "e", "lb"):
            if not np.isfinite(getattr(self, name)).all():
                raise DimensionError(f"{name} contains NaN or Inf")

    @property
    def n(self) -> int:
        return self.c.size


@dataclass
class LPResult:
    status: Status
    x: np.ndarray | None
    objective: float
    residual: float
    pivots: list[tuple[int, int]] = field(default_factory=list, repr=False)
    # alternative optima may exist (some nonbasic reduced cost is zero)
    degenerate_dual: bool = False


class _Tableau:
    def __init__(self, T: np.ndarray, basis: list[int], budget: list[int], log: list):
        self.T = T  # (m, ncol + 1), last column is the rhs
        self.basis = basis
        self.budget = budget
        self.log = log

    def pivot(self, r: int, j: int) -> None:
        if self.budget[0] <= 0:
            raise Stalled(f"simplex exceeded {MAX_PIVOTS} pivots")
        self.budget[0] -= 1
        self.log.append((r, j))
        T = self.T
        T[r] /= T[r, j]
        col = T[:, j].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        rhs = T[:, -1]
        rhs[np.abs(rhs) < 1e-13] = 0.0
        self.basis[r] = j

    def run(self, d: np.ndarray, z: float, allowed: np.ndarray):
        """Maximize with Bland's rule given reduced profits ``d`` and value ``z``.

        Returns (status, d, z).
        """
        T = self.T
        while True:
            cand = np.nonzero((d > PIVOT_TOL) & allowed)[0]
            if cand.size == 0:
                return Status.OPTIMAL, d, z
            j = int(cand[0])
            colj = T[:, j]
            rows = np.nonzero(colj > PIVOT_TOL)[0]
            if rows.size == 0:
                return Status.UNBOUNDED, d, z
            ratios = T[rows, -1] / colj[rows]
            best = ratios.min()
            ties = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
            r = int(min(ties, key=lambda i: self.basis[i]))
            step = d[j] / T[r, j]
            z += step * T[r, -1]
            self.pivot(r, j)
            d = d - d[j] * T[r, :-1]
            d[j] = 0.0


def simplex_solve(lp: DenseLP) -> LPResult:
    """Solve ``lp``; raises :class:`Stalled` if the pivot cap is reached."""
    n = lp.n
    g_shift = lp.g - lp.G @ lp.lb
    e_shift = lp.e - lp.E @ lp.lb
    rows_a = np.vstack([lp.G, lp.E, -lp.E])
    rows_b = np.concatenate([g_shift, e_shift, -e_shift])
    m = rows_b.size
    neg = rows_b < 0
    n_art = int(neg.sum())
    ncol = n + m + n_art
    T = np.zeros((m, ncol + 1))
    basis: list[int] = []
    art = n + m
    for i in range(m):
        if neg[i]:
            T[i, :n] = -rows_a[i]
            T[i, n + i] = -1.0
            T[i, art] = 1.0
            T[i, -1] = -rows_b[i]
            basis.append(art)
            art += 1
        else:
            T[i, :n] = rows_a[i]
            T[i, n + i] = 1.0
            T[i, -1] = rows_b[i]
            basis.append(n + i)

    pivots: list[tuple[int, int]] = []
    tab = _Tableau(T, basis, [MAX_PIVOTS], pivots)
    is_art = np.zeros(ncol, dtype=bool)
    is_art[n + m:] = True

    if n_art:
        # phase 1: maximize -(sum of artificials)
        art_rows = np.nonzero(neg)[0]
        d = T[art_rows, :-1].sum(axis=0)
        d[is_art] = 0.0
        z = -T[art_rows, -1].sum()
        _, d, z = tab.run(d, z, np.ones(ncol, dtype=bool))
        T = tab.T
        art_level = sum(T[i, -1] for i in range(len(tab.basis)) if is_art[tab.basis[i]])
        if art_level > FEAS_TOL * max(1.0, np.abs(rows_b).max()):
            return LPResult(Status.INFEASIBLE, None, float("nan"), float("inf"), pivots)
        # drive remaining (zero-level) artificials out of the basis
        keep = []
        for i in range(T.shape[0]):
            if is_art[tab.basis[i]]:
                cols = np.nonzero((np.abs(T[i, :-1]) > PIVOT_TOL) & ~is_art)[0]
                if cols.size:
                    tab.pivot(i, int(cols[0]))
                    keep.append(i)
                # else: redundant row, dropped below
            else:
                keep.append(i)
        T = tab.T[keep]
        T = np.hstack([T[:, : n + m], T[:, -1:]])
        tab = _Tableau(T, [tab.basis[i] for i in keep], tab.budget, pivots)
        ncol = n + m

    cfull = np.zeros(ncol)
    cfull[:n] = lp.c
    cB = cfull[tab.basis]
    d = cfull - cB @ tab.T[:, :-1]
    z = float(cB @ tab.T[:, -1])
    status, d, z = tab.run(d, z, np.ones(ncol, dtype=bool))
    if status is Status.UNBOUNDED:
        return LPResult(Status.UNBOUNDED, None, float("inf"), float("nan"), pivots)

    y = np.zeros(ncol)
    y[tab.basis] = tab.T[:, -1]
    x = y[:n] + lp.lb
    x = np.maximum(x, lp.lb)
    nonbasic = np.ones(ncol, dtype=bool)
    nonbasic[tab.basis] = False
    degenerate_dual = bool((np.abs(d[nonbasic]) <= PIVOT_TOL).any())
    return LPResult(Status.OPTIMAL, x, float(lp.c @ x), residual(lp, x), pivots, degenerate_dual)


def residual(lp: DenseLP, x: np.ndarray) -> float:
    r = 0.0
    if lp.G.shape[0]:
        r = max(r, float(np.max(lp.G @ x - lp.g)))
    if lp.E.shape[0]:
        r = max(r, float(np.max(np.abs(lp.E @ x - lp.e))))
    return max(r, 0.0)


def _require_optimal(res: LPResult, what: str) -> LPResult:
    if res.status is not Status.OPTIMAL:
        raise LPError(f"{what}: LP returned {res.status.value}")
    return res


def _simplex_point(x: np.ndarray) -> np.ndarray:
    x = np.where(x < 0, 0.0, x)
    return x / x.sum()


def lexmin_refine(lp: DenseLP, best: float, n_free: int, slack: float = 1e-10) -> np.ndarray:
    """Among optima of ``lp`` (objective ``best``), return the lexicographically
    smallest solution over its first ``n_free`` coordinates."""
    n = lp.n
    G = np.vstack([lp.G, -lp.c[None, :]])
    g = np.concatenate([lp.g, [-(best - slack * max(1.0, abs(best)))]])
    x = None
    for i in range(n_free):
        c = np.zeros(n)
        c[i] = -1.0
        res = _require_optimal(simplex_solve(DenseLP(c, G, g, lp.E, lp.e, lp.lb)), "lexicographic refinement")
        x = res.x
        row = np.zeros(n)
        row[i] = 1.0
        G = np.vstack([G, row[None, :]])
        g = np.concatenate([g, [x[i] + 1e-12]])
    return x


def matrix_game_solve(Q) -> tuple[float, np.ndarray, np.ndarray]:
    """Value and maximin/minimax strategies of the zero-sum matrix game ``Q``.

    The row player maximizes.  Both the primal (row) and dual (column) LPs
    are solved; entries are affinely normalized to [1, 2] first, which keeps
    the value variable positive and makes the solve invariant to scaling.
    """
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or not np.isfinite(Q).all():
        raise DimensionError("payoff matrix must be a finite 2-d array")
    A, B = Q.shape
    lo, hi = float(Q.min()), float(Q.max())
    span = hi - lo
    if span == 0.0:
        mu = np.zeros(A)
        mu[0] = 1.0
        nu = np.zeros(B)
        nu[0] = 1.0
        return lo, mu, nu
    Qn = (Q - lo) / span + 1.0

    # row player: max v  s.t.  v - mu @ Qn[:, b] <= 0,  sum mu = 1
    c = np.zeros(A + 1)
    c[-1] = 1.0
    G = np.hstack([-Qn.T, np.ones((B, 1))])
    E = np.hstack([np.ones((1, A)), np.zeros((1, 1))])
    rp = _require_optimal(simplex_solve(DenseLP(c, G, np.zeros(B), E, [1.0])), "row player LP")

    # column player: max -w  s.t.  Qn[a] @ nu - w <= 0,  sum nu = 1
    c = np.zeros(B + 1)
    c[-1] = -1.0
    G = np.hstack([Qn, -np.ones((A, 1))])
    E = np.hstack([np.ones((1, B)), np.zeros((1, 1))])
    cp = _require_optimal(simplex_solve(DenseLP(c, G, np.zeros(A), E, [1.0])), "column player LP")

    mu = _simplex_point(rp.x[:A])
    nu = _simplex_point(cp.x[:B])
    v = (rp.x[-1] - 1.0) * span + lo
    return float(v), mu, nu


def matrix_game_values(Q) -> tuple[float, float]:
    """(primal value, dual value) in original units, for duality checks."""
    Q = np.asarray(Q, dtype=np.float64)
    v, mu, nu = matrix_game_solve(Q)
    return float((mu @ Q).min()), float((Q @ nu).max())


def cce_residuals(pi, Qbar, Qlow) -> tuple[float, float]:
    """How far ``pi`` is from the two coarse-correlated constraints (<= 0 is satisfied)."""
    pi = np.asarray(pi)
    Qbar = np.asarray(Qbar)
    Qlow = np.asarray(Qlow)
    marg_b = pi.sum(axis=0)
    marg_a = pi.sum(axis=1)
    r_max = float((Qbar @ marg_b).max() - (pi * Qbar).sum())
    r_min = float((pi * Qlow).sum() - (marg_a @ Qlow).min())
    return r_max, r_min


def cce_solve(Qbar, Qlow, objective: str = "max_gap") -> np.ndarray:
    """Joint distribution over A x B that is a coarse correlated equilibrium for
    the optimistic/pessimistic pair.

    Constraints: the max-player gains nothing from switching to any fixed
    ``a*`` under ``Qbar``; the min-player gains nothing from any fixed ``b*``
    under ``Qlow``.  Among feasible points, ``objective`` picks one:
    ``"min_gap"`` minimizes E[Qbar - Qlow], ``"max_gap"`` maximizes it.
    Remaining ties go to the lexicographically smallest vertex.
    """
    Qbar = np.asarray(Qbar, dtype=np.float64)
    Qlow = np.asarray(Qlow, dtype=np.float64)
    if Qbar.shape != Qlow.shape or Qbar.ndim != 2:
        raise DimensionError("Qbar and Qlow must be matrices of equal shape")
    if not (np.isfinite(Qbar).all() and np.isfinite(Qlow).all()):
        raise DimensionError("CCE inputs must be finite")
    A, B = Qbar.shape
    n = A * B
    if n == 1:
        return np.ones((1, 1))
    rows = []
    for a_dev in range(A):
        rows.append((Qbar[a_dev][None, :] - Qbar).ravel())
    for b_dev in range(B):
        rows.append((Qlow - Qlow[:, b_dev][:, None]).ravel())
    G = np.array(rows)
    gap = (Qbar - Qlow).ravel()
    if objective == "min_gap":
        c = -gap
    elif objective == "max_gap":
        c = gap
    else:
        raise ValueError(f"unknown CCE objective {objective!r}")
    lp = DenseLP(c, G, np.zeros(len(rows)), np.ones((1, n)), [1.0])
    res = simplex_solve(lp)
    if res.status is not Status.OPTIMAL:
        raise LPError(f"CCE LP returned {res.status.value}")
    x = res.x
    if res.degenerate_dual:
        x = lexmin_refine(lp, res.objective, n - 1)
    pi = _simplex_point(x).reshape(A, B)
    r_max, r_min = cce_residuals(pi, Qbar, Qlow)
    if r_max > CCE_TOL or r_min > CCE_TOL:
        raise LPError(f"CCE residuals ({r_max:.3g}, {r_min:.3g}) exceed {CCE_TOL}")
    return pi
