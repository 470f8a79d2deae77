"""Dense two-phase bounded-variable primal simplex.

Pricing is either pure Bland (lowest improving index) or Dantzig (largest
reduced-cost violation, lowest index on ties) with an automatic switch to
Bland after ``DEGENERATE_STREAK`` consecutive degenerate pivots; the switch
lasts until the objective moves again, which keeps the anti-cycling
guarantee. The blocking variable is always chosen by Bland's rule (lowest
index among ratio ties). Both modes are fully deterministic.

Variable boxes are handled implicitly: a nonbasic variable sits at its lower
or its upper bound, and the ratio test also considers the entering variable
running into its own opposite bound (a bound flip). The tableau is rebuilt
from the original rows every ``REFACTOR_EVERY`` pivots and before declaring
optimality, so rounding errors cannot accumulate.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import SolverError
from .program import LinearProgram, SolveOutcome

FEAS_TOL = 1e-9
PIVOT_TOL = 1e-9
COST_TOL = 1e-10
REFACTOR_EVERY = 64
DEGENERATE_STREAK = 50
PRICING_RULES = ("dantzig", "bland")


class _StandardForm:
    """``min c'y  s.t.  A y = b,  0 <= y <= ub`` with ``x = offset + T y``.

    Structural columns come first, then one slack per inequality row.
    """

    def __init__(self, c, A, rels, b, lo, hi):
        n = len(c)
        cols = []  # (orig var, sign)
        offset = np.zeros(n)
        ub = []
        for k in range(n):
            if math.isfinite(lo[k]):
                offset[k] = lo[k]
                cols.append((k, 1.0))
                ub.append(hi[k] - lo[k])
            elif math.isfinite(hi[k]):
                offset[k] = hi[k]
                cols.append((k, -1.0))
                ub.append(math.inf)
            else:
                cols.append((k, 1.0))
                cols.append((k, -1.0))
                ub += [math.inf, math.inf]
        nc = len(cols)
        T = np.zeros((n, nc))
        for col, (k, sgn) in enumerate(cols):
            T[k, col] = sgn
        m = A.shape[0]
        rows = A @ T if A.size else np.zeros((m, nc))
        rhs = b - (A @ offset if A.size else 0.0)
        n_slack = sum(1 for rel in rels if rel != "=")
        S = np.zeros((m, n_slack))
        s = 0
        for r, rel in enumerate(rels):
            if rel == "<=":
                S[r, s] = 1.0
                s += 1
            elif rel == ">=":
                S[r, s] = -1.0
                s += 1
        self.n, self.nc, self.offset, self.T = n, nc, offset, T
        self.A = np.hstack([rows, S])
        self.b = np.asarray(rhs, dtype=np.float64)
        self.ub = np.array(ub + [math.inf] * n_slack)
        self.c = np.concatenate([T.T @ c, np.zeros(n_slack)])

    def to_x(self, y):
        return self.offset + self.T @ y[: self.nc]


class _Tableau:
    """Bounded-variable tableau over ``A y = b`` (artificial columns included)."""

    def __init__(self, A, b, ub, basis, at_upper, pricing="dantzig"):
        self.pricing = pricing
        self.A, self.b, self.ub = A, b, ub
        self.m, self.N = A.shape
        self.basis = list(basis)
        self.at_upper = at_upper  # nonbasic status, ignored for basic columns
        self.is_basic = np.zeros(self.N, dtype=bool)
        self.is_basic[self.basis] = True
        self.allowed = ub > 0  # fixed columns never enter
        self.cost = np.zeros(self.N)
        self.refactor()

    def nonbasic_values(self):
        v = np.where(self.at_upper, self.ub, 0.0)
        v[self.is_basic] = 0.0
        return v

    def refactor(self):
        B = self.A[:, self.basis]
        try:
            rhs = np.hstack([self.A, (self.b - self.A @ self.nonbasic_values())[:, None]])
            sol = np.linalg.solve(B, rhs)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular basis during refactorization (m={self.m})") from exc
        self.alpha = sol[:, :-1]
        self.beta = sol[:, -1]
        self.reprice()

    def reprice(self):
        self.d = self.cost - self.cost[self.basis] @ self.alpha

    def values(self):
        y = self.nonbasic_values()
        y[self.basis] = self.beta
        return y

    def objective(self):
        return float(self.cost @ self.values())

    def _entering(self, bland):
        viol = np.where(self.at_upper, self.d, -self.d)
        viol[~self.allowed | self.is_basic] = 0.0
        if bland:
            idx = np.nonzero(viol > COST_TOL)[0]
            return int(idx[0]) if idx.size else -1
        j = int(np.argmax(viol))  # first maximum: lowest index on ties
        return j if viol[j] > COST_TOL else -1

    def iterate(self, max_iter):
        """Pivot until optimal; returns ``("optimal" | "unbounded", pivots)``."""
        it = 0
        since = 0
        streak = 0
        while True:
            j = self._entering(self.pricing == "bland" or streak >= DEGENERATE_STREAK)
            if j < 0:
                if since == 0:
                    return "optimal", it
                self.refactor()
                since = 0
                continue
            direction = -1.0 if self.at_upper[j] else 1.0
            col = self.alpha[:, j] * direction  # basic values change by -theta * col
            theta = math.inf
            leave = None  # (variable index, row or -1 for a bound flip)
            if math.isfinite(self.ub[j]):
                theta, leave = self.ub[j], (j, -1)
            dec = np.nonzero(col > PIVOT_TOL)[0]
            inc = np.nonzero(col < -PIVOT_TOL)[0]
            ratios = []
            if dec.size:
                ratios.append((np.maximum(self.beta[dec], 0.0) / col[dec], dec, False))
            if inc.size:
                ubs = self.ub[np.asarray(self.basis)[inc]]
                fin = np.isfinite(ubs)
                if np.any(fin):
                    rows = inc[fin]
                    ratios.append((np.maximum(ubs[fin] - self.beta[rows], 0.0) / -col[rows], rows, True))
            best = theta
            for r, _, _ in ratios:
                if r.size:
                    best = min(best, float(r.min()))
            if not math.isfinite(best):
                return "unbounded", it
            tol = 1e-12 * (1.0 + abs(best))
            # Bland: among tied blocking variables pick the lowest index
            cands = []
            if leave is not None and theta <= best + tol:
                cands.append((j, -1, False))
            for r, rows, to_upper in ratios:
                for k in np.nonzero(r <= best + tol)[0]:
                    row = int(rows[k])
                    cands.append((self.basis[row], row, to_upper))
            var, row, to_upper = min(cands, key=lambda t: t[0])
            streak = streak + 1 if best <= 0.0 else 0
            self.beta -= best * col
            if row < 0:
                self.at_upper[j] = not self.at_upper[j]
            else:
                entering_value = (self.ub[j] if self.at_upper[j] else 0.0) + direction * best
                self._pivot(row, j)
                self.beta[row] = entering_value
                self.is_basic[var] = False
                self.at_upper[var] = to_upper
            it += 1
            since += 1
            if since >= REFACTOR_EVERY:
                self.refactor()
                since = 0
            if it > max_iter:
                raise SolverError(f"simplex exceeded {max_iter} pivots (rows={self.m}, cols={self.N})")

    def dual_iterate(self, max_iter):
        """Bounded dual simplex from a dual feasible basis.

        Returns ``("feasible" | "infeasible", pivots)``. The most infeasible
        basic variable leaves (lowest row on ties); the entering column wins
        the dual ratio test (lowest index on ties).
        """
        it = 0
        since = 0
        while True:
            ub_b = self.ub[self.basis]
            below = -self.beta
            above = self.beta - ub_b
            infeas = np.maximum(below, above)
            r = int(np.argmax(infeas))
            if infeas[r] <= FEAS_TOL:
                if since == 0:
                    return "feasible", it
                self.refactor()
                since = 0
                continue
            to_upper = bool(above[r] > below[r])
            row = self.alpha[r]
            elig = self.allowed & ~self.is_basic
            if to_upper:
                cand = elig & ((~self.at_upper & (row > PIVOT_TOL)) | (self.at_upper & (row < -PIVOT_TOL)))
            else:
                cand = elig & ((~self.at_upper & (row < -PIVOT_TOL)) | (self.at_upper & (row > PIVOT_TOL)))
            idx = np.nonzero(cand)[0]
            if idx.size == 0:
                return "infeasible", it
            ratios = np.abs(self.d[idx]) / np.abs(row[idx])
            j = int(idx[int(np.argmin(ratios))])
            target = ub_b[r] if to_upper else 0.0
            step = (self.beta[r] - target) / row[j]
            entering_value = (self.ub[j] if self.at_upper[j] else 0.0) + step
            self.beta -= step * self.alpha[:, j]
            leaving = self._pivot(r, j)
            self.beta[r] = entering_value
            self.is_basic[leaving] = False
            self.at_upper[leaving] = to_upper
            it += 1
            since += 1
            if since >= REFACTOR_EVERY:
                self.refactor()
                since = 0
            if it > max_iter:
                raise SolverError(f"dual simplex exceeded {max_iter} pivots (rows={self.m}, cols={self.N})")

    def _pivot(self, r, j):
        piv = self.alpha[r, j]
        self.alpha[r] /= piv
        colv = self.alpha[:, j].copy()
        colv[r] = 0.0
        nz = np.nonzero(colv)[0]
        if nz.size:
            self.alpha[nz] -= np.outer(colv[nz], self.alpha[r])
        self.d = self.d - self.d[j] * self.alpha[r]
        old = self.basis[r]
        self.basis[r] = j
        self.is_basic[j] = True
        self.at_upper[j] = False
        return old

    def drop_rows(self, keep):
        self.A, self.b = self.A[keep], self.b[keep]
        self.basis = [self.basis[r] for r in keep]
        self.m = len(keep)
        self.refactor()


def _warm_start(sf: _StandardForm, warm, pricing):
    """Dual simplex from a previous optimal basis of a program that differs only
    in variable bounds. Returns a finished tableau, ``"infeasible"``, or
    ``None`` when the basis does not fit."""
    basis, at_upper = warm
    m, n = sf.A.shape
    if len(basis) != m or len(at_upper) != n or any(j >= n for j in basis):
        return None
    at_upper = np.array(at_upper, dtype=bool) & np.isfinite(sf.ub)
    max_iter = 50 * (m + n) + 1000
    try:
        tab = _Tableau(sf.A.copy(), sf.b.copy(), sf.ub.copy(), basis, at_upper, pricing)
        tab.cost = sf.c.copy()
        tab.reprice()
        status, it = tab.dual_iterate(max_iter)
        if status == "infeasible":
            return "infeasible"
        status, it2 = tab.iterate(max_iter)
    except SolverError:
        return None
    if status != "optimal":
        return None
    tab.iterations = it + it2
    return tab


def lp_solve(program: LinearProgram, pricing: str = "dantzig", warm=None) -> SolveOutcome:
    """Solve ``program`` with the two-phase bounded simplex.

    Feasibility tolerance is ``1e-9``. ``pricing="bland"`` uses Bland's rule
    for the entering column too; the default Dantzig pricing falls back to
    it on degenerate streaks. Results are deterministic either way.

    ``warm`` is the ``info["basis"]`` of an earlier optimal solve of a
    program with the same rows and objective but different variable bounds
    (as in branch-and-bound); the solve then starts with dual simplex from
    that basis and falls back to a cold start if anything goes wrong.
    """
    if pricing not in PRICING_RULES:
        raise SolverError(f"pricing must be one of {PRICING_RULES}, got {pricing!r}")
    c, A, rels, b, lo, hi = program.dense()
    if np.any(lo > hi):
        return SolveOutcome("infeasible")
    sign = 1.0 if program.sense == "min" else -1.0
    sf = _StandardForm(sign * c, A, rels, b, lo, hi)
    m, n = sf.A.shape
    if warm is not None:
        tab = _warm_start(sf, warm, pricing)
        if tab == "infeasible":
            return SolveOutcome("infeasible", info={"warm": True})
        if tab is not None:
            return _finish(program, sf, tab, A, rels, b, lo, hi, tab.iterations, warm=True)
    Ar, br = sf.A.copy(), sf.b.copy()
    neg = br < 0
    Ar[neg] *= -1.0
    br[neg] *= -1.0
    # rows whose own slack can start basic need no artificial
    basis = [-1] * m
    slack0 = sf.nc
    s = 0
    for r, rel in enumerate(rels):
        if rel == "=":
            continue
        if Ar[r, slack0 + s] == 1.0:
            basis[r] = slack0 + s
        s += 1
    art_rows = [r for r in range(m) if basis[r] < 0]
    Art = np.zeros((m, len(art_rows)))
    for k, r in enumerate(art_rows):
        Art[r, k] = 1.0
        basis[r] = n + k
    Afull = np.hstack([Ar, Art])
    ubfull = np.concatenate([sf.ub, np.full(len(art_rows), math.inf)])
    N = Afull.shape[1]
    tab = _Tableau(Afull, br, ubfull, basis, np.zeros(N, dtype=bool), pricing)
    max_iter = 50 * (m + N) + 1000
    iters = 0
    is_art = np.zeros(N, dtype=bool)
    is_art[n:] = True

    if art_rows:
        tab.cost = is_art.astype(np.float64)
        tab.reprice()
        _, it = tab.iterate(max_iter)
        iters += it
        if tab.objective() > FEAS_TOL * max(1.0, float(np.abs(br).max(initial=0.0))):
            return SolveOutcome("infeasible", iterations=iters)
        keep = []
        for r in range(tab.m):
            if is_art[tab.basis[r]]:
                row = tab.alpha[r]
                cand = np.nonzero((np.abs(row) > PIVOT_TOL) & ~is_art & ~tab.is_basic)[0]
                if cand.size:
                    j = int(cand[0])
                    value = tab.ub[j] if tab.at_upper[j] else 0.0
                    old = tab._pivot(r, j)
                    tab.is_basic[old] = False
                    tab.at_upper[old] = False
                    tab.beta[r] = value
                    keep.append(r)
            else:
                keep.append(r)
        if len(keep) < tab.m:
            tab.drop_rows(keep)
        else:
            tab.refactor()
        tab.ub = np.where(is_art, 0.0, tab.ub)
        tab.allowed = ~is_art & (tab.ub > 0)

    tab.cost = np.concatenate([sf.c, np.zeros(N - n)])
    tab.reprice()
    status, it = tab.iterate(max_iter)
    iters += it
    if status == "unbounded":
        return SolveOutcome("unbounded", iterations=iters)
    return _finish(program, sf, tab, A, rels, b, lo, hi, iters, warm=False)


def _finish(program, sf, tab, A, rels, b, lo, hi, iters, warm):
    n = sf.A.shape[1]
    y = np.clip(tab.values()[:n], 0.0, sf.ub)
    x = sf.to_x(y)
    x = np.minimum(np.maximum(x, lo), hi)
    obj = program.evaluate(x)
    viol = 0.0
    if A.size:
        lhs = A @ x
        for r, rel in enumerate(rels):
            dv = lhs[r] - b[r]
            viol = max(viol, dv if rel == "<=" else (-dv if rel == ">=" else abs(dv)))
    if viol > 1e-7 * max(1.0, float(np.abs(b).max(initial=0.0))):
        raise SolverError(f"simplex returned a point violating constraints by {viol:.3g}")
    info = {"warm": warm}
    if tab.m == sf.A.shape[0] and all(j < n for j in tab.basis):
        info["basis"] = (list(tab.basis), tab.at_upper[:n].copy())
    return SolveOutcome("optimal", objective=obj, x=x, bound=obj, iterations=iters, info=info)
