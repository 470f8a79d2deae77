"""Best-first branch-and-bound over binary variables."""

from __future__ import annotations

import heapq
import itertools
import math
import time

import numpy as np

from .program import LinearProgram, MilpProgram, SolveOutcome
from .simplex import lp_solve

INT_TOL = 1e-6
GAP_TOL = 1e-8


def _node_lp(program: MilpProgram, fixes: dict) -> LinearProgram:
    lp = LinearProgram.copy(program)
    for k, v in fixes.items():
        lp.lower[k] = lp.upper[k] = float(v)
    return lp


def _most_fractional(x, binaries):
    best, best_dist = None, None
    for k in sorted(binaries):
        frac = x[k] - math.floor(x[k])
        if min(frac, 1.0 - frac) <= INT_TOL:
            continue
        dist = abs(frac - 0.5)
        if best is None or dist < best_dist:
            best, best_dist = k, dist
    return best


def milp_solve(program: MilpProgram, timeout: float | None = None) -> SolveOutcome:
    """Solve a MILP with binary variables by best-first branch-and-bound.

    Nodes are LP relaxations with some binaries fixed; the open node with the
    smallest relaxation bound is expanded first, branching on the most
    fractional binary. On timeout the outcome carries the proven bound (the
    smallest open-node bound, for minimisation) and the incumbent, if any.
    """
    if timeout is None:
        timeout = program.timeout
    deadline = None if timeout is None else time.monotonic() + timeout
    sign = 1.0 if program.sense == "min" else -1.0
    binaries = set(program.binaries)
    counter = itertools.count()

    incumbent_val = math.inf  # in minimisation orientation
    incumbent_x = None
    nodes = 0
    iterations = 0

    root = lp_solve(_node_lp(program, {}))
    iterations += root.iterations
    nodes += 1
    if root.status != "optimal":
        return SolveOutcome(root.status, nodes=nodes, iterations=iterations)
    heap = [(sign * root.objective, next(counter), {}, root)]

    while heap:
        bound, _, fixes, sol = heap[0]
        if bound >= incumbent_val - GAP_TOL:
            break
        if deadline is not None and time.monotonic() > deadline:
            best_bound = min(bound, incumbent_val)
            return SolveOutcome(
                "timeout",
                objective=None if incumbent_x is None else sign * incumbent_val,
                x=incumbent_x,
                bound=sign * best_bound,
                nodes=nodes,
                iterations=iterations,
            )
        heapq.heappop(heap)
        k = _most_fractional(sol.x, binaries)
        if k is None:
            if bound < incumbent_val:
                incumbent_val = bound
                x = sol.x.copy()
                for b in binaries:
                    x[b] = float(round(x[b]))
                incumbent_x = x
            continue
        for val in (0.0, 1.0):
            child_fixes = dict(fixes)
            child_fixes[k] = val
            # children differ from the parent only in one box: warm start
            child = lp_solve(_node_lp(program, child_fixes), warm=sol.info.get("basis"))
            nodes += 1
            iterations += child.iterations
            if child.status != "optimal":
                continue
            child_bound = sign * child.objective
            if child_bound < incumbent_val - GAP_TOL:
                heapq.heappush(heap, (child_bound, next(counter), child_fixes, child))

    if incumbent_x is None:
        return SolveOutcome("infeasible", nodes=nodes, iterations=iterations)
    obj = sign * incumbent_val
    return SolveOutcome("optimal", objective=obj, x=incumbent_x, bound=obj, nodes=nodes, iterations=iterations)


def enumerate_binaries(program: MilpProgram) -> SolveOutcome:
    """Exhaustive reference solver: one LP per assignment of the binaries."""
    sign = 1.0 if program.sense == "min" else -1.0
    best, best_x = math.inf, None
    order = sorted(program.binaries)
    for bits in itertools.product((0.0, 1.0), repeat=len(order)):
        sol = lp_solve(_node_lp(program, dict(zip(order, bits))))
        if sol.status == "optimal" and sign * sol.objective < best:
            best, best_x = sign * sol.objective, sol.x
    if best_x is None:
        return SolveOutcome("infeasible")
    return SolveOutcome("optimal", objective=sign * best, x=np.asarray(best_x), bound=sign * best)
