"""LP / MILP problem containers and the plain-text dump format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ContractError

RELATIONS = ("<=", ">=", "=")


class LinearProgram:
    """A linear program built incrementally.

    Variables carry boxes ``[lo, hi]`` (infinite ends allowed); constraints are
    sparse rows ``sum coeffs[k] * x[k]  (<=|>=|=)  rhs``.
    """

    def __init__(self, sense: str = "min"):
        if sense not in ("min", "max"):
            raise ContractError(f"sense must be 'min' or 'max', got {sense!r}")
        self.sense = sense
        self.lower: list[float] = []
        self.upper: list[float] = []
        self.names: list[str] = []
        self.objective: dict[int, float] = {}
        self.objective_constant = 0.0
        self.rows: list[tuple[dict[int, float], str, float]] = []

    @property
    def num_vars(self) -> int:
        return len(self.lower)

    def add_var(self, lo: float = 0.0, hi: float = math.inf, name: str | None = None) -> int:
        lo, hi = float(lo), float(hi)
        if math.isnan(lo) or math.isnan(hi) or lo > hi:
            raise ContractError(f"invalid variable box [{lo}, {hi}]")
        self.lower.append(lo)
        self.upper.append(hi)
        self.names.append(name if name is not None else f"x{len(self.names)}")
        return len(self.lower) - 1

    def add_constraint(self, coeffs: dict, relation: str, rhs: float) -> int:
        if relation not in RELATIONS:
            raise ContractError(f"relation must be one of {RELATIONS}, got {relation!r}")
        row = {}
        for k, v in coeffs.items():
            v = float(v)
            if not math.isfinite(v):
                raise ContractError("constraint coefficients must be finite")
            if not 0 <= k < self.num_vars:
                raise ContractError(f"constraint references unknown variable {k}")
            if v != 0.0:
                row[int(k)] = row.get(int(k), 0.0) + v
        rhs = float(rhs)
        if not math.isfinite(rhs):
            raise ContractError("constraint right-hand side must be finite")
        self.rows.append((row, relation, rhs))
        return len(self.rows) - 1

    def set_objective(self, coeffs: dict, constant: float = 0.0, sense: str | None = None):
        if sense is not None:
            if sense not in ("min", "max"):
                raise ContractError(f"sense must be 'min' or 'max', got {sense!r}")
            self.sense = sense
        self.objective = {int(k): float(v) for k, v in coeffs.items() if v != 0.0}
        self.objective_constant = float(constant)

    def dense(self):
        """``(c, A, relations, b, lo, hi)`` as numpy arrays."""
        n = self.num_vars
        c = np.zeros(n)
        for k, v in self.objective.items():
            c[k] = v
        A = np.zeros((len(self.rows), n))
        rels, b = [], np.zeros(len(self.rows))
        for r, (row, rel, rhs) in enumerate(self.rows):
            for k, v in row.items():
                A[r, k] = v
            rels.append(rel)
            b[r] = rhs
        return c, A, rels, b, np.array(self.lower), np.array(self.upper)

    def evaluate(self, x) -> float:
        return self.objective_constant + sum(v * x[k] for k, v in self.objective.items())

    def max_violation(self, x) -> float:
        """Largest constraint or bound violation of the point ``x``."""
        x = np.asarray(x, dtype=np.float64)
        worst = float(np.max(np.concatenate([[0.0], np.array(self.lower) - x, x - np.array(self.upper)])))
        for row, rel, rhs in self.rows:
            lhs = sum(v * x[k] for k, v in row.items())
            if rel == "<=":
                worst = max(worst, lhs - rhs)
            elif rel == ">=":
                worst = max(worst, rhs - lhs)
            else:
                worst = max(worst, abs(lhs - rhs))
        return worst

    def copy(self) -> "LinearProgram":
        other = LinearProgram(self.sense)
        other.lower = list(self.lower)
        other.upper = list(self.upper)
        other.names = list(self.names)
        other.objective = dict(self.objective)
        other.objective_constant = self.objective_constant
        other.rows = [(dict(r), rel, rhs) for r, rel, rhs in self.rows]
        return other

    def dump(self) -> str:
        """Plain-text listing, one item per line::

            min: 1 x0 + -2 x1 + 0.5
            c0: 1 x0 + 1 x1 >= 1
            bounds: 0 <= x0 <= 1
            binary: x2
        """
        def fmt(row):
            terms = " + ".join(f"{v:.17g} {self.names[k]}" for k, v in sorted(row.items()))
            return terms or "0"

        lines = [f"{self.sense}: {fmt(self.objective)} + {self.objective_constant:.17g}"]
        for r, (row, rel, rhs) in enumerate(self.rows):
            lines.append(f"c{r}: {fmt(row)} {rel} {rhs:.17g}")
        for k in range(self.num_vars):
            lines.append(f"bounds: {self.lower[k]:.17g} <= {self.names[k]} <= {self.upper[k]:.17g}")
        binaries = getattr(self, "binaries", None)
        if binaries:
            lines.append("binary: " + " ".join(self.names[k] for k in sorted(binaries)))
        return "\n".join(lines) + "\n"


class MilpProgram(LinearProgram):
    """A linear program with binary-marked variables and a wall-clock budget."""

    def __init__(self, sense: str = "min", timeout: float | None = None):
        super().__init__(sense)
        self.binaries: set[int] = set()
        self.timeout = timeout

    def add_binary(self, name: str | None = None) -> int:
        k = self.add_var(0.0, 1.0, name)
        self.binaries.add(k)
        return k

    def mark_binary(self, k: int):
        if self.lower[k] < 0.0 or self.upper[k] > 1.0:
            raise ContractError(f"binary variable {k} must be boxed inside [0, 1]")
        self.lower[k] = max(self.lower[k], 0.0)
        self.upper[k] = min(self.upper[k], 1.0)
        self.binaries.add(k)

    def relaxation(self) -> LinearProgram:
        return LinearProgram.copy(self)

    def copy(self) -> "MilpProgram":
        other = MilpProgram(self.sense, self.timeout)
        base = LinearProgram.copy(self)
        other.__dict__.update(base.__dict__)
        other.binaries = set(self.binaries)
        other.timeout = self.timeout
        return other


@dataclass
class SolveOutcome:
    """Result of an LP or MILP solve.

    ``objective`` is the optimum (status ``optimal``) or the incumbent value
    (``timeout``, when one exists). ``bound`` is a proven bound on the
    optimum in the direction of optimisation: for minimisation it never
    exceeds the true optimum.
    """

    status: str
    objective: Optional[float] = None
    x: Optional[np.ndarray] = None
    bound: Optional[float] = None
    nodes: int = 0
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"
