"""Bounding planes over displacement components and the flow-tightening LP.

Each deformed pixel value is bounded by affine functions of its own
displacement ``(v, w)``::

    lam0 + lam1 * v + lam2 * w  <=  value  <=  ups0 + ups1 * v + ups2 * w

The planes are fitted by LP over the candidate set of the inf-ball (which
encloses the 1- and 2-balls, so the planes are sound for every norm). Paired
with flow constraints ``|v_p - v_q| <= gamma`` on neighbouring pixels they
cut away pixel-value combinations that no smooth field can produce.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, SolverError
from .geometry import INF, ROUNDING_PAD, AttackBudget, PixelBounds, pixel_candidates
from .imaging import Image, interpolate_many
from .linsolve import LinearProgram, lp_solve


def plane_eval(plane, v, w):
    """Value of ``plane = (c0, c1, c2)`` at displacement ``(v, w)``; one fixed
    evaluation order so repair and checks agree bit for bit."""
    return plane[0] + plane[1] * v + plane[2] * w


@dataclass(frozen=True, eq=False)
class BoundingPlanes:
    """Lower and upper planes, arrays of shape ``(..., 3)``.

    For an image the leading shape is ``(W, W, C)``; ``flat()`` returns
    ``(n, 3)`` arrays in network input order.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=np.float64)
        up = np.array(self.upper, dtype=np.float64)
        if lo.shape != up.shape or lo.shape[-1] != 3:
            raise ContractError(f"plane arrays must share a (..., 3) shape, got {lo.shape} and {up.shape}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    def flat(self):
        return self.lower.reshape(-1, 3), self.upper.reshape(-1, 3)

    def to_json(self) -> dict:
        sext = np.concatenate([self.lower, self.upper], axis=-1)
        return {"shape": list(self.lower.shape[:-1]), "planes": sext.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "BoundingPlanes":
        try:
            sext = np.array(obj["planes"], dtype=np.float64)
            shape = tuple(obj.get("shape", sext.shape[:-1]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed planes JSON: {exc}") from exc
        if sext.shape[-1] != 6 or sext.shape[:-1] != shape:
            raise FormatError(f"planes JSON expects shape {shape} + (6,), got {sext.shape}")
        return cls(sext[..., :3], sext[..., 3:])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "BoundingPlanes":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class FlowGraph:
    """Pixels as nodes, 4-neighbour adjacencies as undirected edges ``(p, q)`` with ``p < q``."""

    num_nodes: int
    edges: tuple
    gamma: float = INF

    @classmethod
    def grid(cls, width: int, gamma: float = INF) -> "FlowGraph":
        edges = []
        for i in range(width):
            for j in range(width):
                p = i * width + j
                if i + 1 < width:
                    edges.append((p, p + width))
                if j + 1 < width:
                    edges.append((p, p + 1))
        return cls(width * width, tuple(edges), gamma)

    def neighbours(self, p):
        out = [q for a, q in self.edges if a == p]
        out += [a for a, q in self.edges if q == p]
        return sorted(out)

    def restricted(self, nodes) -> list:
        nodes = set(nodes)
        return [(p, q) for p, q in self.edges if p in nodes and q in nodes]


@dataclass
class InputRelaxation:
    """Everything the verifiers know about the input region.

    Arrays are indexed by input neuron ``k`` (network order); ``pixel_of[k]``
    names the pixel whose displacement drives neuron ``k`` (channels of one
    pixel share it). ``disp_box[p]`` is ``[[vlo, vhi], [wlo, whi]]``.
    """

    lower: np.ndarray
    upper: np.ndarray
    planes_lower: np.ndarray | None = None
    planes_upper: np.ndarray | None = None
    pixel_of: np.ndarray | None = None
    disp_box: np.ndarray | None = None
    flow: FlowGraph | None = None
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.lower)

    @property
    def has_planes(self) -> bool:
        return self.planes_lower is not None

    @property
    def gamma(self) -> float:
        return INF if self.flow is None else self.flow.gamma

    @classmethod
    def from_box(cls, lower, upper) -> "InputRelaxation":
        return cls(np.asarray(lower, dtype=np.float64).copy(), np.asarray(upper, dtype=np.float64).copy())

    def to_json(self) -> dict:
        out = {"lower": self.lower.tolist(), "upper": self.upper.tolist()}
        if "center" in self.meta:
            out["center"] = np.asarray(self.meta["center"]).tolist()
        if self.has_planes:
            out["planes"] = BoundingPlanes(self.planes_lower, self.planes_upper).to_json()
            out["pixel_of"] = self.pixel_of.tolist()
            out["disp_box"] = self.disp_box.tolist()
        if self.flow is not None:
            out["edges"] = [list(e) for e in self.flow.edges]
        return out

    @classmethod
    def from_json(cls, obj: dict, gamma: float = INF) -> "InputRelaxation":
        """Explicit input region for non-image inputs.

        ``{"lower", "upper", "center"?, "planes"?, "pixel_of"?, "disp_box"?,
        "edges"?}``; ``pixel_of`` defaults to one pixel per input and
        ``gamma`` is supplied by the caller's budget.
        """
        try:
            relax = cls.from_box(obj["lower"], obj["upper"])
            n = relax.size
            if relax.upper.shape != (n,) or np.any(relax.lower > relax.upper):
                raise FormatError("lower/upper must be equal-length vectors with lower <= upper")
            if "center" in obj:
                relax.meta["center"] = np.asarray(obj["center"], dtype=np.float64)
            if "planes" in obj:
                planes = BoundingPlanes.from_json(obj["planes"])
                relax.planes_lower, relax.planes_upper = planes.flat()
                relax.pixel_of = np.asarray(obj.get("pixel_of", np.arange(n)), dtype=np.int64)
                pixels = int(relax.pixel_of.max()) + 1
                relax.disp_box = np.asarray(obj["disp_box"], dtype=np.float64).reshape(pixels, 2, 2)
                if relax.planes_lower.shape != (n, 3) or relax.pixel_of.shape != (n,):
                    raise FormatError("planes and pixel_of must have one entry per input")
            edges = tuple(tuple(int(v) for v in e) for e in obj.get("edges", []))
            nodes = int(relax.pixel_of.max()) + 1 if relax.pixel_of is not None else n
            relax.flow = FlowGraph(nodes, edges, gamma)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed input relaxation: {exc}") from exc
        return relax


# --------------------------------------------------------------------------
# plane fitting
# --------------------------------------------------------------------------

def repair_plane(plane, offsets, values, kind: str):
    """Shift the plane's offset until it is sound at every candidate.

    ``kind="lower"`` lowers the offset by the largest violation
    ``plane(p) - value(p)``; ``kind="upper"`` raises it symmetrically. A few
    extra ulp steps absorb rounding so post-repair violations are exactly
    non-positive.
    """
    plane = np.array(plane, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64)
    sgn = 1.0 if kind == "lower" else -1.0
    if kind not in ("lower", "upper"):
        raise ContractError(f"kind must be 'lower' or 'upper', got {kind!r}")

    def violation():
        return float(np.max(sgn * (plane_eval(plane, offsets[:, 0], offsets[:, 1]) - values), initial=-math.inf))

    viol = violation()
    if viol > 0:
        plane[0] -= sgn * viol
    for _ in range(64):
        if violation() <= 0:
            break
        plane[0] = np.nextafter(plane[0], -sgn * math.inf)
    return plane


def _fit_one(offsets, values, kind):
    """LP: minimise total slack between plane and values subject to one-sided soundness."""
    lp = LinearProgram("min")
    c = [lp.add_var(-math.inf, math.inf, name) for name in ("c0", "c1", "c2")]
    sgn = 1.0 if kind == "lower" else -1.0
    # lower: sum(value - plane) -> min  <=>  min -(K c0 + sum(v) c1 + sum(w) c2)
    lp.set_objective(
        {c[0]: -sgn * len(values), c[1]: -sgn * offsets[:, 0].sum(), c[2]: -sgn * offsets[:, 1].sum()},
        constant=sgn * values.sum(),
    )
    rel = "<=" if kind == "lower" else ">="
    for (a, b), val in zip(offsets, values):
        lp.add_constraint({c[0]: 1.0, c[1]: a, c[2]: b}, rel, val)
    out = lp_solve(lp)
    if out.status != "optimal":
        raise SolverError(f"plane LP ended with status {out.status}")
    return out.x[:3], out.objective


def plane_candidates(image: Image, i, j, delta):
    """Distinct candidate displacements of the inf-ball and their channel values."""
    cs, _ = pixel_candidates(image, i, j, AttackBudget(INF, delta))
    offsets = np.unique(cs.offsets, axis=0)
    values = interpolate_many(image.pixels, i + offsets[:, 0], j + offsets[:, 1])
    return offsets, values


def fit_planes(image: Image, i, j, delta):
    """Lower/upper planes of pixel ``(i, j)`` for every channel, each ``(C, 3)``.

    Planes are in displacement coordinates and repaired to be sound at every
    candidate of the inf-ball of radius ``delta``.
    """
    offsets, values = plane_candidates(image, i, j, delta)
    lower = np.empty((image.channels, 3))
    upper = np.empty((image.channels, 3))
    for ch in range(image.channels):
        vals = values[:, ch]
        if np.ptp(vals) == 0.0:
            lower[ch] = upper[ch] = (vals[0], 0.0, 0.0)
        else:
            lo, _ = _fit_one(offsets, vals, "lower")
            up, _ = _fit_one(offsets, vals, "upper")
            lower[ch] = repair_plane(lo, offsets, vals, "lower")
            upper[ch] = repair_plane(up, offsets, vals, "upper")
        # same rounding allowance as the interval bounds
        if delta > 0:
            pad = ROUNDING_PAD * float(np.max(np.abs(vals)))
            lower[ch, 0] -= pad
            upper[ch, 0] += pad
    return lower, upper


def planes_map(image: Image, delta) -> BoundingPlanes:
    w, c = image.width, image.channels
    lower = np.empty((w, w, c, 3))
    upper = np.empty((w, w, c, 3))
    for i in range(1, w + 1):
        for j in range(1, w + 1):
            lower[i - 1, j - 1], upper[i - 1, j - 1] = fit_planes(image, i, j, delta)
    return BoundingPlanes(lower, upper)


def displacement_box(width: int, delta: float) -> np.ndarray:
    """Per-pixel displacement ranges: the delta-box clipped so pixels stay in the image."""
    grid = np.arange(1, width + 1, dtype=np.float64)
    lo = np.maximum(-delta, 1.0 - grid)
    hi = np.minimum(delta, width - grid)
    box = np.empty((width, width, 2, 2))
    box[:, :, 0, 0] = lo[:, None]
    box[:, :, 0, 1] = hi[:, None]
    box[:, :, 1, 0] = lo[None, :]
    box[:, :, 1, 1] = hi[None, :]
    return box.reshape(width * width, 2, 2)


def image_relaxation(image: Image, budget: AttackBudget, bounds: PixelBounds, planes: BoundingPlanes | None = None) -> InputRelaxation:
    """Assemble the verifier input region of ``image`` under ``budget``."""
    lower, upper = bounds.flat()
    w, c = image.width, image.channels
    relax = InputRelaxation.from_box(lower, upper)
    relax.pixel_of = np.repeat(np.arange(w * w), c)
    relax.disp_box = displacement_box(w, budget.delta)
    relax.flow = FlowGraph.grid(w, budget.gamma)
    if planes is not None:
        relax.planes_lower, relax.planes_upper = planes.flat()
    relax.meta = {"width": w, "channels": c, "budget": budget}
    return relax


# --------------------------------------------------------------------------
# tightening LP
# --------------------------------------------------------------------------

@dataclass
class TighteningLP:
    """The LP plus the variable maps needed to decode its solution."""

    program: LinearProgram
    pixel_vars: dict
    disp_vars: dict


LP_PIXEL_LIMIT = 100


def select_pixels(relax: InputRelaxation, scores, limit: int | None = LP_PIXEL_LIMIT) -> list:
    """Pixels with a positive summed neuron ``scores``, the ``limit`` largest first.

    Ties go to the lower pixel index; ``limit=None`` keeps all of them.
    """
    per_pixel = np.bincount(relax.pixel_of, weights=np.asarray(scores, dtype=np.float64))
    order = sorted((p for p in range(len(per_pixel)) if per_pixel[p] > 0), key=lambda p: (-per_pixel[p], p))
    return sorted(order if limit is None else order[:limit])


def build_tightening_lp(coeffs, constant, relax: InputRelaxation, sense: str = "min",
                        max_pixels: int | None = LP_PIXEL_LIMIT) -> TighteningLP:
    """LP bounding ``constant + coeffs . x`` over the input relaxation.

    Variables: one value variable per input neuron with a nonzero coefficient
    (boxed by its interval) and, when planes are present, two displacement
    variables per involved pixel constrained by the planes and, for finite
    ``gamma``, by flow constraints on the neighbour edges among involved
    pixels.

    With planes, at most ``max_pixels`` pixels enter the LP: those with the
    largest ``sum |coeff| * (upper - lower)`` over their neurons. The other
    terms are bounded by interval substitution and folded into the
    objective constant, which keeps the result sound while bounding the LP
    size on large images.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (relax.size,):
        raise ContractError(f"expression has {coeffs.shape} coefficients, input layer has {relax.size} neurons")
    lp = LinearProgram(sense)
    active = np.nonzero(coeffs)[0]
    if relax.has_planes:
        if relax.pixel_of is None or relax.disp_box is None:
            raise ContractError("planes require pixel_of and disp_box")
        keep = set(select_pixels(relax, np.abs(coeffs) * (relax.upper - relax.lower), max_pixels))
        rest = np.array([k for k in active if int(relax.pixel_of[k]) not in keep], dtype=np.int64)
        active = np.array([k for k in active if int(relax.pixel_of[k]) in keep], dtype=np.int64)
        c = coeffs[rest]
        pick_upper = (c > 0) if sense == "max" else (c < 0)
        constant = float(constant) + float(c @ np.where(pick_upper, relax.upper[rest], relax.lower[rest]))
    pixel_vars = {}
    for k in active:
        pixel_vars[int(k)] = lp.add_var(relax.lower[k], relax.upper[k], f"x{k}")
    disp_vars = {}
    if relax.has_planes:
        for k in active:
            p = int(relax.pixel_of[k])
            if p not in disp_vars:
                box = relax.disp_box[p]
                disp_vars[p] = (
                    lp.add_var(box[0, 0], box[0, 1], f"v{p}"),
                    lp.add_var(box[1, 0], box[1, 1], f"w{p}"),
                )
            v, w = disp_vars[p]
            x = pixel_vars[int(k)]
            lo, up = relax.planes_lower[k], relax.planes_upper[k]
            lp.add_constraint({x: 1.0, v: -lo[1], w: -lo[2]}, ">=", lo[0])
            lp.add_constraint({x: 1.0, v: -up[1], w: -up[2]}, "<=", up[0])
        gamma = relax.gamma
        if relax.flow is not None and math.isfinite(gamma):
            for p, q in relax.flow.restricted(disp_vars):
                for comp in (0, 1):
                    a, b = disp_vars[p][comp], disp_vars[q][comp]
                    lp.add_constraint({a: 1.0, b: -1.0}, "<=", gamma)
                    lp.add_constraint({a: 1.0, b: -1.0}, ">=", -gamma)
    lp.set_objective({pixel_vars[int(k)]: coeffs[k] for k in active}, constant=float(constant))
    return TighteningLP(lp, pixel_vars, disp_vars)


def concretize(coeffs, constant, relax: InputRelaxation, sense: str = "min", use_lp: bool = True) -> float:
    """Bound ``constant + coeffs . x`` from below (``min``) or above (``max``).

    Interval substitution when there are no planes or ``use_lp`` is false,
    otherwise the tightening LP.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if not use_lp or not relax.has_planes:
        pos, neg = np.maximum(coeffs, 0.0), np.minimum(coeffs, 0.0)
        if sense == "min":
            return float(constant + pos @ relax.lower + neg @ relax.upper)
        return float(constant + pos @ relax.upper + neg @ relax.lower)
    if not np.any(coeffs):
        return float(constant)
    program = build_tightening_lp(coeffs, constant, relax, sense).program
    if program.num_vars == 0:
        return float(program.objective_constant)
    out = lp_solve(program)
    if out.status != "optimal":
        raise SolverError(f"tightening LP ended with status {out.status}")
    return float(out.objective)
