"""Tight per-pixel interval bounds under norm-bounded vector-field deformations.

A pixel ``(i, j)`` displaced by ``d = (a, b)`` with ``||d||_p <= delta`` reads
the bilinear interpolant at ``(i + a, j + b)``. On each interpolation region
the interpolant is ``A + B a + C b + D a b`` in displacement coordinates, and
its extrema over ``ball ∩ region`` lie on the boundary of that intersection.
The boundary is made of axis-parallel pieces of the region's edges (where the
interpolant is linear, so segment endpoints suffice) and pieces of the ball
boundary: axis-parallel edges for ``p = inf``, diagonals for ``p = 1`` (the
interpolant restricted to a diagonal is quadratic) and a circular arc for
``p = 2`` (stationary points found from a quartic in one coordinate).

All routines work in displacement coordinates relative to the pixel centre;
public helpers translate to absolute 1-based coordinates where noted.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, RootFindingError, UnsupportedError
from .imaging import Image, RegionCoeffs, interpolate_many
from .polyroots import arc_quartic_coeffs, durand_kerner, _cluster_means

log = logging.getLogger(__name__)

INF = math.inf
ROOT_PAD = 1e-9
# bilinear evaluation at a non-candidate point may round a few ulps past the
# exact extremes; bounds are widened by this relative amount to cover it
ROUNDING_PAD = 8 * np.finfo(np.float64).eps
FALLBACK_SAMPLES = 4096
_BOX_TOL = 1e-12


def parse_norm(p):
    """Normalise a norm designator (``1``, ``2``, ``inf``, ``"inf"``...) to 1, 2 or inf."""
    if isinstance(p, str):
        key = p.strip().lower()
        if key in ("inf", "infinity", "linf", "oo"):
            return INF
        try:
            p = float(key)
        except ValueError:
            raise DomainError(f"unknown norm {p!r}") from None
    if p == INF:
        return INF
    if p in (1, 2):
        return int(p)
    raise DomainError(f"norm must be 1, 2 or inf, got {p!r}")


def parse_gamma(g):
    if isinstance(g, str):
        return INF if g.strip().lower() in ("inf", "infinity") else float(g)
    return float(g)


def norm_label(p) -> str:
    return "inf" if p == INF else str(int(p))


@dataclass(frozen=True)
class AttackBudget:
    """Displacement budget ``||tau||_{T_p} <= delta`` and flow bound ``gamma``.

    ``gamma = inf`` means no smoothness requirement; ``gamma = 0`` allows
    only translations.
    """

    norm: float
    delta: float
    gamma: float = INF

    def __post_init__(self):
        object.__setattr__(self, "norm", parse_norm(self.norm))
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "gamma", parse_gamma(self.gamma))
        if not self.delta >= 0 or not math.isfinite(self.delta):
            raise DomainError(f"delta must be finite and >= 0, got {self.delta}")
        if not self.gamma >= 0:
            raise DomainError(f"gamma must be >= 0, got {self.gamma}")

    def to_json(self) -> dict:
        return {
            "norm": norm_label(self.norm),
            "delta": self.delta,
            "gamma": "inf" if self.gamma == INF else self.gamma,
        }


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """Candidate displacements of one pixel, each tagged with its region ``(m, n)``."""

    pixel: tuple
    offsets: np.ndarray
    regions: list = field(default_factory=list)

    @property
    def coords(self) -> np.ndarray:
        return self.offsets + np.asarray(self.pixel, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class PixelBounds:
    """Per-pixel, per-channel intervals stored as ``(W, W, C)`` arrays."""

    lower: np.ndarray
    upper: np.ndarray

    @property
    def width(self) -> int:
        return self.lower.shape[0]

    @property
    def channels(self) -> int:
        return self.lower.shape[2]

    def flat(self):
        """``(lower, upper)`` flattened in network input order."""
        return self.lower.reshape(-1), self.upper.reshape(-1)

    def contains(self, image: Image, tol: float = 0.0) -> bool:
        return bool(np.all(image.pixels >= self.lower - tol) and np.all(image.pixels <= self.upper + tol))

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "channels": self.channels,
            "l": np.moveaxis(self.lower, 2, 0).tolist(),
            "u": np.moveaxis(self.upper, 2, 0).tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PixelBounds":
        from .errors import FormatError

        try:
            lower = np.moveaxis(np.array(obj["l"], dtype=np.float64), 0, 2)
            upper = np.moveaxis(np.array(obj["u"], dtype=np.float64), 0, 2)
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"malformed pixel-bounds JSON: {exc}") from exc
        if lower.shape != upper.shape or lower.ndim != 3:
            raise FormatError(f"pixel-bounds shapes differ: {lower.shape} vs {upper.shape}")
        return cls(lower, upper)


# --------------------------------------------------------------------------
# ball helpers (displacement coordinates)
# --------------------------------------------------------------------------

def _norm(p, a, b):
    if p == INF:
        return max(abs(a), abs(b))
    if p == 1:
        return abs(a) + abs(b)
    return math.hypot(a, b)


def _half_width(p, delta, t):
    """Half-length of the ball's slice at coordinate ``t``; None when empty."""
    at = abs(t)
    if at > delta:
        return None
    if p == INF:
        return delta
    if p == 1:
        return delta - at
    return math.sqrt(max(delta * delta - t * t, 0.0))


def _region_box(i, j, m, n):
    return (float(m - i), float(m + 1 - i), float(n - j), float(n + 1 - j))


def _in_box(box, a, b, tol=_BOX_TOL):
    a0, a1, b0, b1 = box
    return a0 - tol <= a <= a1 + tol and b0 - tol <= b <= b1 + tol


def _clamp_box(box, a, b):
    a0, a1, b0, b1 = box
    return min(max(a, a0), a1), min(max(b, b0), b1)


def _box_nearest_norm(box, p):
    a0, a1, b0, b1 = box
    return _norm(p, min(max(0.0, a0), a1), min(max(0.0, b0), b1))


def _box_farthest_norm(box, p):
    a0, a1, b0, b1 = box
    return max(_norm(p, a, b) for a in (a0, a1) for b in (b0, b1))


def reachable_regions(i, j, budget: AttackBudget, width: int):
    """Regions ``(m, n)`` whose cell meets the ball around ``(i, j)`` (inside the image)."""
    p, delta = budget.norm, budget.delta
    lo_m = max(1, math.ceil(i - delta) - 1)
    hi_m = min(width - 1, math.floor(i + delta))
    lo_n = max(1, math.ceil(j - delta) - 1)
    hi_n = min(width - 1, math.floor(j + delta))
    out = []
    for m in range(lo_m, hi_m + 1):
        for n in range(lo_n, hi_n + 1):
            if _box_nearest_norm(_region_box(i, j, m, n), p) <= delta:
                out.append((m, n))
    return out


def centered_coeffs(pixels, channel, i, j, m, n):
    """``(A, B, C, D)`` of the interpolant on region ``(m, n)`` in displacement
    coordinates around pixel ``(i, j)``; built from local cell offsets for accuracy."""
    q = pixels[:, :, channel]
    i00, i10 = q[m - 1, n - 1], q[m, n - 1]
    i01, i11 = q[m - 1, n], q[m, n]
    b = i10 - i00
    c = i01 - i00
    d = i00 - i10 - i01 + i11
    s0 = float(i - m)
    t0 = float(j - n)
    return (
        float(i00 + b * s0 + c * t0 + d * s0 * t0),
        float(b + d * t0),
        float(c + d * s0),
        float(d),
    )


def _recenter(coeffs: RegionCoeffs, i, j):
    A, B, C, D = coeffs.A, coeffs.B, coeffs.C, coeffs.D
    return (A + B * i + C * j + D * i * j, B + D * j, C + D * i, D)


# --------------------------------------------------------------------------
# per-region candidates
# --------------------------------------------------------------------------

def _edge_endpoints(box, p, delta):
    """Endpoints of each region edge clipped to the ball."""
    a0, a1, b0, b1 = box
    pts = []
    for a in (a0, a1):
        h = _half_width(p, delta, a)
        if h is not None:
            lo, hi = max(b0, -h), min(b1, h)
            if lo <= hi:
                pts.append((a, lo))
                pts.append((a, hi))
    for b in (b0, b1):
        h = _half_width(p, delta, b)
        if h is not None:
            lo, hi = max(a0, -h), min(a1, h)
            if lo <= hi:
                pts.append((lo, b))
                pts.append((hi, b))
    return pts


def _axis_points(box, delta):
    return [pt for pt in ((delta, 0.0), (-delta, 0.0), (0.0, delta), (0.0, -delta)) if _in_box(box, *pt, tol=0.0)]


def _inf_vertices(box, delta):
    a0, a1, b0, b1 = box
    alo, ahi = max(a0, -delta), min(a1, delta)
    blo, bhi = max(b0, -delta), min(b1, delta)
    if alo > ahi or blo > bhi:
        return []
    return [(alo, blo), (ahi, blo), (alo, bhi), (ahi, bhi)]


def _diagonal_stationary(box, delta, centered):
    """Stationary points of the interpolant on the four edges of the l1 ball."""
    _, B, C, D = centered
    if D == 0.0 or delta == 0.0:
        return []
    pts = []
    for sa in (1.0, -1.0):
        for sb in (1.0, -1.0):
            # edge sa*a + sb*b = delta, parametrised as b = s*a + c
            s = -sa * sb
            c = sb * delta
            a = -(B + s * C + D * c) / (2.0 * s * D)
            if not 0.0 <= sa * a <= delta:
                continue
            b = s * a + c
            if _in_box(box, a, b):
                pts.append(_clamp_box(box, a, b))
    return pts


def _arc_gradient(B, C, D, delta, theta):
    # d/dtheta of A + B*delta*cos + C*delta*sin + D*delta^2*cos*sin
    return -B * delta * math.sin(theta) + C * delta * math.cos(theta) + D * delta * delta * math.cos(2.0 * theta)


def _newton_angle(B, C, D, delta, theta, steps=8):
    g = _arc_gradient(B, C, D, delta, theta)
    for _ in range(steps):
        if g == 0.0:
            break
        dg = -B * delta * math.cos(theta) - C * delta * math.sin(theta) - 2.0 * D * delta * delta * math.sin(2.0 * theta)
        if dg == 0.0:
            break
        cand = theta - g / dg
        gc = _arc_gradient(B, C, D, delta, cand)
        if not abs(gc) < abs(g):
            break
        theta, g = cand, gc
    return theta, g


def _arc_stationary_angles(B, C, D, delta):
    """Angles of the stationary points of the interpolant on the circle of radius ``delta``.

    Raises RootFindingError when the quartic solve fails.
    """
    scale = abs(B) * delta + abs(C) * delta + abs(D) * delta * delta
    if scale == 0.0:
        return []
    if abs(D) * delta <= 1e-12 * (abs(B) + abs(C)):
        # no bilinear term: A + delta*(B cos + C sin) peaks at atan2(C, B)
        base = math.atan2(C, B)
        return [base, base + math.pi]
    J, K, L, M, N = arc_quartic_coeffs(B, C, D, delta)
    roots = durand_kerner([J / N, K / N, L / N, M / N, 1.0])
    seeds = []
    for z in roots + _cluster_means(roots):
        v = z.real
        if abs(v) > delta * (1.0 + 1e-6):
            continue
        v = min(max(v, -delta), delta)
        w = math.sqrt(max(delta * delta - v * v, 0.0))
        seeds.append(math.atan2(w, v))
        seeds.append(math.atan2(-w, v))
    tol = 1e-9 * scale
    angles = []
    for th in seeds:
        th, g = _newton_angle(B, C, D, delta, th)
        # squaring admits spurious roots; keep genuine stationary points only
        if abs(g) <= tol:
            angles.append(th)
    return angles


def _arc_candidates(box, delta, centered):
    """Candidate points on the circular part of the boundary and a soundness slack.

    The slack is zero unless root finding failed and the arc was sampled.
    """
    _, B, C, D = centered
    if delta == 0.0:
        return [], 0.0
    if _box_nearest_norm(box, 2) >= delta or _box_farthest_norm(box, 2) <= delta:
        # the circle only touches the region at edge points (already candidates)
        return [], 0.0
    try:
        angles = _arc_stationary_angles(B, C, D, delta)
    except RootFindingError as exc:
        log.warning("quartic root finding failed (%s); sampling arc densely", exc)
        return _arc_fallback(box, delta, centered)
    pts = []
    pad = ROOT_PAD / delta
    for th in angles:
        for t in (th - pad, th, th + pad):
            a, b = delta * math.cos(t), delta * math.sin(t)
            if _in_box(box, a, b):
                pts.append(_clamp_box(box, a, b))
    return pts, 0.0


def _arc_fallback(box, delta, centered):
    _, B, C, D = centered
    step = 2.0 * math.pi / FALLBACK_SAMPLES
    pts = []
    for k in range(FALLBACK_SAMPLES):
        a, b = delta * math.cos(k * step), delta * math.sin(k * step)
        if _in_box(box, a, b, tol=0.0):
            pts.append((a, b))
    a0, a1, b0, b1 = box
    lipschitz = abs(B) + abs(C) + abs(D) * (max(abs(a0), abs(a1)) + max(abs(b0), abs(b1)))
    return pts, lipschitz * delta * step


def region_candidates(p, delta, box, centered_list):
    """Candidate displacements for one region and the soundness slack.

    ``centered_list`` holds the displacement-coordinate coefficients of every
    channel; stationary points of all channels are pooled.
    """
    if p == INF:
        return _inf_vertices(box, delta), 0.0
    pts = _edge_endpoints(box, p, delta)
    slack = 0.0
    if p == 1:
        pts += [pt for pt in ((delta, 0.0), (-delta, 0.0), (0.0, delta), (0.0, -delta)) if _in_box(box, *pt, tol=0.0)]
        for cc in centered_list:
            pts += _diagonal_stationary(box, delta, cc)
    else:
        pts += _axis_points(box, delta)
        for cc in centered_list:
            extra, s = _arc_candidates(box, delta, cc)
            pts += extra
            slack = max(slack, s)
    return pts, slack


def _check_region(i, j, delta, region, width=None):
    m, n = region
    if width is not None and not (1 <= m <= width - 1 and 1 <= n <= width - 1):
        raise DomainError(f"region {region} outside the image")
    if delta < 0:
        raise DomainError("delta must be >= 0")
    return _region_box(i, j, m, n)


def _to_abs(i, j, pts):
    if not pts:
        return np.zeros((0, 2))
    return np.asarray(pts, dtype=np.float64) + np.array([i, j], dtype=np.float64)


def candidates_inf(i, j, delta, region, coeffs=None):
    """Vertices of the rectangle ``B_inf(i, j) ∩ region`` in absolute coordinates."""
    box = _check_region(i, j, delta, region)
    return _to_abs(i, j, _inf_vertices(box, delta))


def candidates_l1(i, j, delta, region, coeffs: RegionCoeffs):
    """Vertices of ``B_1(i, j) ∩ region`` plus interior stationary points of its diagonal edges."""
    box = _check_region(i, j, delta, region)
    pts, _ = region_candidates(1, delta, box, [_recenter(coeffs, i, j)])
    return _to_abs(i, j, pts)


def candidates_l2(i, j, delta, region, coeffs: RegionCoeffs):
    """Edge/arc endpoints of ``B_2(i, j) ∩ region`` plus stationary points on the arc."""
    box = _check_region(i, j, delta, region)
    pts, _ = region_candidates(2, delta, box, [_recenter(coeffs, i, j)])
    return _to_abs(i, j, pts)


# --------------------------------------------------------------------------
# per-pixel bounds
# --------------------------------------------------------------------------

def pixel_candidates(image: Image, i, j, budget: AttackBudget) -> tuple[CandidateSet, float]:
    """All candidate displacements of pixel ``(i, j)`` and the fallback slack (normally 0)."""
    pixels = image.pixels
    width = image.width
    if not (1 <= i <= width and 1 <= j <= width):
        raise DomainError(f"pixel ({i}, {j}) outside 1..{width}")
    p, delta = budget.norm, budget.delta
    if width == 1:
        return CandidateSet((i, j), np.zeros((1, 2)), [(1, 1)]), 0.0
    offsets, regions = [], []
    slack = 0.0
    for m, n in reachable_regions(i, j, budget, width):
        box = _region_box(i, j, m, n)
        centered = []
        if p != INF:
            for ch in range(image.channels):
                cc = centered_coeffs(pixels, ch, i, j, m, n)
                if cc[1] != 0.0 or cc[2] != 0.0 or cc[3] != 0.0:
                    centered.append(cc)
        pts, s = region_candidates(p, delta, box, centered)
        slack = max(slack, s)
        offsets += pts
        regions += [(m, n)] * len(pts)
    arr = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    return CandidateSet((i, j), arr, regions), slack


def _candidate_values(image, cs: CandidateSet):
    i, j = cs.pixel
    return interpolate_many(image.pixels, i + cs.offsets[:, 0], j + cs.offsets[:, 1])


def pixel_interval(image: Image, i, j, budget: AttackBudget):
    """Per-channel ``(lower, upper)`` over every admissible displacement of pixel ``(i, j)``."""
    cs, slack = pixel_candidates(image, i, j, budget)
    vals = _candidate_values(image, cs)
    return rounding_pad(vals.min(axis=0) - slack, vals.max(axis=0) + slack, budget.delta)


def rounding_pad(lower, upper, delta):
    """Widen ``[lower, upper]`` by ``ROUNDING_PAD`` relative to its magnitude (no-op for ``delta = 0``)."""
    if delta == 0.0:
        return lower, upper
    pad = ROUNDING_PAD * np.maximum(np.abs(lower), np.abs(upper))
    return lower - pad, upper + pad


def _bounds_inf(pixels, delta):
    width = pixels.shape[0]
    reach = min(delta, float(width))
    ks = np.arange(-math.floor(reach), math.floor(reach) + 1, dtype=np.float64)
    offs = np.unique(np.concatenate([[-delta, delta], ks[np.abs(ks) < delta]]))
    grid = np.arange(1, width + 1, dtype=np.float64)
    xs = np.clip(grid[:, None] + offs[None, :], 1.0, float(width))
    vals = interpolate_many(pixels, xs[:, None, :, None], xs[None, :, None, :])
    return vals.min(axis=(2, 3)), vals.max(axis=(2, 3))


def bounds_map(image: Image, budget: AttackBudget) -> PixelBounds:
    """Interval bounds for every pixel and channel."""
    if budget.norm == INF and image.width > 1:
        lower, upper = rounding_pad(*_bounds_inf(image.pixels, budget.delta), budget.delta)
        return PixelBounds(lower, upper)
    w, c = image.width, image.channels
    lower = np.empty((w, w, c))
    upper = np.empty((w, w, c))
    for i in range(1, w + 1):
        for j in range(1, w + 1):
            lo, hi = pixel_interval(image, i, j, budget)
            lower[i - 1, j - 1] = lo
            upper[i - 1, j - 1] = hi
    return PixelBounds(lower, upper)


def shrink_into_ball(d, p, delta):
    """Scale ``d`` toward the origin until ``||d||_p <= delta`` holds in floating point."""
    a, b = float(d[0]), float(d[1])
    size = _norm(p, a, b)
    if size <= delta:
        # exact boundary points (e.g. box corners) are already admissible
        if p == INF or size <= delta * (1.0 - 1e-15):
            return np.array([a, b])
    if delta == 0.0:
        return np.zeros(2)
    # leave a few ulps of room so any reasonable norm evaluation agrees
    target = delta * (1.0 - 1e-15)
    factor = target / size
    for _ in range(64):
        if _norm(p, a * factor, b * factor) <= target:
            return np.array([a * factor, b * factor])
        factor *= 1.0 - 1e-15
    return np.zeros(2)


def extremal_witness(image: Image, i, j, budget: AttackBudget, sense: str = "max") -> np.ndarray:
    """A displacement attaining the lower (``sense="min"``) or upper bound of a
    single-channel pixel."""
    if image.channels != 1:
        raise UnsupportedError("extremal witnesses exist per channel only for single-channel images")
    if sense not in ("min", "max"):
        raise DomainError(f"sense must be 'min' or 'max', got {sense!r}")
    cs, _ = pixel_candidates(image, i, j, budget)
    vals = _candidate_values(image, cs)[:, 0]
    k = int(np.argmax(vals) if sense == "max" else np.argmin(vals))
    return shrink_into_ball(cs.offsets[k], budget.norm, budget.delta)


def realize_value(image: Image, i, j, budget: AttackBudget, target: float, iters: int = 80) -> np.ndarray:
    """A displacement whose single-channel value is as close as possible to ``target``.

    Walks the path minimiser -> pixel centre -> maximiser (it stays inside the
    convex set ``ball ∩ image``) and bisects on the segment that brackets the
    target; exact up to bisection resolution for any target inside the bounds.
    """
    if image.channels != 1:
        raise UnsupportedError("value realisation is defined for single-channel images")
    lo_d = extremal_witness(image, i, j, budget, "min")
    hi_d = extremal_witness(image, i, j, budget, "max")

    def val(d):
        return float(interpolate_many(image.pixels, i + d[0], j + d[1])[0])

    zero = np.zeros(2)
    v_lo, v0, v_hi = val(lo_d), val(zero), val(hi_d)
    if target <= v_lo:
        return lo_d
    if target >= v_hi:
        return hi_d
    # value rises along minimiser -> centre -> maximiser
    a, b = (lo_d, zero) if target <= v0 else (zero, hi_d)
    t0, t1 = 0.0, 1.0
    for _ in range(iters):
        tm = 0.5 * (t0 + t1)
        if val(a + tm * (b - a)) < target:
            t0 = tm
        else:
            t1 = tm
    d = a + t0 * (b - a)
    return shrink_into_ball(d, budget.norm, budget.delta)


def field_violation(field, budget: AttackBudget) -> float:
    """Largest violation of the budget by ``field``: norm excess, flow excess on
    4-neighbour pairs, or distance outside the image (0 when admissible)."""
    w = field.width
    stacked = np.stack([field.dx, field.dy], axis=-1)
    lengths = np.linalg.norm(stacked, ord=np.inf if budget.norm == INF else budget.norm, axis=-1)
    worst = float(np.max(lengths)) - budget.delta
    if math.isfinite(budget.gamma):
        for comp in (field.dx, field.dy):
            if w > 1:
                worst = max(worst, float(np.max(np.abs(np.diff(comp, axis=0)))) - budget.gamma)
                worst = max(worst, float(np.max(np.abs(np.diff(comp, axis=1)))) - budget.gamma)
    grid = np.arange(1, w + 1, dtype=np.float64)
    x = grid[:, None] + field.dx
    y = grid[None, :] + field.dy
    outside = max(float(np.max(1.0 - x)), float(np.max(x - w)), float(np.max(1.0 - y)), float(np.max(y - w)))
    return max(worst, outside, 0.0)
