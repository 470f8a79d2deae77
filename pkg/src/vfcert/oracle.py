"""Random admissible vector fields, a sampling attack and bound coverage.

Random streams use numpy's Philox4x64-10 counter-based generator. Sample
``k`` of a run with seed ``s`` draws from
``Generator(Philox(SeedSequence([s, k])))``, so every sample is reproducible
on its own and results do not depend on evaluation order.

Coverage aggregation is pinned as follows: for one image, the coverage is
the mean over pixels and channels of the ratio between the sampled value
range and the certified interval width; over a dataset, it is the mean of
the per-image coverages.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, SoundnessError
from .geometry import INF, ROUNDING_PAD, AttackBudget, PixelBounds, bounds_map
from .imaging import Image, VectorField, deform

FLOW_TOL = 1e-9


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """The generator of sample ``index`` in a run seeded with ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


@dataclass(frozen=True)
class SamplerConfig:
    budget: AttackBudget
    samples: int = 10_000
    seed: int = 0
    max_iter: int = 50

    def __post_init__(self):
        if self.samples < 1:
            raise ContractError(f"sample count must be at least 1, got {self.samples}")
        if not 0 <= self.seed < 2**64:
            raise ContractError("seed must be a 64-bit unsigned integer")


def _lengths(dx, dy, p):
    if p == INF:
        return np.maximum(np.abs(dx), np.abs(dy))
    if p == 1:
        return np.abs(dx) + np.abs(dy)
    return np.hypot(dx, dy)


def _into_ball(dx, dy, p, delta):
    size = _lengths(dx, dy, p)
    over = size > delta
    if np.any(over):
        scale = np.ones_like(size)
        scale[over] = delta / size[over]
        dx, dy = dx * scale, dy * scale
        # rounding can leave a last ulp outside
        while np.any(_lengths(dx, dy, p) > delta):
            bad = _lengths(dx, dy, p) > delta
            dx = np.where(bad, dx * (1.0 - 1e-15), dx)
            dy = np.where(bad, dy * (1.0 - 1e-15), dy)
    return dx, dy


def _into_image(dx, dy):
    w = dx.shape[0]
    grid = np.arange(1, w + 1, dtype=np.float64)
    lo, hi = 1.0 - grid, w - grid
    return np.clip(dx, lo[:, None], hi[:, None]), np.clip(dy, lo[None, :], hi[None, :])


def _max_flow(dx, dy):
    if dx.shape[0] < 2:
        return 0.0
    d = np.stack([dx, dy])
    return float(max(np.abs(d[:, 1:, :] - d[:, :-1, :]).max(), np.abs(d[:, :, 1:] - d[:, :, :-1]).max()))


def _relax_edges(d, gamma):
    """One pass over the four disjoint edge classes of ``d`` (shape ``(2, W, W)``),
    meeting each violated edge halfway."""
    w = d.shape[1]
    for axis in (1, 2):
        for parity in (0, 1):
            a = np.arange(parity, w - 1, 2)
            if a.size == 0:
                continue
            left = np.take(d, a, axis=axis)
            right = np.take(d, a + 1, axis=axis)
            diff = right - left
            move = 0.5 * np.sign(diff) * np.maximum(np.abs(diff) - gamma, 0.0)
            if axis == 1:
                d[:, a, :] = left + move
                d[:, a + 1, :] = right - move
            else:
                d[:, :, a] = left + move
                d[:, :, a + 1] = right - move
    return d


def _uniform_ball(rng, n, p, delta):
    if p == INF:
        d = rng.uniform(-delta, delta, size=(2, n))
        return d[0], d[1]
    if p == 1:
        a, b = rng.uniform(-1.0, 1.0, size=(2, n))
        return 0.5 * delta * (a + b), 0.5 * delta * (a - b)
    r = delta * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    return r * np.cos(theta), r * np.sin(theta)


def sample_field(width: int, budget: AttackBudget, rng: np.random.Generator, max_iter: int = 50) -> VectorField:
    """An admissible random field: uniform per-pixel draws smoothed onto the flow bound.

    Draws are clipped to the image, then violated neighbour pairs are pulled
    together (each endpoint by half the excess) and the result re-clipped
    to the ball and the image, until the flow bound holds within
    ``FLOW_TOL``. Whatever excess remains is removed by scaling the whole
    field toward zero, which keeps the ball and image constraints, so the
    returned field is always exactly admissible.
    """
    p, delta, gamma = budget.norm, budget.delta, budget.gamma
    dx, dy = _uniform_ball(rng, width * width, p, delta)
    dx, dy = _into_ball(dx.reshape(width, width), dy.reshape(width, width), p, delta)
    dx, dy = _into_image(dx, dy)
    if math.isfinite(gamma):
        for _ in range(max_iter):
            if _max_flow(dx, dy) <= gamma + FLOW_TOL:
                break
            dx, dy = _relax_edges(np.stack([dx, dy]), gamma)
            dx, dy = _into_ball(dx, dy, p, delta)
            dx, dy = _into_image(dx, dy)
        flow = _max_flow(dx, dy)
        if flow > gamma:
            scale = gamma / flow
            while _max_flow(dx * scale, dy * scale) > gamma:
                scale *= 1.0 - 1e-15
            dx, dy = dx * scale, dy * scale
    return VectorField(dx, dy)


def check_admissible(fld: VectorField, budget: AttackBudget, flow_tol: float = 0.0) -> bool:
    """Independent pixel-by-pixel admissibility check of a field."""
    w = fld.width
    for i in range(w):
        for j in range(w):
            a, b = float(fld.dx[i, j]), float(fld.dy[i, j])
            if budget.norm == INF:
                size = max(abs(a), abs(b))
            elif budget.norm == 1:
                size = abs(a) + abs(b)
            else:
                size = math.sqrt(a * a + b * b)
            if size > budget.delta:
                return False
            if not (1 <= i + 1 + a <= w and 1 <= j + 1 + b <= w):
                return False
            if math.isfinite(budget.gamma):
                for ni, nj in ((i + 1, j), (i, j + 1)):
                    if ni < w and nj < w:
                        if abs(a - fld.dx[ni, nj]) > budget.gamma + flow_tol:
                            return False
                        if abs(b - fld.dy[ni, nj]) > budget.gamma + flow_tol:
                            return False
    return True


def random_attack(network, image: Image, budget: AttackBudget, label: int, tries: int, seed: int = 0):
    """First sampled field (in sample order) that changes the prediction.

    Returns ``(field, adversarial_label, sample_index)`` or ``None``.
    """
    from .verifier.network import forward

    for k in range(tries):
        fld = sample_field(image.width, budget, sample_rng(seed, k))
        logits = forward(network, deform(image, fld))
        pred = int(np.argmax(logits))
        if pred != label and logits[pred] > logits[label]:
            return fld, pred, k
    return None


@dataclass
class CoverageReport:
    """Sampled value ranges against the certified intervals."""

    sampled_lower: np.ndarray
    sampled_upper: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    coverage: float
    samples: int

    def ratios(self) -> np.ndarray:
        """Per-pixel ``(s_u - s_l) / (u - l)``; intervals no wider than the
        rounding pad of the bounds count as degenerate (ratio 1)."""
        width = self.upper - self.lower
        seen = self.sampled_upper - self.sampled_lower
        out = np.ones_like(width)
        pos = width > 4.0 * ROUNDING_PAD * np.maximum(np.abs(self.lower), np.abs(self.upper))
        out[pos] = np.minimum(seen[pos] / width[pos], 1.0)
        return out

    def to_json(self) -> dict:
        return {
            "width": int(self.lower.shape[0]),
            "channels": int(self.lower.shape[2]),
            "samples": self.samples,
            "coverage": self.coverage,
            "sampled_l": np.moveaxis(self.sampled_lower, -1, 0).tolist(),
            "sampled_u": np.moveaxis(self.sampled_upper, -1, 0).tolist(),
            "l": np.moveaxis(self.lower, -1, 0).tolist(),
            "u": np.moveaxis(self.upper, -1, 0).tolist(),
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)


def estimate_coverage(image: Image, budget: AttackBudget, samples: int, seed: int = 0, bounds: PixelBounds | None = None) -> CoverageReport:
    """How much of each certified interval random admissible fields reach.

    Coverage is the mean over pixels and channels of
    ``(s_u - s_l) / (u - l)``; zero-width intervals (up to the rounding pad
    of the bounds) count as fully covered.
    Raises :class:`SoundnessError` if any sampled value leaves its interval.
    """
    if samples < 2:
        raise ContractError(f"coverage needs at least 2 samples, got {samples}")
    if bounds is None:
        bounds = bounds_map(image, budget)
    s_lo = np.full(image.pixels.shape, np.inf)
    s_hi = np.full(image.pixels.shape, -np.inf)
    for k in range(samples):
        vals = deform(image, sample_field(image.width, budget, sample_rng(seed, k))).pixels
        np.minimum(s_lo, vals, out=s_lo)
        np.maximum(s_hi, vals, out=s_hi)
    if np.any(s_lo < bounds.lower) or np.any(s_hi > bounds.upper):
        worst = max(float(np.max(bounds.lower - s_lo)), float(np.max(s_hi - bounds.upper)))
        raise SoundnessError(f"sampled value escapes the certified interval by {worst:.3g}")
    report = CoverageReport(s_lo, s_hi, bounds.lower.copy(), bounds.upper.copy(), 0.0, samples)
    report.coverage = float(np.mean(report.ratios()))
    return report
