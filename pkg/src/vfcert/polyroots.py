"""Real roots of low-degree polynomials by Durand-Kerner (Weierstrass) iteration.

Coefficients are passed in ascending order of degree, matching the way the
arc-stationarity quartic is written: ``J + K v + L v^2 + M v^3 + N v^4``.
"""

from __future__ import annotations

import math

from .errors import DomainError, RootFindingError

MAX_ITERATIONS = 200
STEP_TOL = 1e-14
IMAG_TOL = 1e-7
RESIDUAL_TOL = 1e-8
_EPS = 2.220446049250313e-16


def _horner(coeffs, z):
    # coeffs ascending
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * z + c
    return acc


def _abs_scale(coeffs, r):
    # sum_k |c_k| |r|^k, the rounding scale of a Horner evaluation at r
    return _horner([abs(c) for c in coeffs], abs(r))


def durand_kerner(coeffs, max_iter=MAX_ITERATIONS):
    """All complex roots of the monic polynomial with ascending ``coeffs``.

    ``coeffs`` has length ``n + 1`` with ``coeffs[n] == 1``. Iterates start at
    ``R * (0.4 + 0.9j) ** k`` with ``R`` the Cauchy bound. Iteration stops
    once no iterate moves more than ``1e-14 * (1 + |z|)`` or every iterate has
    a residual at floating-point rounding level.
    """
    n = len(coeffs) - 1
    if n < 1:
        return []
    if n == 1:
        return [complex(-coeffs[0])]
    radius = 1.0 + max(abs(c) for c in coeffs[:-1])
    seed = complex(0.4, 0.9)
    z = [radius * seed**k for k in range(n)]
    for _ in range(max_iter):
        # simultaneous (Jacobi) update keeps sum(z) equal to -coeffs[n-1]
        steps = []
        for k in range(n):
            zk = z[k]
            denom = 1.0 + 0j
            for j in range(n):
                if j != k:
                    diff = zk - z[j]
                    if diff == 0:
                        diff = complex(1e-12 * (1.0 + abs(zk)), 1e-12)
                    denom *= diff
            steps.append(_horner(coeffs, zk) / denom)
        z = [zk - st for zk, st in zip(z, steps)]
        moved = max(abs(st) / (1.0 + abs(zk)) for zk, st in zip(z, steps))
        if moved <= STEP_TOL:
            return z
        if all(abs(_horner(coeffs, zk)) <= 16 * n * _EPS * _abs_scale(coeffs, zk) for zk in z):
            return z
    raise RootFindingError(f"Durand-Kerner did not converge in {max_iter} iterations", best=list(z))


def _polish(coeffs, r, steps=6):
    """Newton refinement of a real root; a step is kept only if the residual drops."""
    deriv = [k * coeffs[k] for k in range(1, len(coeffs))]
    best, best_res = r, abs(_horner(coeffs, r))
    for _ in range(steps):
        if best_res == 0.0:
            break
        d = _horner(deriv, best)
        if d == 0.0:
            break
        cand = best - _horner(coeffs, best) / d
        res = abs(_horner(coeffs, cand))
        if not res < best_res:
            break
        best, best_res = cand, res
    return best


def _cluster_means(z, radius=1e-3):
    """Centroids of groups of at least two iterates lying within ``radius`` of each other.

    Iterates of an m-fold root scatter by ~eps**(1/m) around it (a double real
    root looks like a close conjugate pair), while their centroid is accurate
    to rounding. Centroids are only proposals; the residual test decides.
    """
    means = []
    for k, zk in enumerate(z):
        group = [zj for zj in z if abs(zj - zk) <= radius * (1.0 + abs(zk))]
        if len(group) >= 2:
            means.append(sum(group) / len(group))
    return means


def real_roots(coeffs, max_iter=MAX_ITERATIONS):
    """Sorted distinct real roots of the polynomial with ascending ``coeffs``.

    The leading coefficient must be nonzero. Complex roots are discarded when
    ``|Im z| > 1e-7 * (1 + |Re z|)``; accepted roots are Newton-polished and
    must satisfy ``|sum_k coeffs[k] r^k| <= 1e-8`` on the polynomial as given.
    The absolute test can reject true roots of badly scaled polynomials whose
    rounding error alone exceeds 1e-8; the bound computation therefore seeds
    its own refinement from :func:`durand_kerner` instead of using this filter.
    """
    coeffs = [float(c) for c in coeffs]
    if not all(math.isfinite(c) for c in coeffs):
        raise DomainError("polynomial coefficients must be finite")
    if coeffs[-1] == 0.0:
        raise DomainError("leading coefficient must be nonzero")
    lead = coeffs[-1]
    monic = [c / lead for c in coeffs]
    roots = []
    # exact deflation of zero roots
    while len(monic) > 1 and monic[0] == 0.0:
        monic = monic[1:]
        roots.append(0.0)
    approx = durand_kerner(monic, max_iter=max_iter)
    for z in approx + _cluster_means(approx):
        if abs(z.imag) > IMAG_TOL * (1.0 + abs(z.real)):
            continue
        r = _polish(monic, z.real)
        if abs(_horner(coeffs, r)) <= RESIDUAL_TOL:
            roots.append(r)
    roots.sort()
    distinct = []
    for r in roots:
        if distinct and abs(r - distinct[-1]) <= 1e-12 * (1.0 + abs(r)):
            continue
        distinct.append(r)
    return distinct


def quartic_real_roots(J, K, L, M, N, max_iter=MAX_ITERATIONS):
    """Real roots of ``J + K v + L v^2 + M v^3 + N v^4`` (``N != 0``)."""
    if N == 0:
        raise DomainError("quartic leading coefficient N must be nonzero")
    return real_roots([J, K, L, M, N], max_iter=max_iter)


def arc_quartic_coeffs(B, C, D, delta):
    """Coefficients ``(J, K, L, M, N)`` whose roots contain the ``v`` coordinates of
    the stationary points of ``A + B v + C w + D v w`` on ``v^2 + w^2 = delta^2``.

    Derived from the Lagrange conditions after eliminating the multiplier and
    squaring away the square root; requires ``D != 0``. Squaring admits
    spurious roots that callers must filter.
    """
    if D == 0:
        raise DomainError("arc quartic requires a nonzero bilinear coefficient D")
    E = -B / (2.0 * D)
    F = B * B / (4.0 * D * D)
    G = C / D
    H = E * E + F
    d2 = delta * delta
    J = (d2 - H) ** 2 - 4.0 * F * E * E
    K = -2.0 * G * ((d2 - H) + 2.0 * E * E)
    L = G * G - 4.0 * ((d2 - H) + E * E)
    M = 4.0 * G
    N = 4.0
    return J, K, L, M, N
