"""DeepPoly-style bound propagation with backsubstitution.

Every neuron keeps an interval and, for ReLU outputs, one lower and one upper
affine constraint over its input neuron. Bounds of an affine expression are
obtained by rewriting it layer by layer down to the network input and then
concretizing there, either by interval substitution or by the
flow-tightening LP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..relaxation import InputRelaxation, concretize
from .network import Network, interval_propagate


@dataclass
class ReluRelaxation:
    """``lam * x <= y <= slope * x + intercept`` per neuron."""

    lam: np.ndarray
    slope: np.ndarray
    intercept: np.ndarray


def relu_relaxation(lower, upper) -> ReluRelaxation:
    """Triangle upper bound and a 0/1 lower slope; ties ``u == -l`` pick 0."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    n = lower.size
    lam, slope, icpt = np.zeros(n), np.zeros(n), np.zeros(n)
    active = lower >= 0
    lam[active] = 1.0
    slope[active] = 1.0
    unstable = (lower < 0) & (upper > 0)
    l, u = lower[unstable], upper[unstable]
    slope[unstable] = u / (u - l)
    icpt[unstable] = -l * u / (u - l)
    lam[unstable] = np.where(u > -l, 1.0, 0.0)
    return ReluRelaxation(lam, slope, icpt)


def _times(C, matrix):
    """``C @ matrix`` for dense or sparse ``matrix``, returning a dense array."""
    if sp.issparse(matrix):
        return np.asarray((matrix.T @ C.T).T)
    return C @ matrix


@dataclass
class DeepPolyResult:
    """Per-node bounds plus the ReLU relaxations used (keyed by node index)."""

    lower: list
    upper: list
    relus: dict

    @property
    def output(self):
        return self.lower[-1], self.upper[-1]


class DeepPoly:
    """Bound propagation over one input relaxation.

    Parameters
    ----------
    network, relax
        The network and its input region.
    use_lp
        Concretize backsubstituted margin expressions with the tightening
        LP (only effective when the relaxation carries planes and a finite
        ``gamma``).
    per_step_lp
        Also use the LP for every intermediate neuron bound. Much slower.
    """

    def __init__(self, network: Network, relax: InputRelaxation, use_lp: bool = True, per_step_lp: bool = False):
        self.network = network
        self.relax = relax
        lp_ok = relax.has_planes and np.isfinite(relax.gamma)
        self.use_lp = use_lp and lp_ok
        self.per_step_lp = per_step_lp and lp_ok
        self.result = self._analyze()

    # -- propagation -------------------------------------------------------

    def _analyze(self) -> DeepPolyResult:
        net = self.network
        ilo, ihi = interval_propagate(net, self.relax.lower, self.relax.upper, all_nodes=True)
        lo, hi = [ilo[0]], [ihi[0]]
        self._state = DeepPolyResult(lo, hi, {})
        feeds_relu = {t for t, layer in enumerate(net.layers) if layer.kind == "relu"}
        last = len(net.layers)
        for t, layer in enumerate(net.layers, start=1):
            if layer.kind == "relu":
                rr = relu_relaxation(lo[t - 1], hi[t - 1])
                self._state.relus[t] = rr
                lo.append(np.maximum(lo[t - 1], 0.0))
                hi.append(np.maximum(hi[t - 1], 0.0))
                continue
            # cheap interval step from the current (tighter) bounds
            a, b = self._interval_step(layer, lo, hi, t)
            if t in feeds_relu or t == last:
                n = net.sizes[t]
                eye = np.eye(n)
                zero = np.zeros(n)
                bl = self.bound(t, eye, zero, "min", use_lp=self.per_step_lp)
                bu = self.bound(t, eye, zero, "max", use_lp=self.per_step_lp)
                a = np.maximum(a, bl)
                b = np.minimum(b, bu)
            # interval bounds are always sound too; keep the tighter of both
            lo.append(np.maximum(a, ilo[t]))
            hi.append(np.minimum(b, ihi[t]))
        return self._state

    def _interval_step(self, layer, lo, hi, t):
        a, b = lo[t - 1], hi[t - 1]
        if layer.is_affine:
            m = layer.matrix
            pos = m.maximum(0) if sp.issparse(m) else np.maximum(m, 0.0)
            neg = m - pos
            la = np.asarray(pos @ a).reshape(-1) + np.asarray(neg @ b).reshape(-1) + layer.bias
            ub = np.asarray(pos @ b).reshape(-1) + np.asarray(neg @ a).reshape(-1) + layer.bias
            return la, ub
        return a + lo[layer.source], b + hi[layer.source]

    # -- backsubstitution --------------------------------------------------

    def backsubstitute(self, node: int, C, const, sense: str = "min"):
        """Rewrite rows ``C @ x_node + const`` as an affine form over the input.

        Returns ``(C0, const0)`` such that ``C0 @ x_0 + const0`` bounds the
        expression from below (``min``) or above (``max``).
        """
        C = np.atleast_2d(np.asarray(C, dtype=np.float64))
        const = np.array(const, dtype=np.float64).reshape(-1).copy()
        coefs = {node: C.copy()}
        for t in range(node, 0, -1):
            Ct = coefs.pop(t, None)
            if Ct is None:
                continue
            layer = self.network.layers[t - 1]
            if layer.is_affine:
                self._add(coefs, t - 1, _times(Ct, layer.matrix))
                const += Ct @ layer.bias
            elif layer.kind == "relu":
                rr = self._state.relus[t]
                pos, neg = np.maximum(Ct, 0.0), np.minimum(Ct, 0.0)
                if sense == "min":
                    self._add(coefs, t - 1, pos * rr.lam + neg * rr.slope)
                    const += neg @ rr.intercept
                else:
                    self._add(coefs, t - 1, pos * rr.slope + neg * rr.lam)
                    const += pos @ rr.intercept
            else:
                self._add(coefs, t - 1, Ct)
                self._add(coefs, layer.source, Ct)
        C0 = coefs.get(0, np.zeros((C.shape[0], self.network.input_size)))
        return C0, const

    @staticmethod
    def _add(coefs, node, M):
        if node in coefs:
            coefs[node] = coefs[node] + M
        else:
            coefs[node] = np.array(M, dtype=np.float64)

    def bound(self, node: int, C, const, sense: str = "min", use_lp: bool | None = None) -> np.ndarray:
        """Concrete lower (``min``) or upper (``max``) bounds of ``C @ x_node + const``."""
        if use_lp is None:
            use_lp = self.use_lp
        C0, c0 = self.backsubstitute(node, C, const, sense)
        return np.array([concretize(C0[r], c0[r], self.relax, sense, use_lp=use_lp) for r in range(C0.shape[0])])

    def margins(self, label: int) -> dict:
        """Lower bounds of ``logit[label] - logit[t]`` for every ``t != label``."""
        n = self.network.output_size
        others = [t for t in range(n) if t != label]
        C = np.zeros((len(others), n))
        for r, t in enumerate(others):
            C[r, label] = 1.0
            C[r, t] = -1.0
        node = len(self.network.layers)
        lb = self.bound(node, C, np.zeros(len(others)), "min")
        lo, hi = self.result.output
        return {t: float(max(lb[r], lo[label] - hi[t])) for r, t in enumerate(others)}


def interval_margins(network: Network, relax: InputRelaxation, label: int) -> dict:
    lo, hi = interval_propagate(network, relax.lower, relax.upper)
    return {t: float(lo[label] - hi[t]) for t in range(network.output_size) if t != label}
