"""Certification driver: input relaxation, verifier dispatch, witnesses, reports."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ContractError, FormatError
from ..geometry import INF, AttackBudget, PixelBounds, bounds_map, field_violation, norm_label, parse_gamma, parse_norm, realize_value, shrink_into_ball
from ..imaging import Image, VectorField, deform
from ..relaxation import BoundingPlanes, InputRelaxation, image_relaxation, planes_map
from .deeppoly import DeepPoly, interval_margins
from .milp import encode_network, solve_margin
from .network import Network, forward

METHODS = ("interval", "deeppoly", "deeppoly+flow", "milp", "milp+flow")
STATUSES = ("certified", "falsified", "unknown", "timeout")


@dataclass
class CertificationReport:
    """Outcome of certifying one image against one budget.

    ``margins`` maps each adversarial label to a proven lower bound on
    ``logit[label] - logit[t]``. A ``falsified`` report carries an admissible
    ``witness`` field whose deformed image is classified as
    ``adversarial_label``.
    """

    image: object
    norm: object
    delta: float
    gamma: float
    method: str
    status: str
    label: Optional[int] = None
    predicted: Optional[int] = None
    margins: dict = field(default_factory=dict)
    time_s: float = 0.0
    witness: Optional[VectorField] = None
    adversarial_label: Optional[int] = None
    note: str = ""

    @property
    def certified(self) -> bool:
        return self.status == "certified"

    @property
    def min_margin(self) -> float:
        return min(self.margins.values()) if self.margins else math.inf

    def to_json(self) -> dict:
        out = {
            "image": self.image,
            "norm": norm_label(self.norm),
            "delta": self.delta,
            "gamma": "inf" if math.isinf(self.gamma) else self.gamma,
            "method": self.method,
            "status": self.status,
            "label": self.label,
            "predicted": self.predicted,
            "margins": {str(k): v for k, v in sorted(self.margins.items())},
            "time_s": self.time_s,
        }
        if self.witness is not None:
            out["witness"] = self.witness.to_json()
            out["adversarial_label"] = self.adversarial_label
        if self.note:
            out["note"] = self.note
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "CertificationReport":
        try:
            witness = VectorField.from_json(obj["witness"]) if obj.get("witness") else None
            status = obj["status"]
            if status not in STATUSES:
                raise FormatError(f"unknown status {status!r}")
            return cls(
                image=obj["image"],
                norm=parse_norm(obj["norm"]),
                delta=float(obj["delta"]),
                gamma=parse_gamma(obj["gamma"]),
                method=obj["method"],
                status=status,
                label=obj.get("label"),
                predicted=obj.get("predicted"),
                margins={int(k): float(v) for k, v in obj.get("margins", {}).items()},
                time_s=float(obj.get("time_s", 0.0)),
                witness=witness,
                adversarial_label=obj.get("adversarial_label"),
                note=obj.get("note", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed certification report: {exc}") from exc

    def to_line(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _status_from_margins(margins) -> str:
    return "certified" if margins and all(m > 0 for m in margins.values()) else "unknown"


def _check_flow(relax: InputRelaxation, use_flow: bool):
    if use_flow and math.isfinite(relax.gamma) and not relax.has_planes:
        raise ContractError("a finite gamma needs bounding planes for the flow LP")


def deeppoly_certify(network: Network, relax: InputRelaxation, label: int, use_flow: bool = True, per_step_lp: bool = False):
    """Margins and status from DeepPoly, concretized by the flow LP when available.

    Returns ``(margins, status, analysis)``.
    """
    _check_flow(relax, use_flow)
    dp = DeepPoly(network, relax, use_lp=use_flow, per_step_lp=per_step_lp)
    margins = dp.margins(label)
    return margins, _status_from_margins(margins), dp


# ---------------------------------------------------------------------------
# witnesses
# ---------------------------------------------------------------------------

def _flips(network, image, fld, label):
    logits = forward(network, deform(image, fld))
    others = [t for t in range(len(logits)) if t != label]
    t = max(others, key=lambda k: logits[k])
    return (t if logits[label] - logits[t] < 0 else None), logits


def decode_witness(network: Network, image: Image, budget: AttackBudget, relax: InputRelaxation, enc, x, label: int):
    """Turn a MILP point into an admissible flipping field, if it yields one.

    Tries the displacement assignment of the program (when planes were
    encoded) and, for single-channel images without a flow bound, per-pixel
    value realisation. Returns ``(field, adversarial_label)`` or ``None``.
    """
    w = image.width
    fields = []
    if enc.disp_vars and len(enc.disp_vars) == w * w:
        d = np.array([[x[enc.disp_vars[p][0]], x[enc.disp_vars[p][1]]] for p in range(w * w)])
        if budget.norm != INF:
            d = np.array([shrink_into_ball(r, budget.norm, budget.delta) for r in d])
        fields.append(VectorField(d[:, 0].reshape(w, w), d[:, 1].reshape(w, w)))
    if image.channels == 1 and math.isinf(budget.gamma):
        vals = x[enc.input_vars]
        clean = image.flat()
        d = np.zeros((w * w, 2))
        for p in range(w * w):
            if vals[p] != clean[p]:
                d[p] = realize_value(image, p // w + 1, p % w + 1, budget, float(vals[p]))
        fields.append(VectorField(d[:, 0].reshape(w, w), d[:, 1].reshape(w, w)))
    for fld in fields:
        if field_violation(fld, budget) > 0.0:
            continue
        t, _ = _flips(network, image, fld, label)
        if t is not None:
            return fld, t
    return None


def milp_certify(network: Network, relax: InputRelaxation, label: int, timeout=None, image: Image | None = None,
                 budget: AttackBudget | None = None, use_flow: bool = True, analysis: DeepPoly | None = None):
    """Exact margins by MILP, one program per adversarial label.

    Labels are processed in decreasing clean-logit order, each receiving an
    equal share of the remaining ``timeout``. Returns ``(margins, status,
    witness)`` where ``witness`` is ``(field, adversarial_label)`` or ``None``.
    """
    _check_flow(relax, use_flow)
    if analysis is None:
        analysis = DeepPoly(network, relax, use_lp=use_flow)
    dp_margins = analysis.margins(label)
    enc = encode_network(network, relax, analysis.result.lower, analysis.result.upper, use_flow=use_flow)
    if image is not None:
        logits = forward(network, image)
    else:
        logits = forward(network, 0.5 * (relax.lower + relax.upper))
    order = sorted(dp_margins, key=lambda t: (-logits[t], t))
    deadline = None if timeout is None else time.monotonic() + timeout
    margins, timed_out, witness = {}, [], None
    for idx, t in enumerate(order):
        share = None
        if deadline is not None:
            share = max(0.0, (deadline - time.monotonic()) / (len(order) - idx))
        out = solve_margin(enc, label, t, share)
        if out.status == "optimal":
            margins[t] = float(out.objective)
        elif out.status == "timeout":
            timed_out.append(t)
            margins[t] = float(max(out.bound, dp_margins[t]))
        else:
            # the relaxation contains the clean input, so this is numerical trouble
            margins[t] = dp_margins[t]
        if witness is None and out.x is not None and out.objective is not None and out.objective < 0 and image is not None and budget is not None:
            witness = decode_witness(network, image, budget, relax, enc, out.x, label)
    if witness is not None:
        status = "falsified"
    elif margins and all(m > 0 for m in margins.values()):
        status = "certified"
    elif timed_out:
        status = "timeout"
    else:
        status = "unknown"
    return margins, status, witness


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def resolve_method(method: str, budget: AttackBudget) -> str:
    """Canonical method name; finite ``gamma`` upgrades to the flow variant."""
    if method not in METHODS:
        raise ContractError(f"method must be one of {METHODS}, got {method!r}")
    if method in ("deeppoly", "milp") and math.isfinite(budget.gamma):
        return method + "+flow"
    return method


def certify_image(network: Network, image: Image, budget: AttackBudget, method: str = "deeppoly", timeout=None,
                  label: int | None = None, image_id=None, bounds: PixelBounds | None = None,
                  planes: BoundingPlanes | None = None, per_step_lp: bool = False) -> CertificationReport:
    """Certify ``image`` against every deformation allowed by ``budget``.

    Bounds (and, for flow methods with finite ``gamma``, bounding planes) are
    computed unless supplied.
    """
    start = time.perf_counter()
    method = resolve_method(method, budget)
    predicted = int(np.argmax(forward(network, image)))
    if label is None:
        label = predicted
    report = CertificationReport(image_id, budget.norm, budget.delta, budget.gamma, method, "unknown", label, predicted)
    if predicted != label:
        report.note = "clean image is misclassified"
        report.time_s = time.perf_counter() - start
        return report
    if bounds is None:
        bounds = bounds_map(image, budget)
    use_flow = method.endswith("+flow") and math.isfinite(budget.gamma)
    if use_flow and planes is None:
        planes = planes_map(image, budget.delta)
    relax = image_relaxation(image, budget, bounds, planes if use_flow else None)
    _run(report, network, relax, budget, method, timeout, image, per_step_lp)
    report.time_s = time.perf_counter() - start
    return report


def _run(report, network, relax, budget, method, timeout, image, per_step_lp):
    label = report.label
    use_flow = method.endswith("+flow") and math.isfinite(budget.gamma)
    if method == "interval":
        report.margins = interval_margins(network, relax, label)
        report.status = _status_from_margins(report.margins)
    elif method.startswith("deeppoly"):
        report.margins, report.status, _ = deeppoly_certify(network, relax, label, use_flow, per_step_lp)
    else:
        report.margins, report.status, witness = milp_certify(network, relax, label, timeout, image, budget, use_flow)
        if witness is not None:
            report.witness, report.adversarial_label = witness


def certify_relaxation(network: Network, relax: InputRelaxation, budget: AttackBudget, method: str = "deeppoly",
                       timeout=None, label: int | None = None, image_id=None, per_step_lp: bool = False) -> CertificationReport:
    """Certify an explicitly given input region (no image, so no witnesses).

    The clean input is ``relax.meta["center"]`` when present, else the box
    midpoint; ``budget`` supplies ``gamma`` and the report metadata.
    """
    start = time.perf_counter()
    method = resolve_method(method, budget)
    clean = relax.meta.get("center", 0.5 * (relax.lower + relax.upper))
    predicted = int(np.argmax(forward(network, clean)))
    if label is None:
        label = predicted
    report = CertificationReport(image_id, budget.norm, budget.delta, budget.gamma, method, "unknown", label, predicted)
    if predicted != label:
        report.note = "clean input is misclassified"
    else:
        if relax.flow is not None and relax.flow.gamma != budget.gamma:
            relax.flow = type(relax.flow)(relax.flow.num_nodes, relax.flow.edges, budget.gamma)
        _run(report, network, relax, budget, method, timeout, None, per_step_lp)
    report.time_s = time.perf_counter() - start
    return report
