"""Exact MILP encoding of a ReLU network over an input relaxation.

Unstable ReLUs get a binary phase variable and the big-M constraints::

    y >= x,  y <= x - l (1 - z),  y <= u z,  0 <= y <= u

with ``l, u`` the pre-activation bounds. Stable ReLUs are linear. Affine
layers are folded into expressions over the program variables instead of
getting variables of their own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..errors import SolverError
from ..linsolve import MilpProgram, SolveOutcome, milp_solve
from ..relaxation import LP_PIXEL_LIMIT, InputRelaxation, select_pixels
from .network import Network


@dataclass
class MilpEncoding:
    """The program without objective plus the maps needed to decode it."""

    program: MilpProgram
    input_vars: np.ndarray
    disp_vars: dict  # pixel -> (v, w)
    out_matrix: np.ndarray  # output expressions over program variables
    out_const: np.ndarray
    unstable: int


def _row(M, r):
    return {int(k): float(v) for k, v in enumerate(M[r]) if v != 0.0}


def encode_network(network: Network, relax: InputRelaxation, node_lower, node_upper, use_flow: bool = True,
                   max_pixels: int | None = LP_PIXEL_LIMIT) -> MilpEncoding:
    """Build the MILP feasible set.

    ``node_lower`` / ``node_upper`` are per-node bounds (index by node) used
    for big-M constants. When ``use_flow`` is set and ``gamma`` is finite,
    planes and flow edges of ``relax`` are added for the ``max_pixels``
    pixels with the widest intervals (all pixels with ``None``); leaving
    constraints out only relaxes the program, so margins stay sound.
    """
    prog = MilpProgram("min")
    n0 = relax.size
    input_vars = np.array([prog.add_var(relax.lower[k], relax.upper[k], f"x{k}") for k in range(n0)])
    disp_vars = {}
    if use_flow and relax.has_planes and math.isfinite(relax.gamma):
        keep = set(select_pixels(relax, relax.upper - relax.lower, max_pixels))
        for k in range(n0):
            p = int(relax.pixel_of[k])
            if p not in keep:
                continue
            if p not in disp_vars:
                box = relax.disp_box[p]
                disp_vars[p] = (prog.add_var(box[0, 0], box[0, 1], f"v{p}"), prog.add_var(box[1, 0], box[1, 1], f"w{p}"))
            v, w = disp_vars[p]
            x = int(input_vars[k])
            lo, up = relax.planes_lower[k], relax.planes_upper[k]
            prog.add_constraint({x: 1.0, v: -lo[1], w: -lo[2]}, ">=", lo[0])
            prog.add_constraint({x: 1.0, v: -up[1], w: -up[2]}, "<=", up[0])
        for p, q in relax.flow.restricted(disp_vars):
            for comp in (0, 1):
                a, b = disp_vars[p][comp], disp_vars[q][comp]
                prog.add_constraint({a: 1.0, b: -1.0}, "<=", relax.gamma)
                prog.add_constraint({a: 1.0, b: -1.0}, ">=", -relax.gamma)

    # count the variables up front so expressions have a fixed width
    unstable_total = 0
    for t, layer in enumerate(network.layers, start=1):
        if layer.kind == "relu":
            l, u = node_lower[t - 1], node_upper[t - 1]
            unstable_total += int(np.sum((l < 0) & (u > 0)))
    width = prog.num_vars + 2 * unstable_total

    M0 = np.zeros((n0, width))
    M0[np.arange(n0), input_vars] = 1.0
    mats, consts = [M0], [np.zeros(n0)]
    for t, layer in enumerate(network.layers, start=1):
        M, c = mats[-1], consts[-1]
        if layer.is_affine:
            W = layer.matrix
            mats.append(np.asarray(W @ M) if sp.issparse(W) else W @ M)
            consts.append(np.asarray(W @ c).reshape(-1) + layer.bias)
        elif layer.kind == "relu":
            l, u = node_lower[t - 1], node_upper[t - 1]
            Mn = np.zeros_like(M)
            cn = np.zeros_like(c)
            for j in range(M.shape[0]):
                if u[j] <= 0:
                    continue
                if l[j] >= 0:
                    Mn[j], cn[j] = M[j], c[j]
                    continue
                y = prog.add_var(0.0, u[j], f"y{t}_{j}")
                z = prog.add_binary(f"z{t}_{j}")
                ex = _row(M, j)
                # y >= x
                row = {k: -v for k, v in ex.items()}
                row[y] = row.get(y, 0.0) + 1.0
                prog.add_constraint(row, ">=", c[j])
                # y <= x - l (1 - z)
                row = {k: -v for k, v in ex.items()}
                row[y] = row.get(y, 0.0) + 1.0
                row[z] = -l[j]
                prog.add_constraint(row, "<=", c[j] - l[j])
                # y <= u z
                prog.add_constraint({y: 1.0, z: -u[j]}, "<=", 0.0)
                Mn[j, y] = 1.0
            mats.append(Mn)
            consts.append(cn)
        else:
            mats.append(M + mats[layer.source])
            consts.append(c + consts[layer.source])
    assert prog.num_vars == width
    return MilpEncoding(prog, input_vars, disp_vars, mats[-1], consts[-1], unstable_total)


def margin_program(enc: MilpEncoding, label: int, target: int, timeout=None) -> MilpProgram:
    prog = enc.program.copy()
    prog.timeout = timeout
    diff = enc.out_matrix[label] - enc.out_matrix[target]
    prog.set_objective(_row(diff[None, :], 0), constant=float(enc.out_const[label] - enc.out_const[target]), sense="min")
    return prog


def solve_margin(enc: MilpEncoding, label: int, target: int, timeout=None) -> SolveOutcome:
    out = milp_solve(margin_program(enc, label, target, timeout), timeout)
    if out.status == "unbounded":
        raise SolverError("margin MILP is unbounded; input variables must be boxed")
    return out
