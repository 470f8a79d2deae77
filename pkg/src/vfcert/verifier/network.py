"""Feedforward ReLU networks: layers, JSON schema, forward and interval passes.

Values flow through *nodes*: node 0 is the flattened input, node ``t`` is the
output of layer ``t - 1``. Image inputs are flattened in ``(row, col,
channel)`` order, which is also the layout convolutions expect.

JSON schema::

    {"input_shape": [6, 6, 1],            # optional for dense-first nets
     "layers": [
        {"kind": "conv2d", "kernels": [[[[...]]]], "bias": [...],
         "stride": 1, "padding": 0},       # kernels: out x in x kh x kw
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "dense", "weights": [[...]], "bias": [...]},
        {"kind": "residual_add", "from": 1}  # adds the output of layer 1
     ]}

``"from": -1`` refers to the network input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import ContractError, FormatError

AFFINE_KINDS = ("dense", "conv2d", "flatten")


@dataclass
class Layer:
    """One layer. Affine layers carry their lowered map ``matrix`` / ``bias``."""

    kind: str
    params: dict = field(default_factory=dict)
    matrix: object = None  # ndarray or scipy sparse matrix, shape (out, in)
    bias: np.ndarray | None = None
    source: int | None = None  # residual_add: node index of the skip input

    @property
    def is_affine(self) -> bool:
        return self.kind in AFFINE_KINDS


def _pair(v, what, idx):
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    try:
        a, b = v
        return int(a), int(b)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"layer {idx}: {what} must be an int or a pair") from exc


def lower_conv2d(kernels, bias, in_shape, stride=(1, 1), padding=(0, 0)):
    """Sparse ``(out, in)`` matrix and bias of a 2-D convolution on an HWC tensor."""
    oc, ic, kh, kw = kernels.shape
    h, w, c = in_shape
    if c != ic:
        raise ContractError(f"convolution expects {ic} input channels, got {c}")
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ContractError(f"convolution output would be empty for input {in_shape}")
    rows, cols, vals = [], [], []
    for y in range(oh):
        for x in range(ow):
            for dy in range(kh):
                r = y * sh - ph + dy
                if not 0 <= r < h:
                    continue
                for dx in range(kw):
                    s = x * sw - pw + dx
                    if not 0 <= s < w:
                        continue
                    for o in range(oc):
                        for k in range(ic):
                            rows.append((y * ow + x) * oc + o)
                            cols.append((r * w + s) * ic + k)
                            vals.append(kernels[o, k, dy, dx])
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(oh * ow * oc, h * w * c))
    return mat, np.tile(bias, oh * ow), (oh, ow, oc)


class Network:
    """A validated, shape-checked chain of layers (with optional skips)."""

    def __init__(self, layers, input_shape=None):
        if not layers:
            raise FormatError("network has no layers")
        self.layers: list[Layer] = []
        specs = list(layers)
        if input_shape is None:
            first = specs[0]
            if first.get("kind") != "dense":
                raise FormatError("input_shape is required unless the first layer is dense")
            try:
                input_shape = (np.asarray(first["weights"], dtype=np.float64).shape[1],)
            except (KeyError, IndexError, ValueError) as exc:
                raise FormatError(f"layer 0: cannot infer input size: {exc}") from exc
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = [self.input_shape]
        for idx, spec in enumerate(specs):
            self.layers.append(self._build(idx, spec))

    @property
    def sizes(self) -> list[int]:
        return [int(np.prod(s)) for s in self.shapes]

    @property
    def input_size(self) -> int:
        return self.sizes[0]

    @property
    def output_size(self) -> int:
        return self.sizes[-1]

    def _build(self, idx, spec) -> Layer:
        if not isinstance(spec, dict) or "kind" not in spec:
            raise FormatError(f"layer {idx}: expected an object with a 'kind'")
        kind = spec["kind"]
        in_shape = self.shapes[-1]
        in_size = int(np.prod(in_shape))
        try:
            if kind == "dense":
                W = np.asarray(spec["weights"], dtype=np.float64)
                b = np.asarray(spec.get("bias", np.zeros(W.shape[0])), dtype=np.float64)
                if W.ndim != 2 or W.shape[1] != in_size or b.shape != (W.shape[0],):
                    raise FormatError(f"layer {idx}: dense weights {W.shape} / bias {b.shape} do not fit input size {in_size}")
                layer = Layer(kind, {"weights": W, "bias": b}, W, b)
                self.shapes.append((W.shape[0],))
            elif kind == "conv2d":
                K = np.asarray(spec["kernels"], dtype=np.float64)
                if K.ndim != 4:
                    raise FormatError(f"layer {idx}: kernels must be out x in x kh x kw")
                b = np.asarray(spec.get("bias", np.zeros(K.shape[0])), dtype=np.float64)
                if b.shape != (K.shape[0],):
                    raise FormatError(f"layer {idx}: conv bias must have {K.shape[0]} entries")
                if len(in_shape) != 3:
                    raise FormatError(f"layer {idx}: conv2d needs an HWC input, got shape {in_shape}")
                stride = _pair(spec.get("stride", 1), "stride", idx)
                padding = _pair(spec.get("padding", 0), "padding", idx)
                mat, bias, out_shape = lower_conv2d(K, b, in_shape, stride, padding)
                params = {"kernels": K, "bias": b, "stride": stride, "padding": padding}
                layer = Layer(kind, params, mat, bias)
                self.shapes.append(out_shape)
            elif kind == "flatten":
                layer = Layer(kind, {}, sp.identity(in_size, format="csr"), np.zeros(in_size))
                self.shapes.append((in_size,))
            elif kind == "relu":
                layer = Layer(kind)
                self.shapes.append(in_shape)
            elif kind == "residual_add":
                src = int(spec["from"]) + 1
                if not 0 <= src < len(self.shapes) - 1:
                    raise FormatError(f"layer {idx}: residual source {src - 1} must be an earlier layer or -1")
                if int(np.prod(self.shapes[src])) != in_size:
                    raise FormatError(f"layer {idx}: residual source shape {self.shapes[src]} does not match {in_shape}")
                layer = Layer(kind, {"from": src - 1}, source=src)
                self.shapes.append(in_shape)
            else:
                raise FormatError(f"layer {idx}: unknown kind {kind!r}")
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"layer {idx}: {exc}") from exc
        except ContractError as exc:
            raise FormatError(f"layer {idx}: {exc}") from exc
        return layer

    # serialization -------------------------------------------------------

    def to_json(self) -> dict:
        out = []
        for layer in self.layers:
            if layer.kind == "dense":
                out.append({"kind": "dense", "weights": layer.params["weights"].tolist(), "bias": layer.params["bias"].tolist()})
            elif layer.kind == "conv2d":
                p = layer.params
                out.append({"kind": "conv2d", "kernels": p["kernels"].tolist(), "bias": p["bias"].tolist(),
                            "stride": list(p["stride"]), "padding": list(p["padding"])})
            elif layer.kind == "residual_add":
                out.append({"kind": "residual_add", "from": layer.params["from"]})
            else:
                out.append({"kind": layer.kind})
        return {"input_shape": list(self.input_shape), "layers": out}

    @classmethod
    def from_json(cls, obj) -> "Network":
        if not isinstance(obj, dict) or "layers" not in obj:
            raise FormatError("network JSON must be an object with a 'layers' list")
        return cls(obj["layers"], obj.get("input_shape"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)


def load_network_json(path) -> Network:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return Network.from_json(obj)


def save_network_json(network: Network, path):
    network.save(path)


# evaluation ------------------------------------------------------------------

def _as_input(network: Network, x) -> np.ndarray:
    if hasattr(x, "flat") and callable(x.flat):
        x = x.flat()
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != network.input_size:
        raise ContractError(f"network expects {network.input_size} inputs, got {x.size}")
    return x


def _apply(matrix, x):
    return np.asarray(matrix @ x).reshape(-1)


def forward_all(network: Network, x) -> list[np.ndarray]:
    """Values of every node for one input."""
    vals = [_as_input(network, x)]
    for layer in network.layers:
        prev = vals[-1]
        if layer.is_affine:
            vals.append(_apply(layer.matrix, prev) + layer.bias)
        elif layer.kind == "relu":
            vals.append(np.maximum(prev, 0.0))
        else:
            vals.append(prev + vals[layer.source])
    return vals


def forward(network: Network, x) -> np.ndarray:
    """Logits of the network on input ``x`` (an array or an Image)."""
    return forward_all(network, x)[-1]


def predict(network: Network, x) -> int:
    return int(np.argmax(forward(network, x)))


def interval_propagate(network: Network, lower, upper=None, all_nodes: bool = False):
    """Interval arithmetic through the network.

    ``lower`` may be a PixelBounds (then ``upper`` is omitted). Returns the
    output ``(lower, upper)`` or, with ``all_nodes``, lists for every node.
    """
    if upper is None:
        lower, upper = lower.flat()
    lo = [_as_input(network, lower)]
    hi = [_as_input(network, upper)]
    for layer in network.layers:
        a, b = lo[-1], hi[-1]
        if layer.is_affine:
            pos = layer.matrix.maximum(0) if sp.issparse(layer.matrix) else np.maximum(layer.matrix, 0.0)
            neg = layer.matrix - pos
            lo.append(_apply(pos, a) + _apply(neg, b) + layer.bias)
            hi.append(_apply(pos, b) + _apply(neg, a) + layer.bias)
        elif layer.kind == "relu":
            lo.append(np.maximum(a, 0.0))
            hi.append(np.maximum(b, 0.0))
        else:
            lo.append(a + lo[layer.source])
            hi.append(b + hi[layer.source])
    if all_nodes:
        return lo, hi
    return lo[-1], hi[-1]
