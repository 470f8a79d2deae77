"""Networks, interval and DeepPoly propagation, MILP certification."""

from .certify import (
    METHODS,
    CertificationReport,
    certify_image,
    certify_relaxation,
    decode_witness,
    deeppoly_certify,
    milp_certify,
    resolve_method,
)
from .deeppoly import DeepPoly, DeepPolyResult, ReluRelaxation, interval_margins, relu_relaxation
from .milp import MilpEncoding, encode_network, margin_program, solve_margin
from .network import Layer, Network, forward, forward_all, interval_propagate, load_network_json, predict, save_network_json

__all__ = [
    "METHODS",
    "CertificationReport",
    "DeepPoly",
    "DeepPolyResult",
    "Layer",
    "MilpEncoding",
    "Network",
    "ReluRelaxation",
    "certify_image",
    "certify_relaxation",
    "decode_witness",
    "deeppoly_certify",
    "encode_network",
    "forward",
    "forward_all",
    "interval_margins",
    "interval_propagate",
    "load_network_json",
    "margin_program",
    "milp_certify",
    "predict",
    "relu_relaxation",
    "resolve_method",
    "save_network_json",
    "solve_margin",
]
