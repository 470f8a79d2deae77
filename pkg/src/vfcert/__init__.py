"""Certified robustness of neural networks against vector-field deformations.

Modules
-------
imaging     images, vector fields, bilinear interpolation, file formats
geometry    attack budgets and tight per-pixel interval bounds
relaxation  bounding planes and the flow-constraint tightening LP
linsolve    dense simplex LP solver and branch-and-bound MILP solver
verifier    networks, interval / DeepPoly / MILP certification
oracle      admissible field sampling, random attack, coverage
cli         command-line front end
"""

from .geometry import AttackBudget, PixelBounds, bounds_map
from .imaging import Image, VectorField, deform, load_dataset

__version__ = "0.1.0"

__all__ = ["AttackBudget", "Image", "PixelBounds", "VectorField", "bounds_map", "deform", "load_dataset"]
