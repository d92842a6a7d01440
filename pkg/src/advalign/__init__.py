"""Desk-scale adversarial robustness toolkit.

Measures minimal-perturbation tolerance (binary-searched PGD) and the
alignment of successful attacks with feature-importance maps, and trains
small classifiers with plain cross-entropy, the harmonized multi-scale
saliency loss, or adversarial training, over synthetic stimuli.
"""

from .autodiff import Graph, Tensor, evaluate, finite_difference_check, gradients

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "Tensor",
    "evaluate",
    "gradients",
    "finite_difference_check",
    "__version__",
]
