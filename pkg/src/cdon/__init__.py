"""Coupled pedestrian-detection network at desk scale.

A self-contained numpy implementation of gated multi-layer feature
extraction, deformable position-sensitive RoI pooling, the detection loss
and training recipe, and the FPPI / log-average miss-rate evaluation
protocol, all on a small reverse-mode autodiff core.
"""

from .autodiff import Tensor4, Graph, backward, grad_check

__all__ = ["Tensor4", "Graph", "backward", "grad_check"]
__version__ = "0.1.0"
