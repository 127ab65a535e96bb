"""Desk-scale knowledge-distillation quantization-aware training laboratory."""
from qatlab.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
