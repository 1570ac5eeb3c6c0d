"""Lightweight CNN-Transformer segmentation network with dual attention gates."""

from dagseg.tensor import Tensor, checked, no_grad, set_checked, tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "checked", "no_grad", "set_checked", "tensor", "__version__"]
