"""freqlens: a desk-scale adversarial robustness lab with a Fourier-domain
analysis toolkit (attacks, min-max training, spectra, CKA, quantization)."""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
