"""Shared-latent Gaussian modeling, missing-modality imputation, and
spectral anchor diagnostics for multimodal embedding stacks."""

__version__ = "0.1.0"

from latentalign.backends import active_backend, compiled_available, use_backend
from latentalign.spectral import (
    EmbeddingStack,
    ObservationMask,
    SvdResult,
    decompose,
    gram,
    leading_triplet,
    sigma1_grad,
    spectral_gap,
)

__all__ = [
    "EmbeddingStack",
    "ObservationMask",
    "SvdResult",
    "decompose",
    "gram",
    "leading_triplet",
    "sigma1_grad",
    "spectral_gap",
    "active_backend",
    "compiled_available",
    "use_backend",
    "__version__",
]
