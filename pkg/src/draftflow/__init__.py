"""Draft-conditioned latent refinement for parallel text generation.

Pipeline stages: a frozen latent autoencoder over short stories, a denoising
start model seeded by corrupted drafts, and a metric-aware flow refiner with
optional transport alignment and bounded residual correction, plus a suite of
decoder-recoverability diagnostics.
"""

__version__ = "0.1.0"

from .tensor import Tensor, gaussian_sample, no_grad  # noqa: F401
