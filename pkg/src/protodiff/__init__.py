"""Mask-conditioned diffusion synthesis with prototype-based explanations.

Core pieces: a small reverse-mode autodiff tensor library, a DDPM-style
forward/reverse process with a conditioned denoiser, three prototype heads
over a shared frozen feature extractor, an image/explanation metric suite,
a synthetic phantom dataset generator, and an eight-command experiment
harness exposed as both a CLI and an HTTP service.
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, GraphError,
                     MissingPrerequisiteError, NonFiniteError, ProtodiffError)

__all__ = [
    "__version__",
    "ProtodiffError", "NonFiniteError", "GraphError", "CheckpointError",
    "ConfigError", "MissingPrerequisiteError",
]
