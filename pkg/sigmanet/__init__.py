"""Unrolled parallel-MRI reconstruction with sensitivity and parallel-coil networks."""
from .core import (KSpaceVolume, RunConfig, SamplingMask, SensitivitySet, SigmaNetError, load_run_config,
                   seeded_rng)
from .operators import ForwardOperator, fft2c, ifft2c, rss
from .unrolled import UnrolledModel, final_image, reconstruct, recon_backward

__version__ = "0.1.0"
