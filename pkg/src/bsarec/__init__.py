"""Sequential recommendation with a frequency-rescaled self-attention encoder."""

from .signal import PaddingMode, SpectralBackend

__all__ = ["PaddingMode", "SpectralBackend"]
__version__ = "0.1.0"
