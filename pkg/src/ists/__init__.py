"""Instance-specific diffusion watermarking with two-sided detection."""

__version__ = "0.1.0"
