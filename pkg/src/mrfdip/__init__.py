"""Ground-truth-free MRF reconstruction with deep image priors and stochastic coil updates."""

__version__ = "0.1.0"
