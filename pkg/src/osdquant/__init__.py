"""Low-bit fake quantization toolkit for one-step diffusion restoration networks."""

__version__ = "0.1.0"
