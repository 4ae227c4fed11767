"""Disentangled autoencoders with quantized latents, a kernel multiinformation penalty and a normalized Hessian penalty."""

__version__ = "0.1.0"
