"""Natural adversarial network flows: feature taxonomy, detector, tabular diffusion, masked attacks."""

__version__ = "0.1.0"
