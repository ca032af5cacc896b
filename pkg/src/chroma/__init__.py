"""Per-channel adversarial colorization in CIELAB space."""

__version__ = "0.1.0"
