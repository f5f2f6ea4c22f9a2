"""NIR-to-RGB colorization through grayscale-domain translation."""

__version__ = "0.1.0"
