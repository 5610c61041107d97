"""Task arithmetic in the tangent space of small numpy networks."""

__version__ = "0.1.0"
