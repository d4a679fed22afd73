"""Model-based parallel augmented random search for emergency load shedding."""

__version__ = "0.1.0"
