"""Hardware-constrained architecture search for session-level traffic classification."""

__version__ = "0.1.0"
