"""Instance recognition for patterned animals from ranked local-feature matches."""

__version__ = "0.1.0"
