"""Two-stage dynamic task allocation: attention pre-assignment followed by pointer-style selection."""

__version__ = "0.1.0"
