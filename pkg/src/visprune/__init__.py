"""Three-stage visual-token pruning over seeded toy multi-encoder models."""

__version__ = "0.1.0"
