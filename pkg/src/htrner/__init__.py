"""Joint handwritten text recognition and named entity tagging with a CNN+BLSTM+CTC model."""

__version__ = "0.1.0"
