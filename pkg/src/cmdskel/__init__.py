"""Self-supervised skeleton representation learning with cross-modal mutual distillation."""

__version__ = "0.1.0"
