"""Cross-architecture self-supervised pretraining on a NumPy autodiff core."""

__version__ = "0.1.0"
