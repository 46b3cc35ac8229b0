"""Toy multimodal decoder with learnable token sparsification and cost accounting."""

__version__ = "0.1.0"
