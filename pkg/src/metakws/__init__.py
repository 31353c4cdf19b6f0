"""Few-shot keyword classification with meta-learning over pooled speech features."""

__version__ = "0.1.0"
