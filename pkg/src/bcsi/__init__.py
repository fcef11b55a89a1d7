"""Bias-conditioned self-influence: find bias-conflicting samples and fine-tune biased models on them."""
__version__ = "0.1.0"
