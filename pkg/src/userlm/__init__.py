"""User-conditioned language modeling at desk scale.

A causal transformer whose self-attention is conditioned on a recurrently
updated per-user state computed over blocks of the user's prior messages,
plus the corpus tooling, training loops, fine-tuning recipes, and
evaluation metrics to exercise it end to end on synthetic data.
"""

__version__ = "0.1.0"
