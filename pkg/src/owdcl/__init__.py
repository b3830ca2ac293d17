"""Open-world test-time training with contrastive self-training."""

__version__ = "0.1.0"
