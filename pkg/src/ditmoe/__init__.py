"""Fine-grained DiT-MoE toolkit: routing, upcycling, flow training, paired synthesis, post-training."""

__version__ = "0.1.0"
