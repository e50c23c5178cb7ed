"""Latent skill planning: a learned latent world model, a skill-conditioned
low-level policy, and cross-entropy planning over skills at decision time."""

__version__ = "0.1.0"
