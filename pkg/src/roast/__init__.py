"""Adversarial fine-tuning with importance-sampled gradient masking, plus a
multi-perspective robustness evaluation harness."""

__version__ = "0.1.0"
