"""Task-loss-decomposed adversarial attacks and objectness-aware adversarial training
for a small single-stage grid detector."""

__version__ = "0.1.0"
