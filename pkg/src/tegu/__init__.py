"""Temporal-guidance decoding lab: a byte-level toy backbone, a conditional
multi-token projector trained on it, and contrastive decoding against the
model's own stale predictions."""

__version__ = "0.1.0"
