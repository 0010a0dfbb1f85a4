"""Desk-scale self-distillation lab: nested clustering heads, balanced
cluster targets, cyclic masking, and positional de-biasing, all on a
minimal reverse-mode tensor core."""

__version__ = "0.1.0"
