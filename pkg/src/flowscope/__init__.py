"""Diagnose distributed training jobs from switch-mirrored network flow records."""

__version__ = "0.1.0"
