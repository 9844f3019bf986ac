"""A numpy sequence-to-sequence engine: transformer, data-parallel trainer, search."""

__version__ = "0.1.0"
