"""Distributed training of deep networks: model-parallel backpropagation,
parameter-server data parallelism, their communication cost, and the
regret of delayed updates."""

__version__ = "0.1.0"
