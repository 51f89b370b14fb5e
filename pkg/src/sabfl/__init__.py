"""Simulator for softmax-aggregated, blockchain-coordinated federated learning."""

__version__ = "0.1.0"
