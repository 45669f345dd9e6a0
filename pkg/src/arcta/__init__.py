"""Latent SDE inference via amortized reparametrization of the evidence
lower bound, plus solver-based baselines for benchmarking."""

__version__ = "0.1.0"
