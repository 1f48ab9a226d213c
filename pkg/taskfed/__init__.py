"""Federated multi-task LoRA fine-tuning with Laplacian-regularized aggregation."""

__version__ = "0.1.0"
