"""Desk-scale simulator of federated adaptation for a pretrained two-tower
recommender: low-rank personalized adapters, adaptive gate fusion, selective
aggregation, Laplace-noised uploads and knowledge distillation."""

__version__ = "0.1.0"
