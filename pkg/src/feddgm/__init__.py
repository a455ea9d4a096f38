"""Desk-scale federated learning simulator with server-side dataset
distillation through the latent space of a small pretrained decoder,
aggregation baselines, and a numerical sandbox for the asymptotic
equivalence argument."""

__version__ = "0.1.0"
