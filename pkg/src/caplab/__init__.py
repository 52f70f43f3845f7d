"""Desk-scale captioning-pretraining laboratory.

Trains caption-based (autoregressive and parallel-prediction) and
contrastive image-text models on a synthetic compositional dataset, and
evaluates them with scoring-based zero-shot classification, perturbation
benchmarks, frozen-representation probes, and frozen-component transfer.
"""

__version__ = "0.1.0"
