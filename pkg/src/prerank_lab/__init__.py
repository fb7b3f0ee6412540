"""Desk-scale pre-ranking laboratory.

A synthetic marketplace with a full logging cascade (matching, pre-ranking,
ranking, exposure, user events), entire-space training samples with
all-scenario labels, a hand-differentiated two-tower model trained with
multi-positive list-wise losses and selective teacher distillation, and
set-quality evaluation (all-scenario / in-scenario purchase hitrate plus
per-request purchase AUC).
"""

__version__ = "0.1.0"
