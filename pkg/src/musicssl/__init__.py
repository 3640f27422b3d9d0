"""Desk-scale workbench for self-supervised music representation learning.

Pipeline stages: synthetic corpus generation, feature extraction, K-means
pseudo-labeling, masked pre-training (discrete pseudo-label prediction or
continuous EMA-teacher regression), frozen-encoder probing, and MIR-metric
evaluation with report rendering.
"""

__version__ = "0.1.0"
