"""Graph classification and interpretation toolkit for attributed
multigraphs: edge-conditioned GNN classifier, non-negative CP community
discovery, and saliency-based biomarker scoring."""

__version__ = "0.1.0"
