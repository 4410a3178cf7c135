"""Relevance heatmaps for a volumetric 3D CNN classifier, built on numpy."""

__version__ = "0.1.0"
