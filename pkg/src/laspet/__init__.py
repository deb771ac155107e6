"""Longitudinal PET/CT lesion quantification with a desk-scale longitudinally-aware network."""

__version__ = "0.1.0"
