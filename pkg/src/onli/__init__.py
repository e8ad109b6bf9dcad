"""Desk-scale operator-learning pipeline for shear-wave elastography:
synthetic wave-field datasets, a Fourier-kernel neural operator with
optional segmentation conditioning, and classical direct inversion.
"""

__version__ = "0.1.0"
