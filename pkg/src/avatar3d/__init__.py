"""Tri-plane 3D avatar domain adaptation toolkit.

A desk-scale system that adapts a 3D-aware tri-plane face generator to a
stylized 2D image domain: camera alignment, regularized adversarial
fine-tuning in S space, thin-plate-spline exaggeration, two-stage
single-image projection, evaluation metrics, and an interactive editing
service.
"""

__version__ = "0.1.0"
