"""meshflow: template-mesh surface reconstruction from 3D volumes via graph
neural ODEs, built on a small reverse-mode autodiff engine and verified on
synthetic desk-scale data."""

__version__ = "0.1.0"
