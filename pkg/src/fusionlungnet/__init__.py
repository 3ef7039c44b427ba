"""Lung segmentation for CT slices: preprocessing, a fusion network, hybrid losses,
pixel metrics and the training/evaluation loop."""
__version__ = "0.1.0"
