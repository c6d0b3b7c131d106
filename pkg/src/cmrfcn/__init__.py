"""Multi-scale fully convolutional segmentation of cardiac MR images, written on numpy."""

__version__ = "0.1.0"
