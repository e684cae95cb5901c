"""Color-S4L: semi-supervised image classification with rotation, flip and
colorization proxy tasks on a shared backbone."""

__version__ = "0.1.0"
