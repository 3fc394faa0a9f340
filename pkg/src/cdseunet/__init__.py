"""Edge-guided dual-path UNet for lesion segmentation, built on a small numpy autograd engine."""

__version__ = "0.1.0"
