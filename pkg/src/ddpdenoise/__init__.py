"""Distributed-style training of U-Net / U-Net++ denoisers on a small numpy autograd engine."""

__version__ = "0.1.0"
