"""Squeeze-and-excitation channel attention inside a ResNet-34 speaker
embedding extractor, with the full train / score / analyze pipeline built
from first principles on a minimal autograd engine."""

__version__ = "0.1.0"
