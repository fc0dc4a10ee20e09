"""Adversarial robustness toolkit for challenge-response deepfake call screening."""

from .audio import AudioBuffer, read_wav, write_wav
from .corpus import TASKS

__all__ = ["AudioBuffer", "TASKS", "read_wav", "write_wav"]
__version__ = "0.1.0"
