"""Attention-based audio-visual fusion for speech recognition, in numpy."""
__version__ = "0.1.0"
