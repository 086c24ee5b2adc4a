"""Emotion-selectable text-based speech editing on a compact cepstral feature set."""

__version__ = "0.1.0"
