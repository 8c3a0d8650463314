"""Radar silent-speech recognition with an attention-enhanced TCN."""

__version__ = "0.1.0"
