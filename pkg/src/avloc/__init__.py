"""Two-stage audio-visual sound source localization on a numpy autodiff core."""

__version__ = "0.1.0"
