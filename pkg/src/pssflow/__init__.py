"""Multi-window event-camera optical flow with a perturbed state-space encoder."""

__version__ = "0.1.0"
