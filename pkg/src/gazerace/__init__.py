"""Desk-scale workbench for gaze-attention-guided end-to-end drone racing."""

__version__ = "0.1.0"
