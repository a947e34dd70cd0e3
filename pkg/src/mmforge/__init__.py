"""Multi-modal manipulation detection and grounding on a synthetic benchmark."""

__version__ = "0.1.0"
