"""Multi-camera dense bundle adjustment on synthetic rigs."""

__version__ = "0.1.0"
