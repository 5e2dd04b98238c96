"""Edge-offloaded robot localization and control."""

__version__ = "1.0.0"
