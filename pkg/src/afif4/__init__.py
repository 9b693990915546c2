"""Gender classification by fusing CNN scores of facial patches and foggy faces."""

__version__ = "0.1.0"
