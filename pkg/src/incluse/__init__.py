"""Grid-based robust-safety certification for differential inclusions."""

__version__ = "0.1.0"
