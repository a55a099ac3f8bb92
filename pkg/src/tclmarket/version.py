"""Version information for tclmarket."""

__version__ = "0.1.0"
