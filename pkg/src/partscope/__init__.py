"""partscope: part-grounded forensic reasoning at desk scale."""

__version__ = "0.1.0"
