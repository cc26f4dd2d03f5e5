"""Distribution-system state estimation with learned pseudo-measurements."""

__version__ = "0.1.0"
