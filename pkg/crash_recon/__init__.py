"""Scene-grounded reconstruction of pre-impact vehicle trajectories from crash reports."""

__version__ = "0.1.0"
