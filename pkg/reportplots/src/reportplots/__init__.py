"""reportplots: figures from quantsweep CSV exports."""

__version__ = "0.1.0"
