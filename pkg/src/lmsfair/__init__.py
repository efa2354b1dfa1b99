"""Fairness audit of grade prediction from LMS event logs."""

__version__ = "0.1.0"
