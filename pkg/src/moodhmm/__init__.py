"""Weekly depression-score prediction from actigraphy via a time-varying two-state HMM."""

__version__ = "0.1.0"
