"""termeval: evaluation harness for termination-prediction oracles on
SV-COMP-style C termination tasks."""

__version__ = "0.1.0"
