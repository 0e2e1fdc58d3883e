"""Render publication-style panels from exported metrics/diagnostics CSVs.

This package only reads the CSV files written by the navigation test bench;
it does not import the estimator."""

__version__ = "0.1.0"
