"""Magnetometer-array-aided inertial navigation with an
observability-constrained error-state EKF, plus the synthetic test bench
used to evaluate filter consistency."""

__version__ = "0.1.0"
