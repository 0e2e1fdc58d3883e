"""Tour of the harmonic-polynomial field model and the array matrices.

The local magnetic field is written as basis(r) @ theta, where the basis
stacks gradients of solid harmonics.  Any coefficient vector therefore gives
a physically admissible (divergence-free, curl-free) field.  A magnetometer
array samples the field at m known positions; stacking the per-sensor basis
matrices gives the tall matrix A whose pseudoinverse refits coefficients
from readings.  Moving the array turns into a linear map on the
coefficients, which is what lets the filter use the field as an odometer.
"""

import numpy as np

from ocmains.geometry import rot_exp
from ocmains.magfield import (
    ArrayGeometry,
    PolynomialFieldModel,
    PoseChange,
    array_matrix,
    coeff_transition,
    dipole_field,
    h_theta,
    random_environment,
)

model = PolynomialFieldModel(order=1)
geometry = ArrayGeometry.default_grid()
print(f"model order {model.order} -> {model.kappa} coefficients; array has {geometry.m} sensors")

# The basis at the origin only sees the uniform part of the field.
print("\nbasis at the origin (columns: 3 uniform + 5 gradient parameters):")
print(h_theta(model, np.zeros(3)).astype(int))

# A and its pseudoinverse: full column rank means the array resolves theta.
A, A_pinv = array_matrix(model, geometry)
sv = np.linalg.svd(A, compute_uv=False)
print(f"\nstacked array matrix A: {A.shape}, condition {sv[0] / sv[-1]:.1f}")
print(f"refit identity |pinv(A) A - I| = {np.max(np.abs(A_pinv @ A - np.eye(model.kappa))):.2e}")

# Coefficients transform exactly under pure rotations of the board.
theta = np.array([20.0, 5.0, -44.0, 3.0, -1.0, 2.0, -2.5, 0.5])
half_turn = PoseChange(np.zeros(3), np.array([0.0, 0.0, np.pi]))
print("\nuniform field before a half turn:", theta[:3])
print("after:                            ", (coeff_transition(model, geometry, half_turn) @ theta)[:3])

# Translation shifts the uniform part along the gradient.
step = PoseChange(np.array([0.10, 0.0, 0.0]), np.zeros(3))
moved = coeff_transition(model, geometry, step) @ theta
print(f"\n10 cm step along x changes the uniform part by {moved[:3] - theta[:3]} uT")

# The simulation environment: dipoles placed around the working area,
# calibrated so magnitudes stay in a realistic indoor band.
env = random_environment(seed=1)
pts = np.column_stack([np.linspace(0, 2, 9), np.linspace(0, 2, 9), np.zeros(9)])
mags = np.linalg.norm(dipole_field(env, pts), axis=1)
print(f"\nfield magnitude along the square diagonal: {mags.round(1)} uT")
