"""Harmonic-polynomial magnetic field model and magnetometer-array matrices.

The local field is modelled as the gradient of a harmonic potential, so any
coefficient vector ``theta`` produces a divergence-free and curl-free field.
The basis stacks gradients of real solid harmonics of degree 1..order+1:

* degree 1 (3 columns): a uniform field ``b``;
* degree 2 (5 columns): ``field(r) = M r`` with ``M`` symmetric traceless,
  parameterised as ``(M11, M12, M13, M22, M23)``, ``M33 = -M11 - M22``;
* degree 3 (7 columns, order 2 only): quadratic fields.

The coefficient count is ``kappa = (order + 1) * (order + 3)``.  Field values
are in microtesla; positions in metres, body frame.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .geometry import right_jacobian, rot_exp

__all__ = [
    "PolynomialFieldModel",
    "ArrayGeometry",
    "PoseChange",
    "DipoleEnvironment",
    "RankDeficiencyError",
    "ExclusionRadiusError",
    "h_theta",
    "h_theta_stack",
    "field_spatial_jacobian",
    "array_matrix",
    "b_matrix",
    "coeff_transition",
    "field_jacobian",
    "rotation_field_jacobian",
    "dipole_field",
    "random_environment",
]

MU0_OVER_4PI_UT = 0.1  # microtesla * m^3 / (A * m^2)


class RankDeficiencyError(ValueError):
    """Stacked array matrix does not have full column rank."""


class ExclusionRadiusError(ValueError):
    """Field evaluation requested too close to a dipole source."""


@dataclass(frozen=True)
class PolynomialFieldModel:
    """Field model of a given polynomial order with its basis convention."""

    order: int = 1
    basis: str = "grad-solid-harmonics"

    def __post_init__(self):
        if not 0 <= self.order <= 2:
            raise ValueError("supported field model orders are 0, 1 and 2")
        if self.basis != "grad-solid-harmonics":
            raise ValueError(f"unknown basis convention: {self.basis!r}")

    @property
    def kappa(self) -> int:
        return (self.order + 1) * (self.order + 3)


@dataclass
class ArrayGeometry:
    """Magnetometer positions in the body frame, metres, shape (m, 3)."""

    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.shape[1] != 3 or not np.all(np.isfinite(self.positions)):
            raise ValueError("sensor positions must be a finite (m, 3) array")

    @property
    def m(self) -> int:
        return self.positions.shape[0]

    def cache_key(self) -> bytes:
        return self.positions.tobytes()

    @classmethod
    def default_grid(cls, rows: int = 5, cols: int = 6, pitch: float = 0.03) -> "ArrayGeometry":
        """Planar grid centred on the body origin in the z=0 plane."""
        xs = (np.arange(cols) - (cols - 1) / 2.0) * pitch
        ys = (np.arange(rows) - (rows - 1) / 2.0) * pitch
        gx, gy = np.meshgrid(xs, ys)
        pts = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(rows * cols)])
        return cls(pts)

    @classmethod
    def from_file(cls, path) -> "ArrayGeometry":
        """Load sensor positions from a text file with one "x y z" line per sensor."""
        rows = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                parts = body.split()
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected three values, got {len(parts)}")
                try:
                    rows.append([float(p) for p in parts])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
        if not rows:
            raise ValueError(f"{path}: no sensor positions found")
        return cls(np.array(rows))


@dataclass
class PoseChange:
    """Body-frame translation (m) and axis-angle rotation (rad) over one step."""

    dp: np.ndarray
    dphi: np.ndarray

    def __post_init__(self):
        self.dp = np.asarray(self.dp, dtype=float).reshape(3)
        self.dphi = np.asarray(self.dphi, dtype=float).reshape(3)
        if not (np.all(np.isfinite(self.dp)) and np.all(np.isfinite(self.dphi))):
            raise ValueError("pose change must be finite")

    @classmethod
    def identity(cls) -> "PoseChange":
        return cls(np.zeros(3), np.zeros(3))


def _deg2_block(pts: np.ndarray) -> np.ndarray:
    """(m, 3, 5) block: field = M(theta) r for symmetric traceless M."""
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    zero = np.zeros_like(x)
    rows = np.empty((pts.shape[0], 3, 5))
    rows[:, 0] = np.stack([x, y, z, zero, zero], axis=-1)
    rows[:, 1] = np.stack([zero, x, zero, y, z], axis=-1)
    rows[:, 2] = np.stack([-z, zero, x, -z, y], axis=-1)
    return rows


def _deg3_block(pts: np.ndarray) -> np.ndarray:
    """(m, 3, 7) block: gradients of the seven degree-3 solid harmonics."""
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    zero = np.zeros_like(x)
    cols = [
        np.stack([y * z, x * z, x * y], axis=-1),                                  # xyz
        np.stack([2 * x * z, -2 * y * z, x * x - y * y], axis=-1),                 # z(x^2-y^2)
        np.stack([3 * (x * x - y * y), -6 * x * y, zero], axis=-1),                # x(x^2-3y^2)
        np.stack([6 * x * y, 3 * (x * x - y * y), zero], axis=-1),                 # y(3x^2-y^2)
        np.stack([-6 * x * z, -6 * y * z, 6 * z * z - 3 * (x * x + y * y)], axis=-1),  # z(2z^2-3x^2-3y^2)
        np.stack([4 * z * z - 3 * x * x - y * y, -2 * x * y, 8 * x * z], axis=-1),     # x(4z^2-x^2-y^2)
        np.stack([-2 * x * y, 4 * z * z - x * x - 3 * y * y, 8 * y * z], axis=-1),     # y(4z^2-x^2-y^2)
    ]
    return np.stack(cols, axis=-1)


def h_theta_stack(model: PolynomialFieldModel, points: np.ndarray) -> np.ndarray:
    """Basis matrices at several points, stacked to shape (3m, kappa).

    ``h_theta_stack(model, pts) @ theta`` is the field at each point, in the
    same frame the points are expressed in.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m = pts.shape[0]
    blocks = [np.broadcast_to(np.eye(3), (m, 3, 3))]
    if model.order >= 1:
        blocks.append(_deg2_block(pts))
    if model.order >= 2:
        blocks.append(_deg3_block(pts))
    return np.concatenate(blocks, axis=2).reshape(3 * m, model.kappa)


def h_theta(model: PolynomialFieldModel, r: np.ndarray) -> np.ndarray:
    """Basis matrix at a single point, shape (3, kappa)."""
    return h_theta_stack(model, np.asarray(r, dtype=float).reshape(1, 3))


def field_spatial_jacobian(
    model: PolynomialFieldModel, points: np.ndarray, theta: np.ndarray
) -> np.ndarray:
    """Spatial Jacobian d(field)/dr at each point, shape (m, 3, 3)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m = pts.shape[0]
    theta = np.asarray(theta, dtype=float).reshape(model.kappa)
    out = np.zeros((m, 3, 3))
    if model.order >= 1:
        m11, m12, m13, m22, m23 = theta[3:8]
        out += np.array(
            [[m11, m12, m13], [m12, m22, m23], [m13, m23, -m11 - m22]]
        )
    if model.order >= 2:
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        zero = np.zeros_like(x)
        hessians = [
            [[zero, z, y], [z, zero, x], [y, x, zero]],
            [[2 * z, zero, 2 * x], [zero, -2 * z, -2 * y], [2 * x, -2 * y, zero]],
            [[6 * x, -6 * y, zero], [-6 * y, -6 * x, zero], [zero, zero, zero]],
            [[6 * y, 6 * x, zero], [6 * x, -6 * y, zero], [zero, zero, zero]],
            [[-6 * z, zero, -6 * x], [zero, -6 * z, -6 * y], [-6 * x, -6 * y, 12 * z]],
            [[-6 * x, -2 * y, 8 * z], [-2 * y, -2 * x, zero], [8 * z, zero, 8 * x]],
            [[-2 * y, -2 * x, zero], [-2 * x, -6 * y, 8 * z], [zero, 8 * z, 8 * y]],
        ]
        for c, hess in enumerate(hessians):
            out += theta[8 + c] * np.array(hess).transpose(2, 0, 1)
    return out


_ARRAY_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
_ARRAY_CACHE_LOCK = threading.Lock()


def array_matrix(
    model: PolynomialFieldModel, geometry: ArrayGeometry
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked sensor basis matrix A (3m, kappa) and its pseudoinverse.

    Raises :class:`RankDeficiencyError` when the smallest singular value of A
    is below 1e-10 times the largest, i.e. the array cannot resolve the
    coefficients.
    """
    key = (model.order, model.basis, geometry.cache_key())
    cached = _ARRAY_CACHE.get(key)
    if cached is not None:
        return cached
    A = h_theta_stack(model, geometry.positions)
    sv = np.linalg.svd(A, compute_uv=False)
    if A.shape[0] < A.shape[1] or sv[-1] < 1e-10 * sv[0]:
        raise RankDeficiencyError(
            f"array matrix is rank deficient ({geometry.m} sensors, "
            f"{model.kappa} coefficients)"
        )
    A_pinv = np.linalg.pinv(A)
    with _ARRAY_CACHE_LOCK:
        _ARRAY_CACHE.setdefault(key, (A, A_pinv))
    return _ARRAY_CACHE[key]


def _moved_sensor_points(geometry: ArrayGeometry, pose: PoseChange):
    dR = rot_exp(pose.dphi)
    pts = pose.dp + geometry.positions @ dR.T
    return dR, pts


def _skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.atleast_2d(v)
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def field_transport(
    model: PolynomialFieldModel,
    geometry: ArrayGeometry,
    pose: PoseChange,
    theta: np.ndarray,
):
    """Predicted sensor basis after a pose change plus the derivatives of the
    predicted readings, sharing the per-sensor evaluations.

    Returns ``(B, J, C)`` where row block i of B is
    ``dR.T @ h_theta(dp + dR r_i)`` (the field sensor i will see after the
    move, in the new body frame), J is d(B theta)/d(dp) and C is
    d(B theta)/d(dphi):

        d/dphi [dR.T f(y_i)] = ([dR.T f]_x - dR.T f'(y_i) dR [r_i]_x) J_r(dphi)
    """
    theta = np.asarray(theta, dtype=float).reshape(model.kappa)
    m = geometry.m
    dR, pts = _moved_sensor_points(geometry, pose)
    Hs = h_theta_stack(model, pts).reshape(m, 3, model.kappa)
    B = np.einsum("ba,mbk->mak", dR, Hs).reshape(3 * m, model.kappa)
    grads = field_spatial_jacobian(model, pts, theta)
    J = np.einsum("ba,mbc->mac", dR, grads).reshape(3 * m, 3)
    fields_body = (B @ theta).reshape(m, 3)
    rotated_grads = np.einsum("ba,mbc,cd->mad", dR, grads, dR)
    C = (
        (_skew_batch(fields_body) - rotated_grads @ _skew_batch(geometry.positions))
        @ right_jacobian(pose.dphi)
    ).reshape(3 * m, 3)
    return B, J, C


def b_matrix(
    model: PolynomialFieldModel, geometry: ArrayGeometry, pose: PoseChange
) -> np.ndarray:
    """Predicted sensor basis after a pose change, shape (3m, kappa).

    Row block i is ``dR.T @ h_theta(dp + dR r_i)``: the field each sensor will
    see after the platform moves, expressed in the new body frame.
    """
    dR, pts = _moved_sensor_points(geometry, pose)
    H = h_theta_stack(model, pts).reshape(geometry.m, 3, model.kappa)
    return np.einsum("ba,mbk->mak", dR, H).reshape(3 * geometry.m, model.kappa)


def coeff_transition(
    model: PolynomialFieldModel, geometry: ArrayGeometry, pose: PoseChange
) -> np.ndarray:
    """Coefficient transition T = pinv(A) @ b_matrix(pose), shape (kappa, kappa)."""
    _, A_pinv = array_matrix(model, geometry)
    return A_pinv @ b_matrix(model, geometry, pose)


def field_jacobian(
    model: PolynomialFieldModel,
    geometry: ArrayGeometry,
    pose: PoseChange,
    theta: np.ndarray,
) -> np.ndarray:
    """Derivative of b_matrix(pose) @ theta w.r.t. the translation dp, (3m, 3)."""
    return field_transport(model, geometry, pose, theta)[1]


def rotation_field_jacobian(
    model: PolynomialFieldModel,
    geometry: ArrayGeometry,
    pose: PoseChange,
    theta: np.ndarray,
) -> np.ndarray:
    """Derivative of b_matrix(pose) @ theta w.r.t. the rotation dphi, (3m, 3)."""
    return field_transport(model, geometry, pose, theta)[2]


@dataclass
class DipoleEnvironment:
    """Uniform background field plus point dipoles, navigation frame.

    ``earth_field`` is in microtesla; dipole positions in metres and moments
    in ampere-square-metres.
    """

    earth_field: np.ndarray
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    moments: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    exclusion_radius: float = 0.2

    def __post_init__(self):
        self.earth_field = np.asarray(self.earth_field, dtype=float).reshape(3)
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float)).reshape(-1, 3)
        self.moments = np.atleast_2d(np.asarray(self.moments, dtype=float)).reshape(-1, 3)
        if self.positions.shape != self.moments.shape:
            raise ValueError("dipole positions and moments must have matching shapes")


def dipole_field(env: DipoleEnvironment, r: np.ndarray) -> np.ndarray:
    """Field at one or more navigation-frame points, shape (3,) or (n, 3)."""
    pts = np.atleast_2d(np.asarray(r, dtype=float))
    out = np.broadcast_to(env.earth_field, pts.shape).copy()
    if env.positions.size:
        d = pts[:, None, :] - env.positions[None, :, :]  # (n, k, 3)
        dist = np.linalg.norm(d, axis=2)
        if np.any(dist < env.exclusion_radius):
            raise ExclusionRadiusError(
                f"evaluation point within {env.exclusion_radius} m of a dipole"
            )
        rhat = d / dist[:, :, None]
        mdot = np.einsum("nkj,kj->nk", rhat, env.moments)
        contrib = 3.0 * mdot[:, :, None] * rhat - env.moments[None, :, :]
        out += MU0_OVER_4PI_UT * np.sum(contrib / dist[:, :, None] ** 3, axis=1)
    if np.ndim(r) == 1:
        return out[0]
    return out


def random_environment(
    seed: int,
    n_dipoles: int = 8,
    plane_height: float = 0.0,
    region: tuple = ((-1.0, 3.0), (-1.0, 3.0)),
    standoff: tuple = (1.5, 3.0),
    band: tuple = (20.0, 70.0),
    earth_field=(20.0, 5.0, -44.0),
) -> DipoleEnvironment:
    """Seeded dipole layout whose field magnitude over the working region
    stays inside ``band`` (checked on a coarse grid at ``plane_height``).

    Dipoles are placed around the region at ``standoff`` distance from the
    working plane and their common moment scale is chosen as the largest
    value that keeps the sampled magnitudes inside the band.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(909,)))
    (x0, x1), (y0, y1) = region
    pos = np.column_stack(
        [
            rng.uniform(x0, x1, n_dipoles),
            rng.uniform(y0, y1, n_dipoles),
            plane_height + rng.choice([-1.0, 1.0], n_dipoles) * rng.uniform(*standoff, n_dipoles),
        ]
    )
    dirs = rng.standard_normal((n_dipoles, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    gx, gy = np.meshgrid(np.linspace(x0, x1, 21), np.linspace(y0, y1, 21))
    grid = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, plane_height)])

    base = DipoleEnvironment(np.zeros(3), pos, dirs)
    dip = dipole_field(base, grid)  # unit-scale dipole contribution
    earth = np.asarray(earth_field, dtype=float)

    scales = np.linspace(0.0, 400.0, 801)
    mags = np.linalg.norm(earth + scales[:, None, None] * dip[None, :, :], axis=2)
    ok = (mags.min(axis=1) >= band[0]) & (mags.max(axis=1) <= band[1])
    if not np.any(ok):
        raise ValueError("could not scale dipole moments into the magnitude band")
    scale = scales[np.nonzero(ok)[0][-1]]
    return DipoleEnvironment(earth, pos, scale * dirs)
