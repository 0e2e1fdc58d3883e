"""Error-state EKF for magnetometer-array-aided inertial navigation.

The nominal state holds position, velocity and attitude of the sensor board
in the navigation frame plus the local field coefficients (and optionally
IMU biases).  The filter estimates the error state

    dx = (dp, dv, eps, [dba, dbg,] dtheta)

where ``eps`` is the body-frame multiplicative attitude error,
``R_true ~ R_nominal (I + [eps]_x)``.  Measurement updates use the stacked
magnetometer-array reading; odometry information enters through the
coefficient transition of the field model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .geometry import quat_conj, quat_exp, quat_log, quat_mul, quat_normalize, skew, to_rot
from .magfield import (
    ArrayGeometry,
    PolynomialFieldModel,
    PoseChange,
    array_matrix,
    field_transport,
)

__all__ = [
    "FilterError",
    "FilterConfig",
    "ErrorLayout",
    "NominalState",
    "ImuSample",
    "MagSample",
    "FParts",
    "FieldTerms",
    "StepResult",
    "pose_change",
    "field_terms",
    "propagate_nominal",
    "jacobian_parts",
    "jacobian_F",
    "process_noise",
    "measurement_matrix",
    "measurement_update",
    "inject_and_reset",
    "extract_error",
    "initial_covariance",
    "ekf_step",
]


class FilterError(RuntimeError):
    """Numerical failure inside the filter (e.g. singular innovation covariance)."""


@dataclass(frozen=True)
class ErrorLayout:
    """Index layout of the error-state vector for a given configuration."""

    kappa: int
    with_biases: bool

    @property
    def pos(self) -> slice:
        return slice(0, 3)

    @property
    def vel(self) -> slice:
        return slice(3, 6)

    @property
    def att(self) -> slice:
        return slice(6, 9)

    @property
    def ba(self) -> slice:
        if not self.with_biases:
            raise AttributeError("layout has no accelerometer-bias block")
        return slice(9, 12)

    @property
    def bg(self) -> slice:
        if not self.with_biases:
            raise AttributeError("layout has no gyroscope-bias block")
        return slice(12, 15)

    @property
    def theta(self) -> slice:
        start = 15 if self.with_biases else 9
        return slice(start, start + self.kappa)

    @property
    def dim(self) -> int:
        return (15 if self.with_biases else 9) + self.kappa


@dataclass
class FilterConfig:
    """Sampling, gravity, noise densities and initial uncertainty.

    Noise semantics: accelerometer/gyroscope densities are white-noise
    densities (per sqrt(Hz)); the field-coefficient and bias entries are
    random-walk densities (per sqrt(s)).  ``mag_noise_std`` is the per-axis
    magnetometer noise in microtesla.
    """

    field_model: PolynomialFieldModel = field(default_factory=PolynomialFieldModel)
    array_geometry: ArrayGeometry = field(default_factory=ArrayGeometry.default_grid)
    ts: float = 0.01
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    accel_noise_density: float = 0.02      # m/s^2/sqrt(Hz)
    gyro_noise_density: float = 5e-4       # rad/s/sqrt(Hz)
    theta_rw_density: float = 0.5          # uT/sqrt(s)
    accel_bias_rw_density: float = 1e-4    # m/s^2/sqrt(s)
    gyro_bias_rw_density: float = 1e-6     # rad/s/sqrt(s)
    mag_noise_std: float = 0.5             # uT
    sigma_p0: float = 1e-3                 # m
    sigma_v0: float = 1e-2                 # m/s
    sigma_rp0: float = np.deg2rad(0.5)     # rad
    sigma_yaw0: float = np.deg2rad(1.0)    # rad
    sigma_theta0: float = 10.0             # uT scale
    sigma_ba0: float = 0.01                # m/s^2
    sigma_bg0: float = 5e-5                # rad/s
    estimate_biases: bool = True
    # Keep the ts^2/2 couplings of attitude/accel-bias errors into position.
    # Disable to get the textbook block structure with a zero position-
    # attitude coupling (the difference is second order in ts).
    second_order_position_blocks: bool = True
    # Solve the field-row consistency constraint over the full nullspace of
    # the field coupling instead of pinning the constrained product to zero.
    general_nullspace_projection: bool = False

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        if self.ts <= 0:
            raise ValueError("sampling period must be positive")
        for name in (
            "accel_noise_density",
            "gyro_noise_density",
            "theta_rw_density",
            "accel_bias_rw_density",
            "gyro_bias_rw_density",
            "mag_noise_std",
            "sigma_p0",
            "sigma_v0",
            "sigma_rp0",
            "sigma_yaw0",
            "sigma_theta0",
            "sigma_ba0",
            "sigma_bg0",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def layout(self) -> ErrorLayout:
        return ErrorLayout(kappa=self.field_model.kappa, with_biases=self.estimate_biases)


@dataclass
class NominalState:
    """Position (m), velocity (m/s), unit attitude quaternion, field
    coefficients (uT scale) and optional IMU biases."""

    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    theta: np.ndarray
    ba: np.ndarray | None = None
    bg: np.ndarray | None = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.q = np.asarray(self.q, dtype=float).reshape(4)
        self.theta = np.asarray(self.theta, dtype=float).copy()
        if self.ba is not None:
            self.ba = np.asarray(self.ba, dtype=float).reshape(3)
        if self.bg is not None:
            self.bg = np.asarray(self.bg, dtype=float).reshape(3)

    def copy(self) -> "NominalState":
        return NominalState(
            self.p.copy(),
            self.v.copy(),
            self.q.copy(),
            self.theta.copy(),
            None if self.ba is None else self.ba.copy(),
            None if self.bg is None else self.bg.copy(),
        )


@dataclass
class ImuSample:
    t: float
    specific_force: np.ndarray
    angular_rate: np.ndarray


@dataclass
class MagSample:
    t: float
    values: np.ndarray  # stacked per-sensor xyz readings, length 3m


def _corrected_inputs(state: NominalState, imu: ImuSample, cfg: FilterConfig):
    s = np.asarray(imu.specific_force, dtype=float)
    w = np.asarray(imu.angular_rate, dtype=float)
    if cfg.estimate_biases:
        if state.ba is not None:
            s = s - state.ba
        if state.bg is not None:
            w = w - state.bg
    return s, w


def pose_change(state: NominalState, imu: ImuSample, cfg: FilterConfig) -> PoseChange:
    """Body-frame pose change over one step given bias-corrected inputs."""
    s, w = _corrected_inputs(state, imu, cfg)
    R = to_rot(state.q)
    ts = cfg.ts
    dp = R.T @ (ts * (state.v + 0.5 * ts * cfg.gravity)) + 0.5 * ts * ts * s
    return PoseChange(dp, w * ts)


@dataclass
class FieldTerms:
    """Field-model quantities shared by the propagation, the transition
    Jacobian and the process noise of one step."""

    psi: PoseChange
    T: np.ndarray              # kappa x kappa coefficient transition
    field_dp_row: np.ndarray   # kappa x 3, coefficients vs body displacement
    field_rot_row: np.ndarray  # kappa x 3, coefficients vs rotation increment


def field_terms(state: NominalState, imu: ImuSample, cfg: FilterConfig) -> FieldTerms:
    psi = pose_change(state, imu, cfg)
    _, A_pinv = array_matrix(cfg.field_model, cfg.array_geometry)
    B, J, C = field_transport(cfg.field_model, cfg.array_geometry, psi, state.theta)
    return FieldTerms(psi=psi, T=A_pinv @ B, field_dp_row=A_pinv @ J, field_rot_row=A_pinv @ C)


def propagate_nominal(
    state: NominalState,
    imu: ImuSample,
    cfg: FilterConfig,
    terms: FieldTerms | None = None,
) -> NominalState:
    """One strapdown step plus field-coefficient propagation."""
    s, w = _corrected_inputs(state, imu, cfg)
    R = to_rot(state.q)
    ts = cfg.ts
    acc = R @ s + cfg.gravity
    if terms is None:
        terms = field_terms(state, imu, cfg)
    return NominalState(
        p=state.p + state.v * ts + 0.5 * ts * ts * acc,
        v=state.v + ts * acc,
        q=quat_normalize(quat_mul(state.q, quat_exp(w * ts))),
        theta=terms.T @ state.theta,
        ba=None if state.ba is None else state.ba.copy(),
        bg=None if state.bg is None else state.bg.copy(),
    )


@dataclass
class FParts:
    """Assembled error-state transition matrix and the factors used by the
    consistency-preserving modification."""

    F: np.ndarray
    vel_att: np.ndarray           # (dv, eps) block
    att_att: np.ndarray           # (eps, eps) block, a rotation matrix
    theta_att_factor: np.ndarray  # 3x3 factor so that (dtheta, eps) = field_row @ factor
    field_row: np.ndarray         # kappa x 3, couples body-frame displacement into dtheta
    layout: ErrorLayout


def jacobian_parts(
    state: NominalState,
    imu: ImuSample,
    cfg: FilterConfig,
    terms: FieldTerms | None = None,
) -> FParts:
    """Error-state transition Jacobian, evaluated at the given estimate."""
    lay = cfg.layout
    ts = cfg.ts
    s, w = _corrected_inputs(state, imu, cfg)
    R = to_rot(state.q)
    if terms is None:
        terms = field_terms(state, imu, cfg)

    field_row = terms.field_dp_row @ (R.T * ts)  # d(dtheta)/d(dv)
    vel_att = -R @ skew(s) * ts
    att_att = to_rot(quat_exp(w * ts)).T
    theta_att_factor = skew(state.v + 0.5 * ts * cfg.gravity) @ R

    F = np.zeros((lay.dim, lay.dim))
    F[lay.pos, lay.pos] = np.eye(3)
    F[lay.pos, lay.vel] = ts * np.eye(3)
    F[lay.vel, lay.vel] = np.eye(3)
    F[lay.vel, lay.att] = vel_att
    F[lay.att, lay.att] = att_att
    F[lay.theta, lay.vel] = field_row
    F[lay.theta, lay.att] = field_row @ theta_att_factor
    F[lay.theta, lay.theta] = terms.T
    if cfg.second_order_position_blocks:
        F[lay.pos, lay.att] = 0.5 * ts * vel_att
    if lay.with_biases:
        F[lay.vel, lay.ba] = -R * ts
        F[lay.att, lay.bg] = -ts * np.eye(3)
        F[lay.ba, lay.ba] = np.eye(3)
        F[lay.bg, lay.bg] = np.eye(3)
        F[lay.theta, lay.ba] = -0.5 * ts * ts * terms.field_dp_row
        F[lay.theta, lay.bg] = -ts * terms.field_rot_row
        if cfg.second_order_position_blocks:
            F[lay.pos, lay.ba] = -0.5 * ts * ts * R
    return FParts(
        F=F,
        vel_att=vel_att,
        att_att=att_att,
        theta_att_factor=theta_att_factor,
        field_row=field_row,
        layout=lay,
    )


def jacobian_F(state: NominalState, imu: ImuSample, cfg: FilterConfig) -> np.ndarray:
    return jacobian_parts(state, imu, cfg).F


def process_noise(
    state: NominalState,
    imu: ImuSample,
    cfg: FilterConfig,
    terms: FieldTerms | None = None,
) -> np.ndarray:
    """Discrete process-noise covariance mapped into the error state.

    Accelerometer and gyroscope white noise enter through the same channels
    as the corresponding input errors; the field coefficients and biases
    receive their random-walk increments directly.
    """
    lay = cfg.layout
    ts = cfg.ts
    R = to_rot(state.q)
    if terms is None:
        terms = field_terms(state, imu, cfg)

    nw = 6 + lay.kappa + (6 if lay.with_biases else 0)
    ws = slice(0, 3)
    ww = slice(3, 6)
    wth = slice(6, 6 + lay.kappa)
    G = np.zeros((lay.dim, nw))
    G[lay.pos, ws] = -0.5 * ts * ts * R
    G[lay.vel, ws] = -ts * R
    G[lay.att, ww] = -ts * np.eye(3)
    G[lay.theta, ws] = -0.5 * ts * ts * terms.field_dp_row
    G[lay.theta, ww] = -ts * terms.field_rot_row
    G[lay.theta, wth] = np.eye(lay.kappa)
    q_diag = np.concatenate(
        [
            np.full(3, cfg.accel_noise_density**2 / ts),
            np.full(3, cfg.gyro_noise_density**2 / ts),
            np.full(lay.kappa, cfg.theta_rw_density**2 * ts),
        ]
    )
    if lay.with_biases:
        wba = slice(6 + lay.kappa, 9 + lay.kappa)
        wbg = slice(9 + lay.kappa, 12 + lay.kappa)
        G[lay.ba, wba] = np.eye(3)
        G[lay.bg, wbg] = np.eye(3)
        q_diag = np.concatenate(
            [
                q_diag,
                np.full(3, cfg.accel_bias_rw_density**2 * ts),
                np.full(3, cfg.gyro_bias_rw_density**2 * ts),
            ]
        )
    Qd = (G * q_diag) @ G.T
    return 0.5 * (Qd + Qd.T)


def measurement_matrix(
    model: PolynomialFieldModel, geometry: ArrayGeometry, estimate_biases: bool = True
) -> np.ndarray:
    """Stacked-array measurement Jacobian: zero except for the field columns."""
    lay = ErrorLayout(kappa=model.kappa, with_biases=estimate_biases)
    A, _ = array_matrix(model, geometry)
    H = np.zeros((3 * geometry.m, lay.dim))
    H[:, lay.theta] = A
    return H


def inject_and_reset(state: NominalState, delta: np.ndarray, cfg: FilterConfig) -> NominalState:
    """Fold an estimated error vector into the nominal state.

    The attitude error is applied multiplicatively on the right; the
    covariance is left untouched (the reset Jacobian is identity to the
    order retained here).
    """
    lay = cfg.layout
    delta = np.asarray(delta, dtype=float).reshape(lay.dim)
    eps = delta[lay.att]
    ang = np.linalg.norm(eps)
    if ang > 0.5:
        warnings.warn(f"attitude correction of {ang:.3f} rad is outside the small-angle regime")
    return NominalState(
        p=state.p + delta[lay.pos],
        v=state.v + delta[lay.vel],
        q=quat_normalize(quat_mul(state.q, quat_exp(eps))),
        theta=state.theta + delta[lay.theta],
        ba=None if state.ba is None else state.ba + (delta[lay.ba] if lay.with_biases else 0.0),
        bg=None if state.bg is None else state.bg + (delta[lay.bg] if lay.with_biases else 0.0),
    )


def extract_error(nominal: NominalState, true: NominalState, cfg: FilterConfig) -> np.ndarray:
    """Error vector of ``true`` relative to ``nominal`` (inverse of inject)."""
    lay = cfg.layout
    delta = np.zeros(lay.dim)
    delta[lay.pos] = true.p - nominal.p
    delta[lay.vel] = true.v - nominal.v
    delta[lay.att] = quat_log(quat_mul(quat_conj(nominal.q), true.q))
    delta[lay.theta] = true.theta - nominal.theta
    if lay.with_biases:
        delta[lay.ba] = (true.ba if true.ba is not None else 0.0) - (
            nominal.ba if nominal.ba is not None else 0.0
        )
        delta[lay.bg] = (true.bg if true.bg is not None else 0.0) - (
            nominal.bg if nominal.bg is not None else 0.0
        )
    return delta


def initial_covariance(cfg: FilterConfig) -> np.ndarray:
    lay = cfg.layout
    d = np.empty(lay.dim)
    d[lay.pos] = cfg.sigma_p0**2
    d[lay.vel] = cfg.sigma_v0**2
    d[lay.att] = [cfg.sigma_rp0**2, cfg.sigma_rp0**2, cfg.sigma_yaw0**2]
    d[lay.theta] = cfg.sigma_theta0**2
    if lay.with_biases:
        d[lay.ba] = cfg.sigma_ba0**2
        d[lay.bg] = cfg.sigma_bg0**2
    return np.diag(d)


def measurement_update(
    state: NominalState,
    cov: np.ndarray,
    mag: MagSample,
    H: np.ndarray,
    cfg: FilterConfig,
):
    """Standard EKF update with Joseph-form covariance propagation.

    Because the stacked-array Jacobian only has support on the coefficient
    columns, the update is carried out on the equivalent compressed
    measurement ``pinv(A) y`` with noise ``sigma^2 (A^T A)^-1``; the posterior
    is algebraically identical to the full-size update.  Returns the
    corrected state, covariance and the full stacked innovation vector.
    """
    lay = cfg.layout
    A, A_pinv = array_matrix(cfg.field_model, cfg.array_geometry)
    innovation = np.asarray(mag.values, dtype=float) - A @ state.theta
    z = A_pinv @ innovation
    R_c = cfg.mag_noise_std**2 * (A_pinv @ A_pinv.T)  # sigma^2 (A^T A)^-1
    S = cov[lay.theta, lay.theta] + R_c
    try:
        chol = cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise FilterError("innovation covariance is singular") from exc
    K = cho_solve(chol, cov[lay.theta, :], check_finite=False).T
    delta = K @ z
    IKH = np.eye(cov.shape[0])
    IKH[:, lay.theta] -= K
    new_cov = IKH @ cov @ IKH.T + K @ R_c @ K.T
    new_cov = 0.5 * (new_cov + new_cov.T)
    return inject_and_reset(state, delta, cfg), new_cov, innovation


@dataclass
class StepResult:
    """One filter cycle: measurement update at time k, then time update."""

    posterior: NominalState
    posterior_cov: np.ndarray
    state: NominalState          # prior estimate at k+1
    cov: np.ndarray              # prior covariance at k+1
    innovation: np.ndarray
    parts: FParts
    F_used: np.ndarray
    modification: dict | None = None


def ekf_step(
    state: NominalState,
    cov: np.ndarray,
    imu: ImuSample,
    mag: MagSample,
    cfg: FilterConfig,
    H: np.ndarray | None = None,
    modify_F=None,
) -> StepResult:
    """Measurement update followed by a time update.

    ``modify_F(parts, prior, next_prior, cfg)`` may replace the covariance
    transition matrix; with ``modify_F=None`` this is the baseline filter.
    """
    if H is None:
        H = measurement_matrix(cfg.field_model, cfg.array_geometry, cfg.estimate_biases)
    prior = state
    posterior, posterior_cov, innovation = measurement_update(state, cov, mag, H, cfg)
    terms = field_terms(posterior, imu, cfg)
    next_prior = propagate_nominal(posterior, imu, cfg, terms=terms)
    parts = jacobian_parts(posterior, imu, cfg, terms=terms)
    modification = None
    F_used = parts.F
    if modify_F is not None:
        F_used, modification = modify_F(parts, prior, next_prior, cfg)
    Q = process_noise(posterior, imu, cfg, terms=terms)
    next_cov = F_used @ posterior_cov @ F_used.T + Q
    next_cov = 0.5 * (next_cov + next_cov.T)
    return StepResult(
        posterior=posterior,
        posterior_cov=posterior_cov,
        state=next_prior,
        cov=next_cov,
        innovation=innovation,
        parts=parts,
        F_used=F_used,
        modification=modification,
    )
