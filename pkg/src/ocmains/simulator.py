"""Synthetic test bench: square trajectory, sensor corruption models and
Monte-Carlo orchestration.

The board traverses a square path at constant height.  Each side is covered
with a quintic rest-to-rest profile and the heading turns in place at the
corners, so velocities, accelerations and angular rates stay bounded and
continuous.  The emitted specific-force and angular-rate sequences are
derived from consecutive truth samples, which makes one strapdown step of
the filter reproduce the truth exactly up to quadrature error.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .evaluation import RunResult, yaw_cov
from .filtering import (
    FilterConfig,
    ImuSample,
    MagSample,
    NominalState,
    initial_covariance,
    inject_and_reset,
    measurement_matrix,
)
from .geometry import quat_conj, quat_exp, quat_log, quat_mul, to_rot, wrap_angle
from .magfield import DipoleEnvironment, array_matrix, dipole_field
from .observability import OcContext, constraint_residuals, span_residual, nullspace_basis, oc_step

__all__ = [
    "TrajectoryConfig",
    "NoiseConfig",
    "GroundTruth",
    "RunFailure",
    "square_trajectory",
    "simulate_imu",
    "simulate_mag",
    "generate_run_data",
    "true_initial_state",
    "run_filter",
    "monte_carlo",
    "BASELINE_LABEL",
    "OC_LABEL",
]

BASELINE_LABEL = "mains"
OC_LABEL = "oc-mains"


@dataclass
class TrajectoryConfig:
    side: float = 2.0
    laps: int = 1
    duration: float = 8.0
    rate: float = 100.0
    corner_time: float = 0.5   # seconds spent turning in place at each corner
    height: float = 0.0
    tangent_yaw: bool = True   # heading follows the path; False keeps it fixed

    def __post_init__(self):
        if self.side <= 0 or self.duration <= 0 or self.rate <= 0 or self.laps < 1:
            raise ValueError("trajectory parameters must be positive")
        if self.corner_time >= self.segment_time:
            raise ValueError("corner time must be smaller than the per-side time budget")

    @property
    def segment_time(self) -> float:
        return self.duration / self.laps / 4.0

    @property
    def steps(self) -> int:
        n = self.duration * self.rate
        if abs(n - round(n)) > 1e-9:
            raise ValueError("duration times rate must be an integer sample count")
        return int(round(n))


@dataclass
class NoiseConfig:
    accel_density: float = 0.02       # m/s^2/sqrt(Hz)
    gyro_density: float = 5e-4        # rad/s/sqrt(Hz)
    accel_bias_std: float = 0.01      # m/s^2, constant per run
    gyro_bias_std: float = 5e-5       # rad/s, constant per run
    mag_std: float = 0.5              # uT per axis

    def __post_init__(self):
        for name in ("accel_density", "gyro_density", "accel_bias_std", "gyro_bias_std", "mag_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class GroundTruth:
    """Truth samples plus the noise-free inputs that reproduce them."""

    t: np.ndarray               # (K,)
    p: np.ndarray               # (K, 3)
    v: np.ndarray               # (K, 3)
    q: np.ndarray               # (K, 4)
    yaw: np.ndarray             # (K,)
    specific_force: np.ndarray  # (K, 3)
    angular_rate: np.ndarray    # (K, 3)

    @property
    def steps(self) -> int:
        return len(self.t)

    @property
    def ts(self) -> float:
        return float(self.t[1] - self.t[0])


def _smoothstep(x: np.ndarray):
    """Quintic rest-to-rest profile on [0, 1] and its derivative."""
    x = np.clip(x, 0.0, 1.0)
    s = x**3 * (10.0 - 15.0 * x + 6.0 * x**2)
    ds = 30.0 * x**2 * (1.0 - x) ** 2
    return s, ds


def _square_pose(t: float, cfg: TrajectoryConfig):
    """Analytic position, velocity and cumulative heading at time t."""
    seg = cfg.segment_time
    move_time = seg - cfg.corner_time
    corners = np.array(
        [
            [0.0, 0.0],
            [cfg.side, 0.0],
            [cfg.side, cfg.side],
            [0.0, cfg.side],
        ]
    )
    e_global = int(t / seg + 1e-12)
    tau = t - e_global * seg
    e = e_global % 4
    start = corners[e]
    direction = corners[(e + 1) % 4] - start
    direction = direction / np.linalg.norm(direction)
    base_yaw = e_global * (np.pi / 2.0)
    if tau < move_time:
        s, ds = _smoothstep(np.array(tau / move_time))
        xy = start + direction * cfg.side * float(s)
        vxy = direction * cfg.side * float(ds) / move_time
        yaw = base_yaw
    else:
        s, _ = _smoothstep(np.array((tau - move_time) / cfg.corner_time))
        xy = corners[(e + 1) % 4]
        vxy = np.zeros(2)
        yaw = base_yaw + (np.pi / 2.0) * float(s)
    if not cfg.tangent_yaw:
        yaw = 0.0
    p = np.array([xy[0], xy[1], cfg.height])
    v = np.array([vxy[0], vxy[1], 0.0])
    return p, v, yaw


def square_trajectory(cfg: TrajectoryConfig, gravity=(0.0, 0.0, -9.81)) -> GroundTruth:
    """Closed square path sampled at the IMU rate, with the noise-free
    specific-force and angular-rate sequences that regenerate it."""
    gravity = np.asarray(gravity, dtype=float)
    K = cfg.steps
    ts = 1.0 / cfg.rate
    t = np.arange(K + 1) * ts
    p = np.empty((K + 1, 3))
    v = np.empty((K + 1, 3))
    q = np.empty((K + 1, 4))
    yaw = np.empty(K + 1)
    for k in range(K + 1):
        pk, vk, yk = _square_pose(t[k], cfg)
        p[k], v[k], yaw[k] = pk, vk, yk
        q[k] = quat_exp([0.0, 0.0, yk])
    s = np.empty((K, 3))
    w = np.empty((K, 3))
    for k in range(K):
        R = to_rot(q[k])
        s[k] = R.T @ ((v[k + 1] - v[k]) / ts - gravity)
        w[k] = quat_log(quat_mul(quat_conj(q[k]), q[k + 1])) / ts
    return GroundTruth(
        t=t[:K],
        p=p[:K],
        v=v[:K],
        q=q[:K],
        yaw=wrap_angle(yaw[:K]),
        specific_force=s,
        angular_rate=w,
    )


def simulate_imu(gt: GroundTruth, noise: NoiseConfig, rng: np.random.Generator):
    """Noisy IMU streams: truth plus per-run constant biases and white noise.

    Returns (accel, gyro, bias_a, bias_g); sample noise std is the density
    times sqrt(rate).
    """
    rate = 1.0 / gt.ts
    bias_a = noise.accel_bias_std * rng.standard_normal(3)
    bias_g = noise.gyro_bias_std * rng.standard_normal(3)
    accel = gt.specific_force + bias_a + noise.accel_density * np.sqrt(rate) * rng.standard_normal(
        gt.specific_force.shape
    )
    gyro = gt.angular_rate + bias_g + noise.gyro_density * np.sqrt(rate) * rng.standard_normal(
        gt.angular_rate.shape
    )
    return accel, gyro, bias_a, bias_g


def clean_mag_readings(gt: GroundTruth, env: DipoleEnvironment, geometry) -> np.ndarray:
    """Noise-free stacked body-frame readings along the truth, (K, 3m)."""
    K = gt.steps
    out = np.empty((K, 3 * geometry.m))
    for k in range(K):
        R = to_rot(gt.q[k])
        pts = gt.p[k] + geometry.positions @ R.T
        out[k] = (dipole_field(env, pts) @ R).ravel()
    return out


def simulate_mag(
    gt: GroundTruth,
    env: DipoleEnvironment,
    geometry,
    noise: NoiseConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Magnetometer-array samples of the dipole environment, (K, 3m)."""
    out = clean_mag_readings(gt, env, geometry)
    if rng is not None and noise.mag_std > 0:
        out = out + noise.mag_std * rng.standard_normal(out.shape)
    return out


def run_filter(
    gt: GroundTruth,
    accel: np.ndarray,
    gyro: np.ndarray,
    mag: np.ndarray,
    est0: NominalState,
    P0: np.ndarray,
    cfg: FilterConfig,
    oc: bool,
    label: str,
    run_index: int = 0,
    collect_diagnostics: bool = False,
    record_jacobians: bool = False,
) -> RunResult:
    """Run one filter over a dataset and record per-step posteriors."""
    lay = cfg.layout
    K = gt.steps
    H = measurement_matrix(cfg.field_model, cfg.array_geometry, cfg.estimate_biases)
    state, P = est0.copy(), P0.copy()
    first_prior = est0.copy()
    est_p = np.empty((K, 3))
    est_v = np.empty((K, 3))
    est_q = np.empty((K, 4))
    cov_diag = np.empty((K, lay.dim))
    att_cov = np.empty((K, 3, 3))
    diagnostics = [] if collect_diagnostics else None
    jac_log = [] if record_jacobians else None
    for k in range(K):
        imu = ImuSample(gt.t[k], accel[k], gyro[k])
        res = oc_step(
            state, P, imu, MagSample(gt.t[k], mag[k]), cfg, H=H, oc=oc,
            record_span=collect_diagnostics,
        )
        est_p[k] = res.posterior.p
        est_v[k] = res.posterior.v
        est_q[k] = res.posterior.q
        cov_diag[k] = np.diag(res.posterior_cov)
        att_cov[k] = res.posterior_cov[lay.att, lay.att]
        if collect_diagnostics:
            if res.modification is not None:
                diag = dict(res.modification)
            else:
                ctx = OcContext.from_states(state, res.state, cfg)
                diag = constraint_residuals(res.parts, ctx)
                diag["span_residual"] = span_residual(
                    res.F_used,
                    nullspace_basis(state, cfg.gravity, lay),
                    nullspace_basis(res.state, cfg.gravity, lay),
                )
            diag["t"] = float(gt.t[k])
            diag["step"] = k
            diagnostics.append(diag)
        if record_jacobians:
            jac_log.append(res.F_used)
        state, P = res.state, res.cov
    return RunResult(
        label=label,
        run_index=run_index,
        t=gt.t.copy(),
        est_p=est_p,
        est_v=est_v,
        est_q=est_q,
        cov_diag=cov_diag,
        att_cov=att_cov,
        true_p=gt.p.copy(),
        true_yaw=gt.yaw.copy(),
        init_pos_var=np.diag(P0)[lay.pos].copy(),
        init_yaw_var=yaw_cov(est0.q, P0[lay.att, lay.att]),
        diagnostics=diagnostics,
        jacobian_log=jac_log,
        first_prior=first_prior,
    )


def true_initial_state(
    gt: GroundTruth,
    env: DipoleEnvironment,
    cfg: FilterConfig,
    bias_a: np.ndarray | None = None,
    bias_g: np.ndarray | None = None,
) -> NominalState:
    """Truth state at the first sample; field coefficients are the
    least-squares fit of the clean field at the initial array pose."""
    R = to_rot(gt.q[0])
    pts = gt.p[0] + cfg.array_geometry.positions @ R.T
    clean = (dipole_field(env, pts) @ R).ravel()
    _, A_pinv = array_matrix(cfg.field_model, cfg.array_geometry)
    theta0 = A_pinv @ clean
    use_bias = cfg.estimate_biases
    return NominalState(
        p=gt.p[0].copy(),
        v=gt.v[0].copy(),
        q=gt.q[0].copy(),
        theta=theta0,
        ba=(np.zeros(3) if bias_a is None else bias_a) if use_bias else None,
        bg=(np.zeros(3) if bias_g is None else bias_g) if use_bias else None,
    )


class RunFailure(RuntimeError):
    """A Monte-Carlo run aborted; carries the failing run index."""

    def __init__(self, run_index: int, cause: BaseException):
        super().__init__(f"run {run_index} failed: {cause}")
        self.run_index = run_index


def generate_run_data(run_index: int, seed: int, gt: GroundTruth, env, cfg, noise: NoiseConfig):
    """Initial-error draw and corrupted sensor streams for one run.

    The draw order is fixed so results depend only on (seed, run index).
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(run_index,)))
    lay = cfg.layout
    delta0 = np.sqrt(np.diag(initial_covariance(cfg))) * rng.standard_normal(lay.dim)
    accel, gyro, bias_a, bias_g = simulate_imu(gt, noise, rng)
    mag = simulate_mag(gt, env, cfg.array_geometry, noise, rng)
    return delta0, accel, gyro, mag, bias_a, bias_g


def _run_pair(args):
    (run_index, seed, gt, env, cfg, noise, collect, record) = args
    try:
        delta0, accel, gyro, mag, bias_a, bias_g = generate_run_data(
            run_index, seed, gt, env, cfg, noise
        )
        truth0 = true_initial_state(gt, env, cfg, bias_a, bias_g)
        est0 = inject_and_reset(truth0, -delta0, cfg)
        P0 = initial_covariance(cfg)
        base = run_filter(
            gt, accel, gyro, mag, est0, P0, cfg, False, BASELINE_LABEL, run_index, collect, record
        )
        occ = run_filter(
            gt, accel, gyro, mag, est0, P0, cfg, True, OC_LABEL, run_index, collect, record
        )
    except Exception as exc:  # noqa: BLE001 - report which run died
        raise RunFailure(run_index, exc) from exc
    return run_index, base, occ


def monte_carlo(
    run_count: int,
    gt: GroundTruth,
    env: DipoleEnvironment,
    cfg: FilterConfig,
    noise: NoiseConfig,
    seed: int = 0,
    max_workers: int | None = None,
    collect_diagnostics_run0: bool = True,
    record_jacobians_run0: bool = False,
) -> list[tuple[RunResult, RunResult]]:
    """Paired baseline/projected runs over independent noise realizations.

    Both filters in a pair consume identical inputs and the same initial
    estimate.  Per-run random streams are keyed on (seed, run index), so
    results are independent of worker count and scheduling order.
    """
    if run_count < 1:
        raise ValueError("need at least one run")
    tasks = [
        (
            i,
            seed,
            gt,
            env,
            cfg,
            noise,
            collect_diagnostics_run0 and i == 0,
            record_jacobians_run0 and i == 0,
        )
        for i in range(run_count)
    ]
    if max_workers is None:
        max_workers = min(os.cpu_count() or 1, run_count)
    cap = os.environ.get("OC_MAINS_THREADS")
    if cap:
        max_workers = max(1, min(max_workers, int(cap)))
    results: dict[int, tuple[RunResult, RunResult]] = {}
    if max_workers <= 1 or run_count == 1:
        for task in tasks:
            idx, base, occ = _run_pair(task)
            results[idx] = (base, occ)
    else:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            for idx, base, occ in pool.map(_run_pair, tasks):
                results[idx] = (base, occ)
    return [results[i] for i in range(run_count)]
