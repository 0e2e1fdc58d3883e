"""Per-step accuracy and consistency metrics over Monte-Carlo runs.

The two headline series are the RMSE over runs,

    rmse_k = sqrt(mean_i |estimate_{k,i} - truth_{k,i}|^2),

and the perceived uncertainty, the filter's own covariance aggregated the
same way,

    pu_k = sqrt(mean_i P_{k,i}).

A consistent filter that only receives relative-motion information can never
report a position or heading uncertainty below its initial value; the
inequality monitor flags every step where that happens.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angle, yaw_gradient

__all__ = [
    "RunResult",
    "ViolationReport",
    "yaw_cov",
    "rmse",
    "perceived_uncertainty",
    "inequality_monitor",
    "metrics_rows",
    "write_metrics_csv",
    "read_metrics_csv",
    "METRICS_HEADER",
]

METRICS_HEADER = [
    "t",
    "rmse_px",
    "rmse_py",
    "rmse_pz",
    "rmse_yaw",
    "pu_px",
    "pu_py",
    "pu_pz",
    "pu_yaw",
    "init_yaw",
    "init_px",
    "init_py",
    "init_pz",
    "filter_label",
]


@dataclass
class RunResult:
    """Posterior estimates, covariance blocks and ground truth of one run."""

    label: str
    run_index: int
    t: np.ndarray              # (K,)
    est_p: np.ndarray          # (K, 3)
    est_v: np.ndarray          # (K, 3)
    est_q: np.ndarray          # (K, 4)
    cov_diag: np.ndarray       # (K, n)
    att_cov: np.ndarray        # (K, 3, 3) attitude-error covariance block
    true_p: np.ndarray         # (K, 3)
    true_yaw: np.ndarray       # (K,)
    init_pos_var: np.ndarray   # (3,)
    init_yaw_var: float
    est_yaw: np.ndarray = field(default=None)   # derived if not given
    yaw_var: np.ndarray = field(default=None)   # derived if not given
    diagnostics: list | None = None              # per-step dicts (projection runs)
    jacobian_log: list | None = None             # per-step transition matrices
    first_prior: object | None = None            # prior state before the first update

    def __post_init__(self):
        from .geometry import yaw_of

        K = len(self.t)
        if self.est_yaw is None:
            self.est_yaw = np.array([yaw_of(self.est_q[k]) for k in range(K)])
        if self.yaw_var is None:
            self.yaw_var = np.array(
                [yaw_cov(self.est_q[k], self.att_cov[k]) for k in range(K)]
            )

    @property
    def steps(self) -> int:
        return len(self.t)


def yaw_cov(q: np.ndarray, att_cov: np.ndarray) -> float:
    """Heading variance implied by the attitude-error covariance block."""
    att_cov = np.asarray(att_cov)
    if att_cov.shape != (3, 3):
        raise ValueError("attitude covariance block must be 3x3")
    d = np.diag(att_cov)
    if np.any(d < -1e-12 * max(np.max(np.abs(att_cov)), 1.0)):
        raise ValueError("attitude covariance has a negative variance")
    g = yaw_gradient(q)
    return float(g @ att_cov @ g)


def _check_equal_lengths(runs):
    K = runs[0].steps
    if any(r.steps != K for r in runs):
        raise ValueError("runs have mismatched lengths")
    return K


def rmse(runs: list, quantity: str) -> np.ndarray:
    """Per-step RMSE over runs; ``quantity`` is "position" (per-axis, (K, 3))
    or "yaw" ((K,), errors wrapped to (-pi, pi])."""
    if not runs:
        raise ValueError("need at least one run")
    _check_equal_lengths(runs)
    if quantity == "position":
        err = np.stack([r.est_p - r.true_p for r in runs])  # (M, K, 3)
        return np.sqrt(np.mean(err**2, axis=0))
    if quantity == "yaw":
        err = np.stack([wrap_angle(r.est_yaw - r.true_yaw) for r in runs])
        return np.sqrt(np.mean(err**2, axis=0))
    raise ValueError(f"unknown quantity {quantity!r}")


def perceived_uncertainty(runs: list, quantity: str) -> np.ndarray:
    """Per-step sqrt of the run-averaged filter variance."""
    if not runs:
        raise ValueError("need at least one run")
    _check_equal_lengths(runs)
    if quantity == "position":
        var = np.stack([r.cov_diag[:, 0:3] for r in runs])
    elif quantity == "yaw":
        var = np.stack([r.yaw_var for r in runs])
    else:
        raise ValueError(f"unknown quantity {quantity!r}")
    if np.any(var < 0):
        raise ValueError("negative variance in run results")
    return np.sqrt(np.mean(var, axis=0))


@dataclass
class ViolationReport:
    """Steps where a perceived-uncertainty series dips below its initial value."""

    first_index: int | None
    count: int
    max_deficit: float

    @property
    def violated(self) -> bool:
        return self.count > 0


def inequality_monitor(series: np.ndarray, initial: float, tol: float = 1e-6) -> ViolationReport:
    series = np.asarray(series, dtype=float)
    below = series < (initial - tol)
    count = int(np.sum(below))
    first = int(np.argmax(below)) if count else None
    deficit = float(np.max(initial - series)) if count else 0.0
    return ViolationReport(first_index=first, count=count, max_deficit=deficit)


def metrics_rows(runs: list) -> list[list]:
    """Rows of the metrics table for one filter label."""
    labels = {r.label for r in runs}
    if len(labels) != 1:
        raise ValueError("metrics_rows expects runs of a single filter label")
    label = labels.pop()
    pos_rmse = rmse(runs, "position")
    yaw_rmse = rmse(runs, "yaw")
    pos_pu = perceived_uncertainty(runs, "position")
    yaw_pu = perceived_uncertainty(runs, "yaw")
    init_yaw = float(np.sqrt(np.mean([r.init_yaw_var for r in runs])))
    init_pos = np.sqrt(np.mean([r.init_pos_var for r in runs], axis=0))
    t = runs[0].t
    rows = []
    for k in range(len(t)):
        rows.append(
            [
                t[k],
                pos_rmse[k, 0],
                pos_rmse[k, 1],
                pos_rmse[k, 2],
                yaw_rmse[k],
                pos_pu[k, 0],
                pos_pu[k, 1],
                pos_pu[k, 2],
                yaw_pu[k],
                init_yaw,
                init_pos[0],
                init_pos[1],
                init_pos[2],
                label,
            ]
        )
    return rows


def _fmt(x) -> str:
    return x if isinstance(x, str) else format(float(x), ".12g")


def write_metrics_csv(path, runs_by_label: dict) -> None:
    """One metrics block per filter label, fixed header and column order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for label in sorted(runs_by_label):
            for row in metrics_rows(runs_by_label[label]):
                writer.writerow([_fmt(x) for x in row])


def read_metrics_csv(path) -> dict:
    """Metrics CSV back into {label: {column: array}}."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header in {path}")
        rows = list(reader)
    out: dict = {}
    for row in rows:
        label = row[-1]
        out.setdefault(label, []).append([float(x) for x in row[:-1]])
    return {
        label: {name: np.array([r[i] for r in rows]) for i, name in enumerate(METRICS_HEADER[:-1])}
        for label, rows in out.items()
    }
