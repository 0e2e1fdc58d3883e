"""Command-line entry points: simulation sweeps, real-data processing and
result inspection.

Exit codes: 0 success, 2 configuration or input-format error, 3 runtime
failure inside a run.  The environment variable ``OC_MAINS_THREADS`` caps
the Monte-Carlo worker pool.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .dataio import (
    DataFormatError,
    read_gt_csv,
    read_imu_csv,
    read_mag_csv,
    write_gt_csv,
    write_imu_csv,
    write_mag_csv,
)
from .evaluation import inequality_monitor, read_metrics_csv, write_metrics_csv
from .filtering import NominalState, initial_covariance, inject_and_reset
from .geometry import quat_exp
from .magfield import array_matrix, dipole_field, random_environment
from .simulator import (
    BASELINE_LABEL,
    OC_LABEL,
    GroundTruth,
    RunFailure,
    generate_run_data,
    monte_carlo,
    run_filter,
    square_trajectory,
)

DIAG_FIELDS = ["step", "t", "res_vel", "res_att", "res_field", "span_residual", "f_delta_fro"]
TRACE_HEADER = [
    "t",
    "est_px",
    "est_py",
    "est_pz",
    "est_yaw",
    "true_px",
    "true_py",
    "true_pz",
    "true_yaw",
]


def _fmt(x) -> str:
    return format(float(x), ".12g")


def _labels(oc_mode: str) -> list[str]:
    return {"on": [OC_LABEL], "off": [BASELINE_LABEL], "both": [BASELINE_LABEL, OC_LABEL]}[oc_mode]


def _environment(exp: ExperimentConfig):
    envp = exp.environment
    return random_environment(
        seed=envp.seed,
        n_dipoles=envp.n_dipoles,
        plane_height=exp.trajectory.height,
        region=(
            (-1.0, exp.trajectory.side + 1.0),
            (-1.0, exp.trajectory.side + 1.0),
        ),
        standoff=(envp.standoff_min, envp.standoff_max),
        band=(envp.band_min, envp.band_max),
        earth_field=envp.earth_field,
    )


def _write_trace(path, run) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for k in range(run.steps):
            w.writerow(
                [_fmt(run.t[k])]
                + [_fmt(v) for v in run.est_p[k]]
                + [_fmt(run.est_yaw[k])]
                + [_fmt(v) for v in run.true_p[k]]
                + [_fmt(run.true_yaw[k])]
            )


def _write_diagnostics(path, diagnostics) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(DIAG_FIELDS)
        for d in diagnostics:
            w.writerow([_fmt(d.get(name, float("nan"))) for name in DIAG_FIELDS])


def _write_field_grid(path, exp: ExperimentConfig, env) -> None:
    side = exp.trajectory.side
    xs = np.linspace(-0.5, side + 0.5, 61)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "bmag"])
        for x in xs:
            pts = np.column_stack(
                [np.full_like(xs, x), xs, np.full_like(xs, exp.trajectory.height)]
            )
            mags = np.linalg.norm(dipole_field(env, pts), axis=1)
            for y, bm in zip(xs, mags):
                w.writerow([_fmt(x), _fmt(y), _fmt(bm)])


def run_sim(exp: ExperimentConfig) -> int:
    os.makedirs(exp.out_dir, exist_ok=True)
    gt = square_trajectory(exp.trajectory, exp.filter.gravity)
    env = _environment(exp)
    labels = _labels(exp.oc)
    pairs = monte_carlo(
        exp.runs, gt, env, exp.filter, exp.noise, seed=exp.seed, collect_diagnostics_run0=True
    )
    runs_by_label = {
        BASELINE_LABEL: [p[0] for p in pairs],
        OC_LABEL: [p[1] for p in pairs],
    }
    runs_by_label = {label: runs_by_label[label] for label in labels}

    write_metrics_csv(os.path.join(exp.out_dir, "metrics.csv"), runs_by_label)
    for label, runs in runs_by_label.items():
        _write_trace(os.path.join(exp.out_dir, f"trace_{label}.csv"), runs[0])
        if runs[0].diagnostics:
            _write_diagnostics(
                os.path.join(exp.out_dir, f"diagnostics_{label}.csv"), runs[0].diagnostics
            )
    _write_field_grid(os.path.join(exp.out_dir, "field_magnitude.csv"), exp, env)

    if exp.export_data:
        dataset_dir = os.path.join(exp.out_dir, "dataset")
        os.makedirs(dataset_dir, exist_ok=True)
        _, accel, gyro, mag, _, _ = generate_run_data(0, exp.seed, gt, env, exp.filter, exp.noise)
        write_imu_csv(os.path.join(dataset_dir, "imu.csv"), gt.t, accel, gyro)
        write_mag_csv(os.path.join(dataset_dir, "mag.csv"), gt.t, mag)
        write_gt_csv(os.path.join(dataset_dir, "gt.csv"), gt.t, gt.p, gt.q)

    for label, runs in runs_by_label.items():
        pu = np.sqrt(np.mean([r.yaw_var for r in runs], axis=0))
        init = float(np.sqrt(np.mean([r.init_yaw_var for r in runs])))
        rep = inequality_monitor(pu, init)
        print(
            f"{label}: {len(runs)} runs, yaw-uncertainty floor violations: {rep.count}"
            + (f" (first at step {rep.first_index})" if rep.violated else "")
        )
    print(f"results written to {exp.out_dir}")
    return 0


def _split_segments(t: np.ndarray, ts: float) -> list[np.ndarray]:
    gaps = np.nonzero(np.diff(t) > 3.0 * ts)[0]
    if gaps.size:
        print(
            f"warning: {gaps.size} time-base gap(s) larger than 3 sampling periods; "
            "splitting into segments",
            file=sys.stderr,
        )
    bounds = [0, *list(gaps + 1), len(t)]
    return [np.arange(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def run_real(exp: ExperimentConfig, dataset_dir: str) -> int:
    imu_path = os.path.join(dataset_dir, "imu.csv")
    mag_path = os.path.join(dataset_dir, "mag.csv")
    gt_path = os.path.join(dataset_dir, "gt.csv")
    for path in (imu_path, mag_path):
        if not os.path.exists(path):
            print(f"error: missing {path}", file=sys.stderr)
            return 2

    t, accel, gyro = read_imu_csv(imu_path)
    t_mag, mag = read_mag_csv(mag_path)
    cfg = exp.filter
    if mag.shape[1] != 3 * cfg.array_geometry.m:
        print(
            f"error: mag.csv has {mag.shape[1]} reading columns, expected "
            f"{3 * cfg.array_geometry.m} for the configured array",
            file=sys.stderr,
        )
        return 2
    if len(t_mag) != len(t) or np.max(np.abs(t_mag - t)) > cfg.ts / 100.0:
        print("error: mag.csv and imu.csv are not on a common time base", file=sys.stderr)
        return 2

    have_gt = os.path.exists(gt_path)
    if have_gt:
        t_gt, p_gt, q_gt = read_gt_csv(gt_path)
        true_p = np.column_stack([np.interp(t, t_gt, p_gt[:, i]) for i in range(3)])
        idx = np.clip(np.searchsorted(t_gt, t), 0, len(t_gt) - 1)
        from .geometry import yaw_of

        true_yaw = np.array([yaw_of(q_gt[i]) for i in idx])
    else:
        print("warning: gt.csv missing; metrics limited to perceived uncertainty", file=sys.stderr)
        true_p = np.full((len(t), 3), np.nan)
        true_yaw = np.full(len(t), np.nan)

    ts = float(np.median(np.diff(t)))
    if abs(ts - cfg.ts) > 1e-9:
        from dataclasses import replace

        cfg = replace(cfg, ts=ts)
    segments = _split_segments(t, ts)

    _, A_pinv = array_matrix(cfg.field_model, cfg.array_geometry)
    labels = _labels(exp.oc)
    runs_by_label: dict = {label: [] for label in labels}
    trace_runs: dict = {}
    diag_runs: dict = {}
    for i in range(exp.real.reinits):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=exp.seed, spawn_key=(i,)))
        delta0 = np.sqrt(np.diag(initial_covariance(cfg))) * rng.standard_normal(cfg.layout.dim)
        per_label: dict = {label: [] for label in labels}
        for seg in segments:
            k0 = seg[0]
            if have_gt:
                p0 = true_p[k0]
                v0 = (true_p[min(k0 + 1, len(t) - 1)] - true_p[k0]) / ts
                q0 = quat_exp([0.0, 0.0, true_yaw[k0]])
            else:
                p0, v0, q0 = np.zeros(3), np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0])
            theta0 = A_pinv @ mag[k0]
            base_state = NominalState(
                p=p0,
                v=v0,
                q=q0,
                theta=theta0,
                ba=np.zeros(3) if cfg.estimate_biases else None,
                bg=np.zeros(3) if cfg.estimate_biases else None,
            )
            est0 = inject_and_reset(base_state, -delta0, cfg)
            P0 = initial_covariance(cfg)
            seg_gt = GroundTruth(
                t=t[seg],
                p=true_p[seg],
                v=np.full((len(seg), 3), np.nan),
                q=np.full((len(seg), 4), np.nan),
                yaw=true_yaw[seg],
                specific_force=np.zeros((len(seg), 3)),
                angular_rate=np.zeros((len(seg), 3)),
            )
            for label in labels:
                try:
                    run = run_filter(
                        seg_gt,
                        accel[seg],
                        gyro[seg],
                        mag[seg],
                        est0,
                        P0,
                        cfg,
                        oc=(label == OC_LABEL),
                        label=label,
                        run_index=i,
                        collect_diagnostics=(i == 0),
                    )
                except Exception as exc:  # noqa: BLE001
                    print(f"error: re-initialization {i} failed: {exc}", file=sys.stderr)
                    return 3
                per_label[label].append(run)
        for label in labels:
            run = _concat_runs(per_label[label])
            runs_by_label[label].append(run)
            if i == 0:
                trace_runs[label] = run
                diag_runs[label] = run.diagnostics

    os.makedirs(exp.out_dir, exist_ok=True)
    write_metrics_csv(os.path.join(exp.out_dir, "metrics.csv"), runs_by_label)
    for label in labels:
        _write_trace(os.path.join(exp.out_dir, f"trace_{label}.csv"), trace_runs[label])
        if diag_runs.get(label):
            _write_diagnostics(
                os.path.join(exp.out_dir, f"diagnostics_{label}.csv"), diag_runs[label]
            )
    total = sum(len(v) for v in runs_by_label.values())
    print(f"processed {len(segments)} segment(s), {exp.real.reinits} re-initializations, "
          f"{total} filter runs")
    print(f"results written to {exp.out_dir}")
    return 0


def _concat_runs(runs):
    if len(runs) == 1:
        return runs[0]
    import dataclasses

    first = runs[0]
    merged = dataclasses.replace(
        first,
        t=np.concatenate([r.t for r in runs]),
        est_p=np.vstack([r.est_p for r in runs]),
        est_v=np.vstack([r.est_v for r in runs]),
        est_q=np.vstack([r.est_q for r in runs]),
        cov_diag=np.vstack([r.cov_diag for r in runs]),
        att_cov=np.vstack([r.att_cov for r in runs]),
        true_p=np.vstack([r.true_p for r in runs]),
        true_yaw=np.concatenate([r.true_yaw for r in runs]),
        est_yaw=np.concatenate([r.est_yaw for r in runs]),
        yaw_var=np.concatenate([r.yaw_var for r in runs]),
        diagnostics=(
            None
            if first.diagnostics is None
            else [d for r in runs for d in (r.diagnostics or [])]
        ),
    )
    return merged


def analyze(results_dir: str) -> int:
    metrics_path = os.path.join(results_dir, "metrics.csv")
    if not os.path.isdir(results_dir) or not os.path.exists(metrics_path):
        print(f"error: no metrics.csv under {results_dir}", file=sys.stderr)
        return 2
    data = read_metrics_csv(metrics_path)
    for label in sorted(data):
        cols = data[label]
        rep = inequality_monitor(cols["pu_yaw"], cols["init_yaw"][0])
        print(f"[{label}]")
        print(
            "  yaw-uncertainty floor violations: "
            + (f"{rep.count} (first at step {rep.first_index}, "
               f"max deficit {rep.max_deficit:.3e} rad)" if rep.violated else "0")
        )
        if np.all(np.isfinite(cols["rmse_yaw"])):
            print(f"  final yaw RMSE: {np.degrees(cols['rmse_yaw'][-1]):.3f} deg")
            final_pos = np.hypot(
                np.hypot(cols["rmse_px"][-1], cols["rmse_py"][-1]), cols["rmse_pz"][-1]
            )
            print(f"  final position RMSE: {final_pos:.3f} m")
        diag_path = os.path.join(results_dir, f"diagnostics_{label}.csv")
        if os.path.exists(diag_path):
            with open(diag_path, "r", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                rows = list(reader)
            if rows:
                worst = {
                    name: max(float(r[name]) for r in rows)
                    for name in ("res_vel", "res_att", "res_field", "span_residual", "f_delta_fro")
                }
                print(
                    "  max constraint residuals: "
                    f"vel {worst['res_vel']:.3e}, att {worst['res_att']:.3e}, "
                    f"field {worst['res_field']:.3e}"
                )
                print(f"  max subspace residual: {worst['span_residual']:.3e}")
                print(f"  max transition-matrix change: {worst['f_delta_fro']:.3e}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ocmains",
        description="Magnetometer-array aided inertial navigation test bench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("run-sim", help="Monte-Carlo simulation sweep")
    p_sim.add_argument("--config", default=None, help="key=value configuration file")
    p_sim.add_argument("--runs", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--oc", choices=["on", "off", "both"], default=None)
    p_sim.add_argument("--out", default=None)
    p_sim.add_argument("--export-data", action="store_true",
                       help="write the first run's sensor streams as a dataset")

    p_real = sub.add_parser("run-real", help="process a recorded dataset")
    p_real.add_argument("dataset_dir", nargs="?", default=None)
    p_real.add_argument("--config", default=None)
    p_real.add_argument("--seed", type=int, default=None)
    p_real.add_argument("--oc", choices=["on", "off", "both"], default=None)
    p_real.add_argument("--out", default=None)
    p_real.add_argument("--reinits", type=int, default=None)

    p_an = sub.add_parser("analyze", help="summarise results in a directory")
    p_an.add_argument("results_dir")

    args = parser.parse_args(argv)

    if args.command == "analyze":
        return analyze(args.results_dir)

    try:
        exp = load_config(args.config)
        if getattr(args, "runs", None) is not None:
            if args.runs < 1:
                raise ConfigError("runs must be at least 1")
            exp.runs = args.runs
        if args.seed is not None:
            exp.seed = args.seed
        if args.oc is not None:
            exp.oc = args.oc
        if args.out is not None:
            exp.out_dir = args.out
        if getattr(args, "export_data", False):
            exp.export_data = True
        if getattr(args, "reinits", None) is not None:
            if args.reinits < 1:
                raise ConfigError("reinits must be at least 1")
            exp.real.reinits = args.reinits
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "run-sim":
            return run_sim(exp)
        dataset_dir = args.dataset_dir or exp.real.dataset_dir
        if not dataset_dir:
            print("error: no dataset directory given", file=sys.stderr)
            return 2
        return run_real(exp, dataset_dir)
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RunFailure as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
