"""The three figure kinds rendered from exported CSVs.

Input contracts (documented by the exporter):

* metrics CSV: header ``t,rmse_px,rmse_py,rmse_pz,rmse_yaw,pu_px,pu_py,pu_pz,
  pu_yaw,init_yaw,init_px,init_py,init_pz,filter_label``; one row block per
  filter label.
* trace CSV: ``t,est_px,est_py,est_pz,est_yaw,true_px,true_py,true_pz,
  true_yaw`` for one run.
* field grid CSV: ``x,y,bmag`` on a rectangular grid.

Angles in the CSVs are radians and are plotted in degrees; positions are
metres; field magnitudes microtesla.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .style import FIELD_COLORMAP, PNG_METADATA, RC_PARAMS, REFERENCE_COLOR, label_color

__all__ = ["FigureError", "FigureSpec", "plot_uncertainty", "plot_rmse", "plot_trajectory"]

METRICS_COLUMNS = [
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
]


class FigureError(ValueError):
    """Missing or malformed figure input."""


@dataclass
class FigureSpec:
    """Inputs and output of one figure."""

    kind: str                      # uncertainty | rmse | trajectory
    inputs: list[str] = field(default_factory=list)
    output: str = "figure.png"

    def __post_init__(self):
        if self.kind not in ("uncertainty", "rmse", "trajectory"):
            raise FigureError(f"unknown figure kind {self.kind!r}")
        if not self.inputs:
            raise FigureError("at least one input CSV is required")


def _read_csv_columns(path, required):
    try:
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise FigureError(f"{path}: empty CSV") from None
            rows = [row for row in reader if row]
    except OSError as exc:
        raise FigureError(f"{path}: {exc}") from None
    missing = [name for name in required if name not in header]
    if missing:
        raise FigureError(f"{path}: missing columns {', '.join(missing)}")
    if not rows:
        raise FigureError(f"{path}: no data rows")
    return header, rows


def _read_metrics(path):
    header, rows = _read_csv_columns(path, METRICS_COLUMNS + ["filter_label"])
    idx = {name: header.index(name) for name in header}
    by_label: dict[str, dict[str, np.ndarray]] = {}
    labels_order = []
    for row in rows:
        label = row[idx["filter_label"]]
        if label not in by_label:
            by_label[label] = {name: [] for name in METRICS_COLUMNS}
            labels_order.append(label)
        for name in METRICS_COLUMNS:
            by_label[label][name].append(float(row[idx[name]]))
    return {
        label: {name: np.array(vals) for name, vals in cols.items()}
        for label, cols in ((lab, by_label[lab]) for lab in labels_order)
    }


def _save(fig, path):
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)


def plot_uncertainty(spec: FigureSpec) -> list[str]:
    """Perceived heading uncertainty per filter against the initial value."""
    data = _read_metrics(spec.inputs[0])
    with plt.rc_context(RC_PARAMS):
        fig, ax = plt.subplots()
        init_drawn = False
        for i, (label, cols) in enumerate(data.items()):
            ax.plot(
                cols["t"],
                np.degrees(cols["pu_yaw"]),
                color=label_color(label, i),
                label=f"{label} perceived",
            )
            if not init_drawn:
                ax.plot(
                    cols["t"],
                    np.degrees(cols["init_yaw"]),
                    color=REFERENCE_COLOR,
                    linestyle=":",
                    label="initial uncertainty",
                )
                init_drawn = True
        ax.set_xlabel("time [s]")
        ax.set_ylabel("yaw standard deviation [deg]")
        ax.legend()
        fig.tight_layout()
        _save(fig, spec.output)
    return [spec.output]


def _split_output(path: str, suffix: str) -> str:
    stem, dot, ext = path.rpartition(".")
    if not dot:
        return f"{path}_{suffix}"
    return f"{stem}_{suffix}.{ext}"


def plot_rmse(spec: FigureSpec) -> list[str]:
    """Two panels: per-axis position and yaw; RMSE solid, perceived dashed."""
    data = _read_metrics(spec.inputs[0])
    outputs = []
    with plt.rc_context(RC_PARAMS):
        fig, axes = plt.subplots(3, 1, sharex=True, figsize=(6.4, 7.0))
        for i, (label, cols) in enumerate(data.items()):
            color = label_color(label, i)
            for ax, axis in zip(axes, ("x", "y", "z")):
                ax.plot(cols["t"], cols[f"rmse_p{axis}"], color=color,
                        linestyle="-", label=f"{label} RMSE")
                ax.plot(cols["t"], cols[f"pu_p{axis}"], color=color,
                        linestyle="--", label=f"{label} perceived")
                ax.set_ylabel(f"{axis} [m]")
        axes[-1].set_xlabel("time [s]")
        axes[0].legend(ncol=2, fontsize=8)
        fig.tight_layout()
        pos_path = _split_output(spec.output, "position")
        _save(fig, pos_path)
        outputs.append(pos_path)

        fig, ax = plt.subplots()
        for i, (label, cols) in enumerate(data.items()):
            color = label_color(label, i)
            ax.plot(cols["t"], np.degrees(cols["rmse_yaw"]), color=color,
                    linestyle="-", label=f"{label} RMSE")
            ax.plot(cols["t"], np.degrees(cols["pu_yaw"]), color=color,
                    linestyle="--", label=f"{label} perceived")
        ax.set_xlabel("time [s]")
        ax.set_ylabel("yaw [deg]")
        ax.legend()
        fig.tight_layout()
        yaw_path = _split_output(spec.output, "yaw")
        _save(fig, yaw_path)
        outputs.append(yaw_path)
    return outputs


def plot_trajectory(spec: FigureSpec) -> list[str]:
    """Overhead view: field-magnitude map, true square and estimated path."""
    if len(spec.inputs) < 2:
        raise FigureError("trajectory figure needs a trace CSV and a field grid CSV")
    trace_header, trace_rows = _read_csv_columns(
        spec.inputs[0], ["t", "est_px", "est_py", "true_px", "true_py"]
    )
    idx = {name: trace_header.index(name) for name in trace_header}
    est = np.array([[float(r[idx["est_px"]]), float(r[idx["est_py"]])] for r in trace_rows])
    true = np.array([[float(r[idx["true_px"]]), float(r[idx["true_py"]])] for r in trace_rows])

    grid_header, grid_rows = _read_csv_columns(spec.inputs[1], ["x", "y", "bmag"])
    gidx = {name: grid_header.index(name) for name in grid_header}
    gx = np.array([float(r[gidx["x"]]) for r in grid_rows])
    gy = np.array([float(r[gidx["y"]]) for r in grid_rows])
    gb = np.array([float(r[gidx["bmag"]]) for r in grid_rows])
    xs = np.unique(gx)
    ys = np.unique(gy)
    if len(xs) * len(ys) != len(gb):
        raise FigureError(f"{spec.inputs[1]}: not a rectangular grid")
    B = gb.reshape(len(xs), len(ys)).T

    with plt.rc_context(RC_PARAMS):
        fig, ax = plt.subplots(figsize=(6.0, 5.4))
        mesh = ax.pcolormesh(xs, ys, B, cmap=FIELD_COLORMAP, shading="auto",
                             vmin=B.min(), vmax=B.max())
        fig.colorbar(mesh, ax=ax, label="field magnitude [uT]")
        if np.all(np.isfinite(true)):
            ax.plot(true[:, 0], true[:, 1], color="white", linestyle="--", label="true")
        ax.plot(est[:, 0], est[:, 1], color="tab:red", label="estimated")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_aspect("equal")
        ax.legend(loc="upper right")
        fig.tight_layout()
        _save(fig, spec.output)
    return [spec.output]
