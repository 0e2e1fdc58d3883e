"""CSV dataset formats shared by the simulator export and the ingestion path.

Files are comma-separated UTF-8 with a mandatory header row:

* ``imu.csv``: ``t,ax,ay,az,gx,gy,gz`` (s, m/s^2, rad/s)
* ``mag.csv``: ``t`` then 3m readings ``m<i>_x,m<i>_y,m<i>_z`` per sensor,
  microtesla, in array sensor order
* ``gt.csv``: ``t,px,py,pz,qw,qx,qy,qz`` (s, m, unit quaternion)
"""

from __future__ import annotations

import csv

import numpy as np

__all__ = [
    "DataFormatError",
    "write_imu_csv",
    "write_mag_csv",
    "write_gt_csv",
    "read_imu_csv",
    "read_mag_csv",
    "read_gt_csv",
]

IMU_HEADER = ["t", "ax", "ay", "az", "gx", "gy", "gz"]
GT_HEADER = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz"]


class DataFormatError(ValueError):
    """Malformed dataset file; carries the offending line number."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def write_imu_csv(path, t, accel, gyro) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(IMU_HEADER)
        for k in range(len(t)):
            w.writerow([_fmt(t[k])] + [_fmt(v) for v in accel[k]] + [_fmt(v) for v in gyro[k]])


def write_mag_csv(path, t, mag) -> None:
    m = mag.shape[1] // 3
    header = ["t"]
    for i in range(m):
        header += [f"m{i}_x", f"m{i}_y", f"m{i}_z"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(t)):
            w.writerow([_fmt(t[k])] + [_fmt(v) for v in mag[k]])


def write_gt_csv(path, t, p, q) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(GT_HEADER)
        for k in range(len(t)):
            w.writerow([_fmt(t[k])] + [_fmt(v) for v in p[k]] + [_fmt(v) for v in q[k]])


def _read_numeric_csv(path, expected_width=None, expected_header=None):
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(path, 1, "missing header row") from None
        if expected_header is not None and [h.strip() for h in header] != expected_header:
            raise DataFormatError(path, 1, f"expected header {','.join(expected_header)}")
        width = expected_width if expected_width is not None else len(header)
        if len(header) != width:
            raise DataFormatError(path, 1, f"expected {width} columns, found {len(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataFormatError(path, lineno, f"expected {width} values, found {len(row)}")
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                raise DataFormatError(path, lineno, "non-numeric value") from None
    if not rows:
        raise DataFormatError(path, 2, "no data rows")
    return np.array(rows)


def read_imu_csv(path):
    data = _read_numeric_csv(path, expected_header=IMU_HEADER)
    _check_monotonic(path, data[:, 0])
    return data[:, 0], data[:, 1:4], data[:, 4:7]


def read_mag_csv(path):
    data = _read_numeric_csv(path)
    if (data.shape[1] - 1) % 3 != 0 or data.shape[1] < 4:
        raise DataFormatError(path, 1, "reading columns must come in xyz triplets")
    _check_monotonic(path, data[:, 0])
    return data[:, 0], data[:, 1:]


def read_gt_csv(path):
    data = _read_numeric_csv(path, expected_header=GT_HEADER)
    _check_monotonic(path, data[:, 0])
    q = data[:, 4:8]
    norms = np.linalg.norm(q, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise DataFormatError(path, int(np.argmax(np.abs(norms - 1.0))) + 2, "non-unit quaternion")
    return data[:, 0], data[:, 1:4], q / norms[:, None]


def _check_monotonic(path, t):
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if bad.size:
        raise DataFormatError(path, int(bad[0]) + 3, "timestamps must be strictly increasing")
