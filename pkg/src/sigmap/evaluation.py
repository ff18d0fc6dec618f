"""Measurement ingestion, RSRP binning, baselines, and error statistics.

Binning averages RSRP in the dB domain (interpretation of the direct
measurement-averaging procedure; flagged in the docs). Quartiles use
linear interpolation (numpy's default, type 7).
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .errors import InputDataError
from .geodata import BuildingMap, GeoArea, project_wgs84
from .propagation import PGMap
from .synth import SSMap, SparseSSMap, sample_sparse

RSRP_BOUNDS_DBM = (-160.0, -20.0)
HIST_RANGE_DB = (-30.0, 30.0)
HIST_BIN_DB = 1.0


@dataclass(frozen=True)
class MeasurementRecord:
    timestamp: str  # ISO-8601
    lat: float
    lon: float
    pci: str
    rsrp: float  # dBm
    device: str


@dataclass(frozen=True)
class ErrorStats:
    rmse: float
    median_abs: float
    iqr: float
    histogram: np.ndarray  # signed-error counts, 1 dB bins over [-30, 30]
    n: int


REQUIRED_COLUMNS = ("timestamp", "lat", "lon", "pci", "rsrp_dbm", "device")


def ingest_csv(path) -> tuple[list[MeasurementRecord], int]:
    """Read measurement records; returns (records, rejected_count).

    Rows with unparsable fields, non-finite coordinates, or RSRP outside
    [-160, -20] dBm are skipped and tallied. Missing columns are a hard
    error.
    """
    records: list[MeasurementRecord] = []
    rejected = 0
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise InputDataError(f"{path}: missing columns {missing}")
        for row in reader:
            try:
                datetime.fromisoformat(row["timestamp"])
                lat = float(row["lat"])
                lon = float(row["lon"])
                rsrp = float(row["rsrp_dbm"])
            except (ValueError, TypeError):
                rejected += 1
                continue
            if not (math.isfinite(lat) and math.isfinite(lon)):
                rejected += 1
                continue
            if not RSRP_BOUNDS_DBM[0] <= rsrp <= RSRP_BOUNDS_DBM[1]:
                rejected += 1
                continue
            records.append(
                MeasurementRecord(
                    row["timestamp"], lat, lon, row["pci"], rsrp, row["device"]
                )
            )
    return records, rejected


def bin_measurements(
    records: list[MeasurementRecord],
    area: GeoArea,
    pci: str | None = None,
    device: str | None = None,
) -> SSMap:
    """Average measurements per r x r pixel (dB domain) into an RSRP map.

    Pixels without measurements are masked; records outside the area are
    dropped.
    """
    total = np.zeros((area.grid_y, area.grid_x), dtype=np.float64)
    count = np.zeros((area.grid_y, area.grid_x), dtype=np.int64)
    r = area.resolution
    for rec in records:
        if pci is not None and rec.pci != pci:
            continue
        if device is not None and rec.device != device:
            continue
        x, y = project_wgs84(rec.lat, rec.lon, area)
        if not (0 <= x < area.side_x and 0 <= y < area.side_y):
            continue
        ix = int(x / r)
        iy = int(y / r)
        total[iy, ix] += rec.rsrp
        count[iy, ix] += 1
    mask = count == 0
    with np.errstate(invalid="ignore"):
        grid = np.where(mask, np.nan, total / np.maximum(count, 1)).astype(np.float32)
    return SSMap(grid, mask, area)


def calibrate_offset(pred: SSMap | PGMap, calib: SparseSSMap) -> float:
    """Constant offset minimizing the mean squared residual of the
    prediction against calibration points: the mean residual."""
    if calib.n == 0:
        raise ValueError("calibration set is empty")
    predicted = pred.grid[calib.iy, calib.ix].astype(np.float64)
    if np.any(~np.isfinite(predicted)):
        raise ValueError("calibration points fall on masked prediction pixels")
    return float(np.mean(calib.values - predicted))


def nn_interpolate(sparse: SparseSSMap, area: GeoArea, mask: np.ndarray) -> SSMap:
    """Nearest-sample interpolation baseline: each unmasked pixel takes the
    value of its nearest sample (Euclidean pixel distance, ties to the
    lowest sample index)."""
    if sparse.n == 0:
        raise ValueError("sparse set is empty")
    ys = np.arange(area.grid_y, dtype=np.int64)
    xs = np.arange(area.grid_x, dtype=np.int64)
    gx, gy = np.meshgrid(xs, ys)
    # integer squared distances make ties exact; argmin picks first index
    d2 = (
        (gx[..., None] - sparse.ix[None, None, :]) ** 2
        + (gy[..., None] - sparse.iy[None, None, :]) ** 2
    )
    nearest = np.argmin(d2, axis=-1)
    grid = sparse.values[nearest].astype(np.float32)
    mask = np.asarray(mask, dtype=bool)
    grid[mask] = np.nan
    return SSMap(grid, mask.copy(), area)


def _common_errors(pred: SSMap, truth: SSMap) -> np.ndarray:
    if pred.grid.shape != truth.grid.shape:
        raise ValueError("prediction/truth shape mismatch")
    keep = ~(pred.mask | truth.mask)
    if not keep.any():
        raise ValueError("no common unmasked pixels")
    return (pred.grid[keep] - truth.grid[keep]).astype(np.float64)


def rmse(pred: SSMap, truth: SSMap) -> float:
    """Root-mean-square dB error over pixels unmasked in both maps."""
    err = _common_errors(pred, truth)
    return float(np.sqrt(np.mean(err * err)))


def error_stats(pred: SSMap, truth: SSMap) -> ErrorStats:
    """RMSE, median |error|, IQR of |error|, and the signed-error
    histogram (errors beyond +-30 dB are clipped into the end bins so the
    histogram always sums to the sample count)."""
    err = _common_errors(pred, truth)
    abs_err = np.abs(err)
    q1, q3 = np.percentile(abs_err, [25.0, 75.0])
    lo, hi = HIST_RANGE_DB
    edges = np.arange(lo, hi + HIST_BIN_DB, HIST_BIN_DB)
    clipped = np.clip(err, lo, np.nextafter(hi, lo))
    hist, _ = np.histogram(clipped, bins=edges)
    return ErrorStats(
        rmse=float(np.sqrt(np.mean(err * err))),
        median_abs=float(np.median(abs_err)),
        iqr=float(q3 - q1),
        histogram=hist,
        n=len(err),
    )


def stats_row(pci: str, device: str, method: str, stats: ErrorStats) -> dict:
    return {
        "pci": pci,
        "device": device,
        "method": method,
        "rmse_db": stats.rmse,
        "median_abs_db": stats.median_abs,
        "iqr_db": stats.iqr,
        "n": stats.n,
    }


def evaluate_holdout(
    areas,
    model,
    n_sparse: int,
    seed: int,
    methods: tuple[str, ...] = ("cascaded", "uma_calibrated", "nearest_neighbor"),
) -> dict[str, list[float]]:
    """Per-map masked RMSE of each method on the validation split.

    For every (val area, directional draw): sample ``n_sparse`` outdoor
    points of the true SS map, then predict with the cascaded model, the
    offset-calibrated UMa map, and nearest-neighbor interpolation using
    the same points.
    """
    from . import synth
    from .training import predict_ss

    out: dict[str, list[float]] = {m: [] for m in methods}
    for a in areas:
        if a.split != "val":
            continue
        bmap = a.building_map
        p_uma = a.p_uma_map
        for k in range(synth.DIR_MAPS_PER_AREA):
            truth = a.ss_map(k)
            area_key = zlib.crc32(a.area_id.encode("utf-8"))
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, 0xE7A1, area_key, k, n_sparse])
            )
            sparse = sample_sparse(truth, n_sparse, rng)
            if "cascaded" in methods:
                pred = predict_ss(model, bmap, p_uma, sparse)
                out["cascaded"].append(rmse(pred, truth))
            if "uma_calibrated" in methods:
                offset = calibrate_offset(p_uma, sparse)
                uma_ss = SSMap(p_uma.grid + np.float32(offset), p_uma.mask, a.area)
                out["uma_calibrated"].append(rmse(uma_ss, truth))
            if "nearest_neighbor" in methods:
                nn = nn_interpolate(sparse, a.area, truth.mask)
                out["nearest_neighbor"].append(rmse(nn, truth))
    return out
