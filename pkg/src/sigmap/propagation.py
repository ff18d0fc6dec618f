"""Closed-form path-gain models, antenna patterns, and the UMa map builder.

Path gain (PG) is the negative of path loss, in dB. Every model follows
the published form exactly; watch the units, they differ per model:

    friis_pg(d [km], f [MHz])
    uma_los_pg / uma_nlos_pg(d [m], f [GHz], heights [m])
    ericsson_pg(d [km], f [MHz], heights [m])
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geodata import BuildingMap, GeoArea

SPEED_OF_LIGHT = 299_792_458.0  # m/s, exact


@dataclass(frozen=True)
class AntennaSpec:
    """Isotropic or synthesized directional pattern.

    The directional pattern is the parabolic-sum form used by 3GPP-style
    sector antennas: gain drops 12*(offset/hpbw)^2 dB per plane, floored
    ``front_to_back`` dB below boresight.
    """

    kind: str = "isotropic"  # "isotropic" | "directional"
    boresight_gain: float = 6.3  # dBi
    hpbw_az: float = 65.0  # degrees
    hpbw_el: float = 8.0  # degrees
    front_to_back: float = 30.0  # dB

    def __post_init__(self):
        if self.kind not in ("isotropic", "directional"):
            raise ValueError(f"unknown antenna kind: {self.kind!r}")


@dataclass(frozen=True)
class CellConfig:
    """Transmitter geometry and radio parameters for one cell."""

    carrier_freq: float = 3.66e9  # Hz
    tx_height: float = 25.0  # m
    rx_height: float = 2.0  # m
    position: tuple[float, float] | None = None  # local meters; None = area center
    azimuth: float = 0.0  # degrees clockwise from north
    downtilt: float = 0.0  # degrees below horizon
    antenna: AntennaSpec = field(default_factory=AntennaSpec)

    def __post_init__(self):
        if not self.carrier_freq > 0:
            raise ValueError("carrier frequency must be positive")
        if not self.tx_height > self.rx_height > 0:
            raise ValueError("need tx_height > rx_height > 0")

    def position_in(self, area: GeoArea) -> tuple[float, float]:
        return self.position if self.position is not None else area.center

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq


@dataclass
class PGMap:
    """Path-gain raster in dB with a building mask (True = excluded)."""

    grid: np.ndarray  # float32 dB, NaN at masked pixels
    mask: np.ndarray  # bool, True where the pixel is a building
    area: GeoArea

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.grid.shape != self.mask.shape:
            raise ValueError("grid/mask shape mismatch")
        if not np.all(np.isfinite(self.grid[~self.mask])):
            raise ValueError("unmasked path-gain values must be finite")


def friis_pg(d_km: float, f_mhz: float) -> float:
    """Free-space path gain: -(32.45 + 20 log10 d + 20 log10 f)."""
    if d_km <= 0 or f_mhz <= 0:
        raise ValueError("distance and frequency must be positive")
    return -(32.45 + 20.0 * math.log10(d_km) + 20.0 * math.log10(f_mhz))


def uma_breakpoint(h_tx: float, h_rx: float, f_hz: float) -> float:
    """UMa breakpoint distance 4 (h_tx-1)(h_rx-1) f / c in meters."""
    if h_tx <= 1.0 or h_rx <= 1.0:
        raise ValueError("antenna heights must exceed 1 m")
    return 4.0 * (h_tx - 1.0) * (h_rx - 1.0) * f_hz / SPEED_OF_LIGHT


def uma_los_pg(d_m: float, f_ghz: float, h_tx: float, h_rx: float) -> float:
    """3GPP urban-macro LOS path gain, dual slope around the breakpoint."""
    if d_m <= 0:
        raise ValueError("distance must be positive")
    d_bp = uma_breakpoint(h_tx, h_rx, f_ghz * 1e9)
    if d_m < d_bp:
        pl = 28.0 + 22.0 * math.log10(d_m) + 20.0 * math.log10(f_ghz)
    else:
        pl = (
            28.0
            + 40.0 * math.log10(d_m)
            + 20.0 * math.log10(f_ghz)
            - 9.0 * math.log10(d_bp * d_bp + (h_tx - h_rx) ** 2)
        )
    return -pl


def uma_nlos_pg(d_m: float, f_ghz: float, h_tx: float, h_rx: float) -> float:
    """3GPP urban-macro NLOS path gain: min(LOS, NLOS') in dB."""
    los = uma_los_pg(d_m, f_ghz, h_tx, h_rx)
    nlos = -(
        13.45
        + 39.08 * math.log10(d_m)
        + 20.0 * math.log10(f_ghz)
        - 0.6 * (h_rx - 1.5)
    )
    return min(los, nlos)


def ericsson_pg(
    d_km: float, f_mhz: float, h_tx: float, h_rx: float
) -> float:
    """Ericsson (modified Okumura-Hata) path gain with urban coefficients
    a0..a3 = 36.2, 30.2, 12, 0.1."""
    if d_km <= 0 or f_mhz <= 0 or h_tx <= 0 or h_rx <= 0:
        raise ValueError("all inputs must be positive")
    a0, a1, a2, a3 = 36.2, 30.2, 12.0, 0.1
    lf = math.log10(f_mhz)
    g_f = 44.49 * lf - 4.78 * lf * lf
    pl = (
        a0
        + a1 * math.log10(d_km)
        + a2 * math.log10(h_tx)
        + a3 * math.log10(h_tx) * math.log10(d_km)
        - 3.2 * math.log10(11.75 * h_rx) ** 2
        + g_f
    )
    return -pl


def antenna_gain(spec: AntennaSpec, az_off: float, el_off: float) -> float:
    """Gain in dBi toward an (azimuth, elevation) offset from boresight."""
    if spec.kind == "isotropic":
        return 0.0
    atten = 12.0 * (az_off / spec.hpbw_az) ** 2 + 12.0 * (el_off / spec.hpbw_el) ** 2
    return spec.boresight_gain - min(atten, spec.front_to_back)


def antenna_gain_direction(
    spec: AntennaSpec, cell: CellConfig, dx: float, dy: float, dz: float
) -> float:
    """Gain toward the (dx, dy, dz) direction, applying the cell's azimuth
    and downtilt as a rigid rotation of the boresight."""
    if spec.kind == "isotropic":
        return 0.0
    horiz = math.hypot(dx, dy)
    az = math.degrees(math.atan2(dx, dy))  # clockwise from north
    el = math.degrees(math.atan2(dz, horiz))
    az_off = (az - cell.azimuth + 180.0) % 360.0 - 180.0
    el_off = el + cell.downtilt
    return antenna_gain(spec, az_off, el_off)


def los_test(
    bmap: BuildingMap, tx: tuple[float, float, float], rx: tuple[float, float, float]
) -> bool:
    """True when the 3-D segment tx->rx clears every traversed building
    pixel (grid DDA, height compared at the pixel-interval midpoint)."""
    return bool(
        kernels.segment_is_clear(
            bmap.grid, bmap.area.resolution, tx[0], tx[1], tx[2], rx[0], rx[1], rx[2]
        )
    )


def uma_pg_map(bmap: BuildingMap, cell: CellConfig, mode: str = "auto") -> PGMap:
    """UMa path-gain map over the area.

    mode "auto" switches LOS/NLOS per pixel via the building-map LOS test;
    "los"/"nlos" force one branch everywhere. Antenna gains are not
    included (pure channel model). Building pixels are masked.
    """
    if mode not in ("auto", "los", "nlos"):
        raise ValueError(f"unknown mode {mode!r}")
    area = bmap.area
    tx_x, tx_y = cell.position_in(area)
    f_ghz = cell.carrier_freq / 1e9
    r = area.resolution
    ys = (np.arange(area.grid_y) + 0.5) * r
    xs = (np.arange(area.grid_x) + 0.5) * r
    gx, gy = np.meshgrid(xs, ys)
    d3 = np.sqrt(
        (gx - tx_x) ** 2 + (gy - tx_y) ** 2 + (cell.tx_height - cell.rx_height) ** 2
    )
    if mode == "auto":
        los = kernels.los_map(bmap.grid, r, tx_x, tx_y, cell.tx_height, cell.rx_height)
    elif mode == "los":
        los = np.ones_like(bmap.grid, dtype=bool)
    else:
        los = np.zeros_like(bmap.grid, dtype=bool)

    # vectorized versions of uma_los_pg / uma_nlos_pg (per-pixel equality
    # with the scalar functions is covered by tests)
    d_bp = uma_breakpoint(cell.tx_height, cell.rx_height, cell.carrier_freq)
    log_d = np.log10(d3)
    lf = 20.0 * math.log10(f_ghz)
    far_corr = 9.0 * math.log10(d_bp * d_bp + (cell.tx_height - cell.rx_height) ** 2)
    los_pg = np.where(
        d3 < d_bp,
        -(28.0 + 22.0 * log_d + lf),
        -(28.0 + 40.0 * log_d + lf - far_corr),
    )
    nlos_pg = np.minimum(
        los_pg,
        -(13.45 + 39.08 * log_d + lf - 0.6 * (cell.rx_height - 1.5)),
    )
    grid = np.where(los, los_pg, nlos_pg).astype(np.float32)
    mask = bmap.building_mask
    grid[mask] = np.nan
    return PGMap(grid, mask, area)
