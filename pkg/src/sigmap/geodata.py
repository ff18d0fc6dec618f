"""Building-footprint ingestion, projection, rasterization, and extrusion.

Local frame: x east, y north, z up, meters, origin at the southwest corner
of the area. ``grid[iy, ix]`` has row 0 at the southern edge; pixel centers
sit at ``((ix + 0.5) * r, (iy + 0.5) * r)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InputDataError

EARTH_RADIUS_M = 6_371_008.8

DEFAULT_FLOOR_HEIGHT_M = 3.0
DEFAULT_BUILDING_HEIGHT_M = 8.0


@dataclass(frozen=True)
class GeoArea:
    """Square analysis area: geographic origin (SW corner) plus raster size."""

    origin_lat: float = 0.0
    origin_lon: float = 0.0
    side_x: float = 512.0
    side_y: float = 512.0
    grid_x: int = 128
    grid_y: int = 128

    def __post_init__(self):
        rx = self.side_x / self.grid_x
        ry = self.side_y / self.grid_y
        if not (rx > 0 and ry > 0) or abs(rx - ry) > 1e-9:
            raise ValueError(f"anisotropic or nonpositive resolution: {rx} x {ry}")

    @property
    def resolution(self) -> float:
        """Pixel edge length r in meters."""
        return self.side_x / self.grid_x

    @property
    def center(self) -> tuple[float, float]:
        return (self.side_x / 2.0, self.side_y / 2.0)

    def pixel_center(self, ix: int, iy: int) -> tuple[float, float]:
        r = self.resolution
        return ((ix + 0.5) * r, (iy + 0.5) * r)


@dataclass(frozen=True)
class Material:
    """Electromagnetic surface material."""

    relative_permittivity: float
    conductivity: float  # S/m

    def __post_init__(self):
        if not self.relative_permittivity > 1.0:
            raise ValueError("relative permittivity must exceed 1")
        if self.conductivity < 0.0:
            raise ValueError("conductivity must be >= 0")


# ITU-R P.2040 concrete constants evaluated at 3.66 GHz.
CONCRETE = Material(relative_permittivity=5.24, conductivity=0.0462)


@dataclass
class Footprint:
    """One building outline in the local frame, counter- or clockwise."""

    polygon: np.ndarray  # (n, 2) float64 meters
    height: float
    material_id: str = "concrete"

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=np.float64)
        if self.polygon.ndim != 2 or self.polygon.shape[1] != 2 or len(self.polygon) < 3:
            raise ValueError("polygon needs at least 3 (x, y) vertices")
        if not self.height > 0:
            raise ValueError("footprint height must be positive")


@dataclass
class BuildingMap:
    """Per-pixel building heights in meters; 0 marks open ground."""

    grid: np.ndarray  # (grid_y, grid_x) float32
    area: GeoArea

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.shape != (self.area.grid_y, self.area.grid_x):
            raise ValueError(
                f"grid shape {self.grid.shape} does not match area "
                f"({self.area.grid_y}, {self.area.grid_x})"
            )
        if not np.all(np.isfinite(self.grid)) or np.any(self.grid < 0):
            raise ValueError("building heights must be finite and >= 0")

    @property
    def building_mask(self) -> np.ndarray:
        return self.grid > 0

    @property
    def max_height(self) -> float:
        return float(self.grid.max())


@dataclass
class Wall:
    """Vertical rectangular facet: ground segment plus height."""

    x1: float
    y1: float
    x2: float
    y2: float
    height: float
    material_id: str = "concrete"


@dataclass
class ExtrudedScene:
    """2.5-D scene: vertical walls, flat rooftops, material table."""

    walls: list[Wall] = field(default_factory=list)
    rooftops: list[tuple[np.ndarray, float]] = field(default_factory=list)
    materials: dict[str, Material] = field(default_factory=lambda: {"concrete": CONCRETE})

    def wall_arrays(self):
        """Pack walls for the ray kernel.

        Returns (segments (n,5) float64 [x1,y1,x2,y2,height],
        material_index (n,) int32, eps_r (m,), sigma (m,)).
        """
        ids = sorted(self.materials.keys())
        index = {mid: i for i, mid in enumerate(ids)}
        n = len(self.walls)
        seg = np.zeros((n, 5), dtype=np.float64)
        mat = np.zeros(n, dtype=np.int32)
        for i, w in enumerate(self.walls):
            seg[i] = (w.x1, w.y1, w.x2, w.y2, w.height)
            mat[i] = index.get(w.material_id, index["concrete"])
        eps = np.array([self.materials[m].relative_permittivity for m in ids])
        sig = np.array([self.materials[m].conductivity for m in ids])
        return seg, mat, eps, sig


def project_wgs84(lat: float, lon: float, area: GeoArea) -> tuple[float, float]:
    """Project WGS-84 degrees onto the local tangent plane (equirectangular
    about the area origin). Accurate to well under 0.1 m over a 512 m tile
    for |lat| < 70 deg.
    """
    if abs(lat) >= 89.0:
        raise ValueError("latitude too close to the poles for this projection")
    lat0 = math.radians(area.origin_lat)
    x = EARTH_RADIUS_M * math.cos(lat0) * math.radians(lon - area.origin_lon)
    y = EARTH_RADIUS_M * math.radians(lat - area.origin_lat)
    return x, y


def _feature_height(props: dict) -> float:
    if "height_m" in props:
        return float(props["height_m"])
    if "levels" in props:
        return float(props["levels"]) * DEFAULT_FLOOR_HEIGHT_M
    return DEFAULT_BUILDING_HEIGHT_M


def parse_footprints(document: bytes | str, area: GeoArea) -> tuple[list[Footprint], int]:
    """Read building footprints from a GeoJSON FeatureCollection.

    Heights come from the ``height_m`` property, else ``levels`` x 3 m,
    else 8 m. Returns (footprints, rejected_count); a feature is rejected
    when it is not a Polygon or has fewer than 3 distinct vertices.
    """
    if isinstance(document, bytes):
        document = document.decode("utf-8")
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise InputDataError(f"GeoJSON parse error at byte offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise InputDataError("document is not a GeoJSON FeatureCollection")

    footprints: list[Footprint] = []
    rejected = 0
    for feature in doc.get("features", []):
        geom = feature.get("geometry") or {}
        if geom.get("type") != "Polygon":
            rejected += 1
            continue
        rings = geom.get("coordinates") or []
        if not rings:
            rejected += 1
            continue
        exterior = rings[0]  # interior rings (holes) are ignored
        pts = [project_wgs84(lat, lon, area) for lon, lat in exterior]
        if len(pts) > 1 and pts[0] == pts[-1]:
            pts = pts[:-1]
        if len(pts) < 3:
            rejected += 1
            continue
        props = feature.get("properties") or {}
        try:
            height = _feature_height(props)
        except (TypeError, ValueError):
            rejected += 1
            continue
        if height <= 0:
            rejected += 1
            continue
        material = str(props.get("material", "concrete"))
        footprints.append(Footprint(np.array(pts), height, material))
    return footprints, rejected


def rasterize(footprints: list[Footprint], area: GeoArea) -> BuildingMap:
    """Burn footprints into a height grid: pixel value is the max height of
    the footprints containing the pixel center, 0 when none. Footprints
    outside the bounds are clipped silently.
    """
    grid = np.zeros((area.grid_y, area.grid_x), dtype=np.float32)
    if footprints:
        xs = np.concatenate([f.polygon[:, 0] for f in footprints])
        ys = np.concatenate([f.polygon[:, 1] for f in footprints])
        offsets = np.zeros(len(footprints) + 1, dtype=np.int64)
        np.cumsum([len(f.polygon) for f in footprints], out=offsets[1:])
        heights = np.array([f.height for f in footprints], dtype=np.float32)
        kernels.rasterize_heights(grid, xs, ys, offsets, heights, area.resolution)
    return BuildingMap(grid, area)


def building_ratio(bmap: BuildingMap) -> float:
    """Fraction of pixels covered by buildings, in [0, 1]."""
    return float(np.count_nonzero(bmap.grid > 0)) / bmap.grid.size


def extrude(
    footprints: list[Footprint], materials: dict[str, Material] | None = None
) -> ExtrudedScene:
    """Turn footprints into a 2.5-D scene: one wall per polygon edge at the
    footprint height plus a flat rooftop polygon. Unknown material ids fall
    back to concrete.
    """
    table = {"concrete": CONCRETE}
    if materials:
        table.update(materials)
    walls: list[Wall] = []
    rooftops: list[tuple[np.ndarray, float]] = []
    for fp in footprints:
        if fp.material_id not in table:
            table[fp.material_id] = CONCRETE
        poly = fp.polygon
        n = len(poly)
        for i in range(n):
            x1, y1 = poly[i]
            x2, y2 = poly[(i + 1) % n]
            walls.append(Wall(x1, y1, x2, y2, fp.height, fp.material_id))
        rooftops.append((poly.copy(), fp.height))
    return ExtrudedScene(walls=walls, rooftops=rooftops, materials=table)


def walls_from_building_map(bmap: BuildingMap) -> ExtrudedScene:
    """Approximate scene for raster-only inputs: every boundary between a
    building pixel and lower ground becomes an axis-aligned wall at the
    pixel height. Exact footprints (``extrude``) are preferred when
    available.
    """
    grid = bmap.grid
    r = bmap.area.resolution
    ny, nx = grid.shape
    walls: list[Wall] = []
    for iy in range(ny):
        for ix in range(nx):
            h = float(grid[iy, ix])
            if h <= 0:
                continue
            x0, y0 = ix * r, iy * r
            x1, y1 = x0 + r, y0 + r
            if ix == 0 or grid[iy, ix - 1] < h:
                walls.append(Wall(x0, y0, x0, y1, h))
            if ix == nx - 1 or grid[iy, ix + 1] < h:
                walls.append(Wall(x1, y0, x1, y1, h))
            if iy == 0 or grid[iy - 1, ix] < h:
                walls.append(Wall(x0, y0, x1, y0, h))
            if iy == ny - 1 or grid[iy + 1, ix] < h:
                walls.append(Wall(x0, y1, x1, y1, h))
    return ExtrudedScene(walls=walls)
