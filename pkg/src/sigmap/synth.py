"""Synthetic dataset machinery: link-budget SS maps, sparse sampling,
D4 augmentation, train/val splitting, the binary grid format, and the
seeded procedural area generator used for desk-scale runs.

Normalization used across the package (declared, not derived):
dB/dBm grids map through (x + 150) / 110 (so [-150, -40] -> [0, 1]);
building heights divide by 40 m.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputDataError
from .geodata import BuildingMap, Footprint, GeoArea, building_ratio, rasterize
from .propagation import PGMap

GRID_MAGIC = b"SIGMAPGRID\x00v1\x00\x00\x00"

NORM_OFFSET_DB = 150.0
NORM_SCALE_DB = 110.0
HEIGHT_SCALE_M = 40.0
SPARSE_CLAMP = (0.0, 1.5)


def norm_db(x):
    """Map dB/dBm values into network units: (x + 150) / 110."""
    return (x + NORM_OFFSET_DB) / NORM_SCALE_DB


def denorm_db(x):
    return x * NORM_SCALE_DB - NORM_OFFSET_DB


def norm_height(h):
    return h / HEIGHT_SCALE_M


@dataclass(frozen=True)
class LinkBudgetDraw:
    """Scalar terms of S = P_TX + G_TX + PG + G_RX - IL."""

    p_tx: float  # dBm
    g_tx: float  # dB
    g_rx: float  # dB
    il: float  # dB

    @property
    def total_offset(self) -> float:
        return self.p_tx + self.g_tx + self.g_rx - self.il


@dataclass
class SSMap:
    """Signal-strength raster in dBm; mask True = excluded pixel."""

    grid: np.ndarray
    mask: np.ndarray
    area: GeoArea

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.grid.shape != self.mask.shape:
            raise ValueError("grid/mask shape mismatch")


@dataclass
class SparseSSMap:
    """Point samples (ix, iy, value dBm) from distinct outdoor pixels."""

    ix: np.ndarray
    iy: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.ix = np.asarray(self.ix, dtype=np.int64)
        self.iy = np.asarray(self.iy, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if not (len(self.ix) == len(self.iy) == len(self.values)):
            raise ValueError("sparse arrays must have equal length")

    @property
    def n(self) -> int:
        return len(self.values)


@dataclass
class ManifestEntry:
    area_id: str
    split: str  # "train" | "val"
    files: dict[str, str] = field(default_factory=dict)


@dataclass
class DatasetManifest:
    version: int
    seed: int
    entries: list[ManifestEntry]

    def to_json(self) -> str:
        payload = {
            "version": self.version,
            "seed": self.seed,
            "entries": [
                {"area_id": e.area_id, "split": e.split, "files": e.files}
                for e in self.entries
            ],
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        entries = [
            ManifestEntry(e["area_id"], e["split"], dict(e["files"]))
            for e in doc["entries"]
        ]
        return cls(int(doc["version"]), int(doc["seed"]), entries)


def apply_link_budget(pg: PGMap, draw: LinkBudgetDraw) -> SSMap:
    """Turn a path-gain map into a signal-strength map (dB arithmetic)."""
    grid = pg.grid + np.float32(draw.total_offset)
    return SSMap(grid, pg.mask.copy(), pg.area)


def draw_link_budget(rng: np.random.Generator) -> LinkBudgetDraw:
    """Independent uniform draws: P_TX ~ U(10, 35) dBm, G_TX and G_RX ~
    U(10, 20) dB, IL ~ U(-10, 10) dB."""
    return LinkBudgetDraw(
        p_tx=float(rng.uniform(10.0, 35.0)),
        g_tx=float(rng.uniform(10.0, 20.0)),
        g_rx=float(rng.uniform(10.0, 20.0)),
        il=float(rng.uniform(-10.0, 10.0)),
    )


def sample_sparse(ss: SSMap, n: int, rng: np.random.Generator) -> SparseSSMap:
    """Uniformly sample n distinct outdoor pixels of a signal map."""
    iy_all, ix_all = np.nonzero(~ss.mask)
    n_outdoor = len(ix_all)
    if not 1 <= n <= n_outdoor:
        raise ValueError(f"n must be in [1, {n_outdoor}] (outdoor pixel count), got {n}")
    pick = rng.choice(n_outdoor, size=n, replace=False)
    ix = ix_all[pick]
    iy = iy_all[pick]
    return SparseSSMap(ix, iy, ss.grid[iy, ix].astype(np.float64))


def encode_sparse_channel(sparse: SparseSSMap, area: GeoArea) -> np.ndarray:
    """Sparse network input channel: normalized values at sampled pixels
    (clamped to [0, 1.5]) and 0 elsewhere."""
    grid = np.zeros((area.grid_y, area.grid_x), dtype=np.float32)
    vals = np.clip(norm_db(sparse.values), *SPARSE_CLAMP)
    grid[sparse.iy, sparse.ix] = vals.astype(np.float32)
    return grid


def augment(grids: np.ndarray | list[np.ndarray], variant: int):
    """Apply one of the 8 square symmetries (D4) to each grid identically.

    variant = k + 4*m: k quarter-turns counterclockwise, then a horizontal
    mirror when m = 1. Accepts one array or a list; trailing two axes must
    be square.
    """
    if not 0 <= variant <= 7:
        raise ValueError("variant must be in 0..7")

    def one(g: np.ndarray) -> np.ndarray:
        if g.shape[-1] != g.shape[-2]:
            raise ValueError("augmentation requires square grids")
        out = np.rot90(g, k=variant % 4, axes=(-2, -1))
        if variant >= 4:
            out = np.flip(out, axis=-1)
        return np.ascontiguousarray(out)

    if isinstance(grids, np.ndarray):
        return one(grids)
    return [one(g) for g in grids]


def split_dataset(entries: list[ManifestEntry], seed: int, ratio: float = 0.8):
    """Assign train/val splits in place: seeded shuffle, then the last
    floor((1-ratio) * n) entries become validation."""
    if not entries:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117]))
    order = rng.permutation(len(entries))
    n_val = int(math.floor(len(entries) * (1.0 - ratio) + 1e-9))
    val_ids = set(order[len(entries) - n_val:].tolist())
    for i, e in enumerate(entries):
        e.split = "val" if i in val_ids else "train"
    return entries


# -- grid file format ---------------------------------------------------
#
# 16-byte magic, u32 LE header length, UTF-8 JSON header
# {width, height, resolution_m, kind, units}, then height*width
# little-endian float32 in row-major order; masked pixels are quiet NaN.


def save_grid(path, grid: np.ndarray, mask: np.ndarray | None, area: GeoArea,
              kind: str, units: str) -> None:
    grid = np.asarray(grid, dtype=np.float32)
    data = grid.copy()
    if mask is not None:
        data[np.asarray(mask, dtype=bool)] = np.nan
    if not np.all(np.isfinite(data) | np.isnan(data)):
        raise ValueError("grid contains non-finite unmasked values")
    header = json.dumps(
        {
            "width": int(grid.shape[1]),
            "height": int(grid.shape[0]),
            "resolution_m": area.resolution,
            "kind": kind,
            "units": units,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(data.astype("<f4").tobytes(order="C"))


def load_grid(path):
    """Read a grid file; returns (grid float32 with NaN at masked pixels,
    mask bool, header dict). Truncated or malformed files raise
    InputDataError without returning partial data."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(GRID_MAGIC) + 4 or not blob.startswith(GRID_MAGIC):
        raise InputDataError(f"{path}: not a sigmap grid file (bad magic)")
    off = len(GRID_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + hlen:
        raise InputDataError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
        width = int(header["width"])
        height = int(header["height"])
    except (ValueError, KeyError) as exc:
        raise InputDataError(f"{path}: malformed header: {exc}") from exc
    off += hlen
    need = width * height * 4
    if len(blob) - off != need:
        raise InputDataError(
            f"{path}: payload size mismatch ({len(blob) - off} bytes, expected {need})"
        )
    grid = np.frombuffer(blob[off:], dtype="<f4").reshape(height, width).copy()
    mask = np.isnan(grid)
    return grid, mask, header


def save_sparse_csv(path, sparse: SparseSSMap) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ix,iy,value_dbm\n")
        for ix, iy, v in zip(sparse.ix, sparse.iy, sparse.values):
            fh.write(f"{int(ix)},{int(iy)},{float(v)!r}\n")


def load_sparse_csv(path) -> SparseSSMap:
    ixs, iys, vals = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "ix,iy,value_dbm":
            raise InputDataError(f"{path}: expected header 'ix,iy,value_dbm'")
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise InputDataError(f"{path}:{line_no}: expected 3 columns")
            ixs.append(int(parts[0]))
            iys.append(int(parts[1]))
            vals.append(float(parts[2]))
    return SparseSSMap(np.array(ixs), np.array(iys), np.array(vals))


def generate_procedural_footprints(seed: int, area: GeoArea | None = None):
    """Seeded random axis-aligned rectangles: 10-40 initial rectangles with
    16-80 m sides and 6-40 m heights, adding more until the rasterized
    building ratio reaches 0.2. Returns (footprints, building_map)."""
    area = area or GeoArea()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA12EA]))
    footprints: list[Footprint] = []

    def add_rect():
        w = rng.uniform(16.0, 80.0)
        h = rng.uniform(16.0, 80.0)
        x0 = rng.uniform(0.0, area.side_x - w)
        y0 = rng.uniform(0.0, area.side_y - h)
        height = rng.uniform(6.0, 40.0)
        poly = np.array(
            [[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]]
        )
        footprints.append(Footprint(poly, float(height)))

    for _ in range(int(rng.integers(10, 41))):
        add_rect()
    bmap = rasterize(footprints, area)
    while building_ratio(bmap) < 0.2:
        add_rect()
        bmap = rasterize(footprints, area)
    return footprints, bmap


def generate_procedural_area(seed: int, area: GeoArea | None = None) -> BuildingMap:
    """Building map of a seeded procedural area (ratio >= 0.2)."""
    return generate_procedural_footprints(seed, area)[1]


def checksum(path) -> int:
    """CRC32 of a file, for byte-level reproducibility checks."""
    with open(path, "rb") as fh:
        return zlib.crc32(fh.read())


# -- dataset assembly ---------------------------------------------------

DIR_MAPS_PER_AREA = 4
DATASET_VERSION = 1


def build_dataset(
    out_dir,
    n_areas: int,
    seed: int,
    n_rays: int = 100_000,
    area: GeoArea | None = None,
    downtilt: float = 10.0,
) -> DatasetManifest:
    """Generate a full synthetic dataset: per area one building map, the
    UMa map, one isotropic traced map, four directional traced maps with
    uniform random azimuths, and four link-budget SS maps. Deterministic
    per seed; files are written atomically and the manifest last."""
    from .propagation import AntennaSpec, CellConfig, uma_pg_map
    from .raytracer import RtConfig, trace_pg_map
    from .geodata import extrude

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    area = area or GeoArea()
    entries: list[ManifestEntry] = []
    for i in range(n_areas):
        area_id = f"area{i:04d}"
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A, i]))
        footprints, bmap = generate_procedural_footprints(
            int(rng.integers(0, 2**31)), area
        )
        scene = extrude(footprints)
        tx_height = bmap.max_height + 5.0
        files: dict[str, str] = {}

        def put(name, grid, mask, kind, units):
            fname = f"{area_id}_{name}.grd"
            tmp = out_dir / (fname + ".tmp")
            save_grid(tmp, grid, mask, area, kind, units)
            tmp.replace(out_dir / fname)
            files[name] = fname

        put("b", bmap.grid, None, "building", "m")

        cell_iso = CellConfig(
            tx_height=tx_height, antenna=AntennaSpec(kind="isotropic")
        )
        p_uma = uma_pg_map(bmap, cell_iso)
        put("p_uma", p_uma.grid, p_uma.mask, "pg", "dB")

        cfg = RtConfig(n_rays=n_rays, seed=int(rng.integers(0, 2**31)))
        p_iso = trace_pg_map(scene, bmap, cell_iso, cfg)
        put("p_iso", p_iso.grid, p_iso.mask, "pg", "dB")

        for k in range(DIR_MAPS_PER_AREA):
            azimuth = float(rng.uniform(0.0, 360.0))
            cell_dir = CellConfig(
                tx_height=tx_height,
                azimuth=azimuth,
                downtilt=downtilt,
                antenna=AntennaSpec(kind="directional"),
            )
            cfg_k = RtConfig(n_rays=n_rays, seed=int(rng.integers(0, 2**31)))
            p_dir = trace_pg_map(scene, bmap, cell_dir, cfg_k)
            put(f"p_dir{k}", p_dir.grid, p_dir.mask, "pg", "dB")
            ss = apply_link_budget(p_dir, draw_link_budget(rng))
            put(f"s{k}", ss.grid, ss.mask, "ss", "dBm")
        entries.append(ManifestEntry(area_id, "train", files))

    split_dataset(entries, seed)
    manifest = DatasetManifest(DATASET_VERSION, seed, entries)
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(manifest.to_json(), encoding="utf-8")
    tmp.replace(out_dir / "manifest.json")
    return manifest
