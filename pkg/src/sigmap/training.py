"""Two-stage training of the cascaded model and full-map prediction.

Stage 1 fits the isotropic-PG net on [building map; UMa map] -> traced
isotropic PG. Stage 2 freezes it, precomputes its predictions, and fits
the signal-strength net on [building map; predicted PG; sparse SS channel]
-> SS map, resampling the sparse channel (N ~ Unif[1, 200]) for every area
in every epoch. Both stages keep the parameter set with the lowest
validation loss. A random D4 variant per sample per epoch provides the
8-fold rotation/mirror augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import synth
from .backend import single_threaded_blas
from .geodata import BuildingMap, GeoArea
from .propagation import PGMap
from .synth import (
    DatasetManifest,
    SparseSSMap,
    SSMap,
    augment,
    encode_sparse_channel,
    load_grid,
    norm_db,
    norm_height,
    sample_sparse,
)
from .unet import CascadedModel, UNet, UNetConfig

N_SPARSE_TRAIN_MAX = 200
N_SPARSE_VALIDATION = 100


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4  # paper-scale runs use 64
    epochs: int = 30  # paper-scale runs use 200
    seed: int = 0
    base_channels: int = 8  # paper-scale runs use 64

    def __post_init__(self):
        if min(self.batch_size, self.epochs, self.base_channels) < 1:
            raise ValueError("counts must be positive")


@dataclass
class AreaData:
    """All grids of one dataset area, as stored (dB/dBm, NaN at masks)."""

    area_id: str
    split: str
    area: GeoArea
    building: np.ndarray
    p_uma: np.ndarray
    p_iso: np.ndarray
    p_dir: list[np.ndarray]
    ss: list[np.ndarray]
    mask: np.ndarray  # building mask shared by all PG/SS grids

    @property
    def building_map(self) -> BuildingMap:
        return BuildingMap(self.building, self.area)

    @property
    def p_uma_map(self) -> PGMap:
        return PGMap(self.p_uma, self.mask, self.area)

    def ss_map(self, k: int) -> SSMap:
        return SSMap(self.ss[k], self.mask, self.area)


def load_dataset(manifest_path) -> list[AreaData]:
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.from_json(manifest_path.read_text(encoding="utf-8"))
    base = manifest_path.parent
    areas: list[AreaData] = []
    for e in manifest.entries:
        def grd(name):
            grid, mask, header = load_grid(base / e.files[name])
            return grid, mask, header

        b, _, hdr = grd("b")
        side = hdr["resolution_m"] * hdr["width"]
        area = GeoArea(
            side_x=side,
            side_y=hdr["resolution_m"] * hdr["height"],
            grid_x=hdr["width"],
            grid_y=hdr["height"],
        )
        p_uma, mask, _ = grd("p_uma")
        p_iso = grd("p_iso")[0]
        p_dir = [grd(f"p_dir{k}")[0] for k in range(synth.DIR_MAPS_PER_AREA)]
        ss = [grd(f"s{k}")[0] for k in range(synth.DIR_MAPS_PER_AREA)]
        areas.append(
            AreaData(e.area_id, e.split, area, b, p_uma, p_iso, p_dir, ss, mask)
        )
    return areas


def _norm_grid(grid: np.ndarray) -> np.ndarray:
    """Normalize a dB grid for network IO; masked (NaN) pixels become 0."""
    return np.nan_to_num(norm_db(grid), nan=0.0).astype(np.float32)


def stage1_input(ad: AreaData) -> np.ndarray:
    return np.stack([norm_height(ad.building).astype(np.float32), _norm_grid(ad.p_uma)])


def stage1_target(ad: AreaData) -> np.ndarray:
    return _norm_grid(ad.p_iso)[None]


def stage2_input(ad: AreaData, p_iso_hat: np.ndarray, sparse_channel: np.ndarray):
    return np.stack(
        [norm_height(ad.building).astype(np.float32), p_iso_hat, sparse_channel]
    )


def _epoch_val_loss(forward, items, batch_size: int = 8) -> float:
    """Pooled masked MSE over a list of (x, y, mask) samples."""
    total_sq = 0.0
    total_n = 0
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        x = np.stack([c[0] for c in chunk])
        y = np.stack([c[1] for c in chunk])
        keep = ~np.stack([c[2] for c in chunk])[:, None]
        pred = forward(x)
        diff = (pred - y)[keep]
        total_sq += float((diff * diff).sum())
        total_n += int(keep.sum())
    return total_sq / max(total_n, 1)


def _run_training(model: UNet, samples_fn, val_items, cfg: TrainConfig, rng):
    """Shared epoch loop: samples_fn(epoch, rng) yields (x, y, mask)
    training tuples (already augmented); keeps the lowest-val snapshot."""
    with single_threaded_blas():
        return _run_training_inner(model, samples_fn, val_items, cfg, rng)


def _run_training_inner(model, samples_fn, val_items, cfg, rng):
    opt = ag.Adam(model.params, lr=cfg.learning_rate)
    history: list[dict] = []
    best_val = np.inf
    best_snap = model.snapshot()
    for epoch in range(cfg.epochs):
        items = samples_fn(epoch, rng)
        order = rng.permutation(len(items))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            if len(batch) < 2:
                continue  # BN train mode needs >= 2 samples
            x = np.stack([b[0] for b in batch])
            y = np.stack([b[1] for b in batch])
            mask = np.stack([b[2] for b in batch])[:, None]
            opt.zero_grad()
            pred = model.forward(x, train=True)
            loss = ag.masked_mse(pred, y, mask)
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        val = _epoch_val_loss(lambda a: model.forward(a, train=False).data, val_items)
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val}
        )
        if val < best_val:
            best_val = val
            best_snap = model.snapshot()
    model.load_snapshot(best_snap)
    return history


def train_stage1(areas: list[AreaData], cfg: TrainConfig):
    """Fit the isotropic-PG network; returns (net, history)."""
    train = [a for a in areas if a.split == "train"]
    val = [a for a in areas if a.split == "val"]
    if not train or not val:
        raise ValueError("dataset must contain both train and val areas")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x57A9E1]))
    model = UNet(
        UNetConfig(in_channels=2, base_channels=cfg.base_channels),
        np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x171])),
    )
    base = [(stage1_input(a), stage1_target(a), a.mask) for a in train]
    val_items = [(stage1_input(a), stage1_target(a), a.mask) for a in val]

    def samples(_epoch, rng_):
        out = []
        for x, y, mask in base:
            variant = int(rng_.integers(0, 8))
            out.append(
                (augment(x, variant), augment(y, variant), augment(mask, variant))
            )
        return out

    history = _run_training(model, samples, val_items, cfg, rng)
    return model, history


def _predict_iso_norm(iso: UNet, ad: AreaData) -> np.ndarray:
    return iso.forward(stage1_input(ad)[None], train=False).data[0, 0].astype(np.float32)


def train_stage2(areas: list[AreaData], iso: UNet, cfg: TrainConfig):
    """Fit the SS network with the stage-1 net frozen; returns
    (net, history). Sparse channels are redrawn every epoch with
    N ~ Unif[1, 200]; validation uses fixed 100-point draws so checkpoint
    selection is stable."""
    train = [a for a in areas if a.split == "train"]
    val = [a for a in areas if a.split == "val"]
    if not train or not val:
        raise ValueError("dataset must contain both train and val areas")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x57A9E2]))
    model = UNet(
        UNetConfig(in_channels=3, base_channels=cfg.base_channels),
        np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x172])),
    )
    iso_hat = {a.area_id: _predict_iso_norm(iso, a) for a in areas}

    def make_item(a: AreaData, k: int, n_sparse: int, rng_, variant: int):
        ss = a.ss_map(k)
        sparse = sample_sparse(ss, n_sparse, rng_)
        x = stage2_input(a, iso_hat[a.area_id], encode_sparse_channel(sparse, a.area))
        y = _norm_grid(a.ss[k])[None]
        return (augment(x, variant), augment(y, variant), augment(a.mask, variant))

    def samples(_epoch, rng_):
        out = []
        for a in train:
            for k in range(synth.DIR_MAPS_PER_AREA):
                n_sparse = int(rng_.integers(1, N_SPARSE_TRAIN_MAX + 1))
                out.append(make_item(a, k, n_sparse, rng_, int(rng_.integers(0, 8))))
        return out

    val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x57A9E3]))
    val_items = [
        make_item(a, k, N_SPARSE_VALIDATION, val_rng, 0)
        for a in val
        for k in range(synth.DIR_MAPS_PER_AREA)
    ]

    history = _run_training(model, samples, val_items, cfg, rng)
    return model, history


def train_cascaded(areas: list[AreaData], cfg: TrainConfig):
    """Both stages back to back; returns (CascadedModel, history dict)."""
    iso, hist1 = train_stage1(areas, cfg)
    dir_net, hist2 = train_stage2(areas, iso, cfg)
    return CascadedModel(iso=iso, dir=dir_net), {"stage1": hist1, "stage2": hist2}


def predict_ss(
    model: CascadedModel,
    bmap: BuildingMap,
    p_uma: PGMap,
    sparse: SparseSSMap,
) -> SSMap:
    """Predict the full signal-strength map from the building map, the UMa
    map, and sparse SS samples."""
    ch_b = norm_height(bmap.grid).astype(np.float32)
    ch_uma = _norm_grid(p_uma.grid)
    x1 = np.stack([ch_b, ch_uma])[None]
    p_hat = model.iso.forward(x1, train=False).data[0, 0].astype(np.float32)
    ch_sparse = encode_sparse_channel(sparse, bmap.area)
    x2 = np.stack([ch_b, p_hat, ch_sparse])[None]
    s_norm = model.dir.forward(x2, train=False).data[0, 0]
    grid = synth.denorm_db(s_norm).astype(np.float32)
    mask = bmap.building_mask
    grid[mask] = np.nan
    return SSMap(grid, mask, bmap.area)
