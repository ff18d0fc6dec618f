"""Command-line pipeline: rasterize, model/trace PG maps, synthesize
datasets, train, predict, evaluate, and emit report artifacts.

Exit codes: 0 success, 2 input error, 3 constraint violation, 4 internal
error. Flags override values from an optional JSON config file
(``--config``); every run logs its fully resolved configuration to
stderr. ``--threads`` (or SIGMAP_THREADS) bounds kernel parallelism;
``--threads 1`` guarantees deterministic output.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import backend, evaluation, synth, training
from .errors import ConstraintError, InputDataError, SigmapError
from .geodata import (
    BuildingMap,
    GeoArea,
    building_ratio,
    extrude,
    parse_footprints,
    rasterize,
    walls_from_building_map,
)
from .propagation import AntennaSpec, CellConfig, uma_pg_map
from .raytracer import RtConfig, trace_pg_map
from .unet import load_model, save_model

PGM_RANGE_DBM = (-150.0, -40.0)


def _resolved(args: argparse.Namespace, keys: list[str]) -> dict:
    return {k: getattr(args, k) for k in keys if hasattr(args, k)}


def _log_config(name: str, cfg: dict) -> None:
    print(f"[sigmap {name}] config: {json.dumps(cfg, sort_keys=True, default=str)}",
          file=sys.stderr)


def _load_building(path) -> BuildingMap:
    grid, _, header = synth.load_grid(path)
    if header.get("kind") != "building":
        raise InputDataError(f"{path}: expected a building grid, got {header.get('kind')}")
    area = GeoArea(
        side_x=header["resolution_m"] * header["width"],
        side_y=header["resolution_m"] * header["height"],
        grid_x=header["width"],
        grid_y=header["height"],
    )
    return BuildingMap(np.nan_to_num(grid, nan=0.0), area)


def _load_pg(path):
    from .propagation import PGMap

    grid, mask, header = synth.load_grid(path)
    area = GeoArea(
        side_x=header["resolution_m"] * header["width"],
        side_y=header["resolution_m"] * header["height"],
        grid_x=header["width"],
        grid_y=header["height"],
    )
    return PGMap(grid, mask, area), header


def _cell_from_args(args, bmap: BuildingMap) -> CellConfig:
    tx_height = args.tx_height
    if tx_height is None:
        tx_height = bmap.max_height + 5.0
    if args.antenna == "dir":
        antenna = AntennaSpec(kind="directional")
    else:
        antenna = AntennaSpec(kind="isotropic")
    return CellConfig(
        carrier_freq=args.freq_ghz * 1e9,
        tx_height=tx_height,
        rx_height=args.rx_height,
        azimuth=args.azimuth,
        downtilt=args.downtilt,
        antenna=antenna,
    )


def save_pgm(path, grid: np.ndarray, mask: np.ndarray) -> None:
    """Grayscale PGM rendering: [-150, -40] dBm linearly to 0..255,
    masked pixels black."""
    lo, hi = PGM_RANGE_DBM
    scaled = np.clip((grid - lo) / (hi - lo) * 255.0, 0, 255)
    img = np.where(mask | ~np.isfinite(grid), 0, scaled).astype(np.uint8)
    # row 0 of our grids is the southern edge; PGM rows go top-down
    img = img[::-1]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def cmd_rasterize(args) -> int:
    geojson = Path(args.geojson)
    if not geojson.exists():
        raise InputDataError(f"GeoJSON file not found: {geojson}")
    area = GeoArea(
        origin_lat=args.lat, origin_lon=args.lon,
        side_x=args.side, side_y=args.side, grid_x=args.grid, grid_y=args.grid,
    )
    footprints, rejected = parse_footprints(geojson.read_bytes(), area)
    if rejected:
        print(f"[sigmap rasterize] rejected {rejected} feature(s)", file=sys.stderr)
    bmap = rasterize(footprints, area)
    ratio = building_ratio(bmap)
    if args.ratio_min is not None and ratio < args.ratio_min:
        raise ConstraintError(
            f"building-to-land ratio {ratio:.4f} below required {args.ratio_min}"
        )
    synth.save_grid(args.out, bmap.grid, None, area, "building", "m")
    print(f"wrote {args.out} (ratio {ratio:.4f}, {len(footprints)} footprints)")
    return 0


def cmd_uma(args) -> int:
    bmap = _load_building(args.building)
    cell = _cell_from_args(args, bmap)
    pg = uma_pg_map(bmap, cell, mode=args.mode)
    synth.save_grid(args.out, pg.grid, pg.mask, bmap.area, "pg", "dB")
    print(f"wrote {args.out}")
    return 0


def cmd_trace(args) -> int:
    bmap = _load_building(args.building)
    if args.geojson:
        footprints, _ = parse_footprints(Path(args.geojson).read_bytes(), bmap.area)
        scene = extrude(footprints)
    else:
        scene = walls_from_building_map(bmap)
    cell = _cell_from_args(args, bmap)
    cfg = RtConfig(
        n_rays=args.rays,
        max_bounces=args.bounces,
        enable_reflection=not args.no_reflection,
        enable_diffraction=not args.no_diffraction,
        rx_height=args.rx_height,
        seed=args.seed,
    )
    pg = trace_pg_map(scene, bmap, cell, cfg)
    synth.save_grid(args.out, pg.grid, pg.mask, bmap.area, "pg", "dB")
    print(f"wrote {args.out}")
    return 0


def cmd_synth(args) -> int:
    manifest = synth.build_dataset(
        args.out, n_areas=args.areas, seed=args.seed, n_rays=args.rays
    )
    n_train = sum(1 for e in manifest.entries if e.split == "train")
    print(f"wrote {args.areas} areas to {args.out} "
          f"({n_train} train / {len(manifest.entries) - n_train} val)")
    return 0


def cmd_train(args) -> int:
    manifest = Path(args.dataset)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    if not manifest.exists():
        raise InputDataError(f"manifest not found: {manifest}")
    areas = training.load_dataset(manifest)
    cfg = training.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        seed=args.seed,
        base_channels=args.base,
    )
    model, history = training.train_cascaded(areas, cfg)
    save_model(args.out, model, meta={"seed": cfg.seed, "epochs": cfg.epochs})
    if args.history:
        Path(args.history).write_text(
            json.dumps(history, indent=1, sort_keys=True), encoding="utf-8"
        )
    last1 = history["stage1"][-1]
    last2 = history["stage2"][-1]
    print(f"wrote {args.out} (stage1 val {last1['val_loss']:.5f}, "
          f"stage2 val {last2['val_loss']:.5f})")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.ckpt)
    bmap = _load_building(args.building)
    p_uma, _ = _load_pg(args.uma)
    sparse = synth.load_sparse_csv(args.sparse)
    pred = training.predict_ss(model, bmap, p_uma, sparse)
    synth.save_grid(args.out, pred.grid, pred.mask, bmap.area, "ss", "dBm")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred_grid, pred_mask, hdr = synth.load_grid(args.pred)
    truth_grid, truth_mask, _ = synth.load_grid(args.truth)
    area = GeoArea(
        side_x=hdr["resolution_m"] * hdr["width"],
        side_y=hdr["resolution_m"] * hdr["height"],
        grid_x=hdr["width"], grid_y=hdr["height"],
    )
    stats = evaluation.error_stats(
        synth.SSMap(pred_grid, pred_mask, area),
        synth.SSMap(truth_grid, truth_mask, area),
    )
    payload = {
        "rmse_db": stats.rmse,
        "median_abs_db": stats.median_abs,
        "iqr_db": stats.iqr,
        "n": stats.n,
        "histogram": stats.histogram.tolist(),
    }
    text = json.dumps(payload, indent=1, sort_keys=True)
    if args.json:
        Path(args.json).write_text(text, encoding="utf-8")
    print(text)
    return 0


def cmd_report(args) -> int:
    manifest = Path(args.dataset)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    areas = training.load_dataset(manifest)
    model = load_model(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = [int(c) for c in args.sparse_counts.split(",")]

    rows = []
    for n_sparse in counts:
        per_method = evaluation.evaluate_holdout(areas, model, n_sparse, args.seed)
        for method, rmses in per_method.items():
            rows.append(
                {
                    "pci": "synthetic",
                    "device": "synthetic",
                    "method": method,
                    "n_sparse": n_sparse,
                    "rmse_db": float(np.mean(rmses)),
                    "n_maps": len(rmses),
                }
            )
    csv_path = out_dir / "methods.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    # render the first validation area: truth vs prediction at 100 points
    val = [a for a in areas if a.split == "val"]
    if val:
        a = val[0]
        truth = a.ss_map(0)
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0x9E9]))
        sparse = synth.sample_sparse(truth, min(100, int((~truth.mask).sum())), rng)
        pred = training.predict_ss(model, a.building_map, a.p_uma_map, sparse)
        save_pgm(out_dir / "truth.pgm", truth.grid, truth.mask)
        save_pgm(out_dir / "predicted.pgm", pred.grid, pred.mask)
    for row in rows:
        print(
            f"{row['method']:>18s} n={row['n_sparse']:<4d} "
            f"rmse {row['rmse_db']:6.2f} dB over {row['n_maps']} maps"
        )
    print(f"wrote {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sigmap",
        description="RF signal mapping: building maps to path-gain/SS maps.",
    )
    parser.add_argument("--config", help="JSON file with flag defaults")
    parser.add_argument("--threads", type=int, default=None,
                        help="kernel threads (1 = deterministic); "
                             "default from SIGMAP_THREADS")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rasterize", help="GeoJSON footprints -> building grid")
    p.add_argument("--geojson", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lat", type=float, default=0.0, help="SW corner latitude")
    p.add_argument("--lon", type=float, default=0.0, help="SW corner longitude")
    p.add_argument("--side", type=float, default=512.0)
    p.add_argument("--grid", type=int, default=128)
    p.add_argument("--ratio-min", type=float, default=None, dest="ratio_min")
    p.set_defaults(func=cmd_rasterize)

    def add_cell_flags(p):
        p.add_argument("--freq-ghz", type=float, default=3.66, dest="freq_ghz")
        p.add_argument("--tx-height", type=float, default=None, dest="tx_height",
                       help="default: max building height + 5 m")
        p.add_argument("--rx-height", type=float, default=2.0, dest="rx_height")
        p.add_argument("--antenna", choices=("iso", "dir"), default="iso")
        p.add_argument("--azimuth", type=float, default=0.0)
        p.add_argument("--downtilt", type=float, default=0.0)

    p = sub.add_parser("uma", help="building grid -> UMa path-gain grid")
    p.add_argument("--building", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("auto", "los", "nlos"), default="auto")
    add_cell_flags(p)
    p.set_defaults(func=cmd_uma)

    p = sub.add_parser("trace", help="building grid -> ray-traced path-gain grid")
    p.add_argument("--building", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--geojson", default=None,
                   help="exact footprints; default derives walls from the raster")
    p.add_argument("--rays", type=int, default=100_000)
    p.add_argument("--bounces", type=int, default=8)
    p.add_argument("--no-reflection", action="store_true", dest="no_reflection")
    p.add_argument("--no-diffraction", action="store_true", dest="no_diffraction")
    p.add_argument("--seed", type=int, default=0)
    add_cell_flags(p)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("synth", help="generate a synthetic training dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--areas", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rays", type=int, default=100_000)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the cascaded model on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--base", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history", default=None, help="write loss history JSON here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict a full SS map from sparse samples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--building", required=True)
    p.add_argument("--uma", required=True)
    p.add_argument("--sparse", required=True, help="CSV ix,iy,value_dbm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="error statistics between two SS grids")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="per-method RMSE table + PGM renderings")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sparse-counts", default="50,100,200", dest="sparse_counts")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            defaults = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"sigmap: bad config file: {exc}", file=sys.stderr)
            return 2
        if defaults.get("version", 1) != 1:
            print("sigmap: unsupported config schema version", file=sys.stderr)
            return 2
        # config fills only values the command line left at their defaults
        sentinel = parser.parse_args([a for a in (argv or sys.argv[1:])])
        for key, value in defaults.items():
            if key == "version" or not hasattr(args, key):
                continue
            given = any(
                t.startswith(f"--{key.replace('_', '-')}")
                for t in (argv or sys.argv[1:])
            )
            if not given:
                setattr(args, key, value)
        del sentinel
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("SIGMAP_THREADS", "0") or 0)
    if threads:
        backend.set_num_threads(threads)
    _log_config(args.command, {k: v for k, v in vars(args).items()
                               if k not in ("func", "config")})
    try:
        return args.func(args)
    except (InputDataError, FileNotFoundError) as exc:
        print(f"sigmap: input error: {exc}", file=sys.stderr)
        return 2
    except ConstraintError as exc:
        print(f"sigmap: constraint violated: {exc}", file=sys.stderr)
        return 3
    except (SigmapError, ValueError, OSError) as exc:
        print(f"sigmap: error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
