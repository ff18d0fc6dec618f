import json
import subprocess
import sys

import numpy as np
import pytest

from sigmap import synth
from sigmap.geodata import GeoArea


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "sigmap", *map(str, args)],
        capture_output=True, text=True,
    )


@pytest.fixture
def geojson_file(tmp_path):
    # 3 buildings big enough to clear a modest ratio threshold on a 64 px grid
    def ring(lon0, lat0, dlon, dlat):
        return [[lon0, lat0], [lon0 + dlon, lat0], [lon0 + dlon, lat0 + dlat],
                [lon0, lat0 + dlat], [lon0, lat0]]

    features = []
    for i, (lon0, lat0) in enumerate(
        [(0.0004, 0.0004), (0.0016, 0.0012), (0.0008, 0.0024)]
    ):
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon",
                         "coordinates": [ring(lon0, lat0, 0.0008, 0.0008)]},
            "properties": {"height_m": 12.0 + 4 * i},
        })
    path = tmp_path / "buildings.geojson"
    path.write_text(json.dumps({"type": "FeatureCollection", "features": features}))
    return path


class TestRasterize:
    def test_produces_loadable_grid(self, tmp_path, geojson_file):
        out = tmp_path / "b.grd"
        res = run_cli("rasterize", "--geojson", geojson_file, "--out", out,
                      "--lat", 0, "--lon", 0, "--side", 512, "--grid", 128)
        assert res.returncode == 0, res.stderr
        grid, mask, header = synth.load_grid(out)
        assert header["kind"] == "building"
        assert grid.shape == (128, 128)
        assert (np.nan_to_num(grid) > 0).any()

    def test_missing_file_exits_2(self, tmp_path):
        res = run_cli("rasterize", "--geojson", tmp_path / "nope.geojson",
                      "--out", tmp_path / "b.grd")
        assert res.returncode == 2
        assert "nope.geojson" in res.stderr

    def test_ratio_constraint_exits_3(self, tmp_path, geojson_file):
        res = run_cli("rasterize", "--geojson", geojson_file,
                      "--out", tmp_path / "b.grd", "--ratio-min", 0.2)
        assert res.returncode == 3

    def test_idempotent_output(self, tmp_path, geojson_file):
        a, b = tmp_path / "a.grd", tmp_path / "b.grd"
        run_cli("rasterize", "--geojson", geojson_file, "--out", a)
        run_cli("rasterize", "--geojson", geojson_file, "--out", b)
        assert a.read_bytes() == b.read_bytes()


@pytest.fixture
def building_grid(tmp_path):
    bmap = synth.generate_procedural_area(31)
    path = tmp_path / "b.grd"
    synth.save_grid(path, bmap.grid, None, bmap.area, "building", "m")
    return path


class TestMapCommands:
    def test_uma_command(self, tmp_path, building_grid):
        out = tmp_path / "uma.grd"
        res = run_cli("uma", "--building", building_grid, "--out", out)
        assert res.returncode == 0, res.stderr
        grid, mask, header = synth.load_grid(out)
        assert header["kind"] == "pg"
        assert np.isfinite(grid[~mask]).all()

    def test_trace_command_deterministic(self, tmp_path, building_grid):
        a, b = tmp_path / "a.grd", tmp_path / "t2.grd"
        args = ("trace", "--building", building_grid, "--rays", 20000,
                "--seed", 3, "--threads", 1)
        r1 = run_cli(*args, "--out", a)
        r2 = run_cli(*args, "--out", b)
        assert r1.returncode == 0, r1.stderr
        assert a.read_bytes() == b.read_bytes()

    def test_trace_rejects_bad_building_grid(self, tmp_path):
        bad = tmp_path / "bad.grd"
        bad.write_bytes(b"junk")
        res = run_cli("trace", "--building", bad, "--out", tmp_path / "o.grd")
        assert res.returncode == 2


class TestEval:
    def test_eval_json(self, tmp_path, area):
        rng = np.random.default_rng(0)
        truth = rng.uniform(-110, -60, (128, 128)).astype(np.float32)
        pred = truth + rng.normal(0, 3, truth.shape).astype(np.float32)
        tp, pp = tmp_path / "t.grd", tmp_path / "p.grd"
        synth.save_grid(tp, truth, None, area, "ss", "dBm")
        synth.save_grid(pp, pred, None, area, "ss", "dBm")
        res = run_cli("eval", "--pred", pp, "--truth", tp,
                      "--json", tmp_path / "stats.json")
        assert res.returncode == 0, res.stderr
        stats = json.loads((tmp_path / "stats.json").read_text())
        assert 2.0 < stats["rmse_db"] < 4.0
        assert stats["n"] == 128 * 128
        assert sum(stats["histogram"]) == stats["n"]


class TestConfigFile:
    def test_config_defaults_and_flag_override(self, tmp_path, building_grid):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"version": 1, "rays": 15000, "seed": 9}))
        out1 = tmp_path / "o1.grd"
        out2 = tmp_path / "o2.grd"
        r1 = run_cli("--config", cfg, "trace", "--building", building_grid,
                     "--out", out1, "--threads", 1)
        assert r1.returncode == 0, r1.stderr
        assert '"rays": 15000' in r1.stderr  # resolved config is logged
        # explicit flag wins over the config file
        r2 = run_cli("--config", cfg, "trace", "--building", building_grid,
                     "--out", out2, "--rays", 15001, "--threads", 1)
        assert '"rays": 15001' in r2.stderr


@pytest.mark.slow
class TestPredictPipeline:
    def test_tiny_end_to_end(self, tmp_path):
        # synth a tiny dataset, train 2 epochs, predict from sparse CSV,
        # evaluate, and report; exercises every subcommand surface
        ds = tmp_path / "ds"
        r = run_cli("synth", "--out", ds, "--areas", 8, "--seed", 7,
                    "--rays", 20000)
        assert r.returncode == 0, r.stderr
        assert (ds / "manifest.json").exists()

        ckpt = tmp_path / "model.sckpt"
        r = run_cli("train", "--dataset", ds, "--out", ckpt, "--epochs", 2,
                    "--seed", 1, "--history", tmp_path / "hist.json")
        assert r.returncode == 0, r.stderr
        hist = json.loads((tmp_path / "hist.json").read_text())
        assert len(hist["stage1"]) == 2 and len(hist["stage2"]) == 2

        manifest = synth.DatasetManifest.from_json(
            (ds / "manifest.json").read_text())
        entry = manifest.entries[0]
        b_path = ds / entry.files["b"]
        uma_path = ds / entry.files["p_uma"]
        truth_path = ds / entry.files["s0"]

        truth_grid, truth_mask, hdr = synth.load_grid(truth_path)
        area = GeoArea(side_x=hdr["resolution_m"] * hdr["width"],
                       side_y=hdr["resolution_m"] * hdr["height"],
                       grid_x=hdr["width"], grid_y=hdr["height"])
        ss = synth.SSMap(truth_grid, truth_mask, area)
        sparse = synth.sample_sparse(ss, 100, np.random.default_rng(3))
        sparse_path = tmp_path / "sparse.csv"
        synth.save_sparse_csv(sparse_path, sparse)

        pred_path = tmp_path / "pred.grd"
        r = run_cli("predict", "--ckpt", ckpt, "--building", b_path,
                    "--uma", uma_path, "--sparse", sparse_path,
                    "--out", pred_path)
        assert r.returncode == 0, r.stderr
        grid, mask, header = synth.load_grid(pred_path)
        assert header["kind"] == "ss"
        np.testing.assert_array_equal(mask, truth_mask)

        r = run_cli("eval", "--pred", pred_path, "--truth", truth_path)
        assert r.returncode == 0, r.stderr

        report = tmp_path / "report"
        r = run_cli("report", "--dataset", ds, "--ckpt", ckpt,
                    "--out", report, "--sparse-counts", "20,50")
        assert r.returncode == 0, r.stderr
        assert (report / "methods.csv").exists()
        assert (report / "truth.pgm").read_bytes().startswith(b"P5\n")
