import math

import numpy as np
import pytest

from sigmap.geodata import BuildingMap
from sigmap.propagation import (
    SPEED_OF_LIGHT,
    AntennaSpec,
    CellConfig,
    antenna_gain,
    antenna_gain_direction,
    ericsson_pg,
    friis_pg,
    los_test,
    uma_breakpoint,
    uma_los_pg,
    uma_nlos_pg,
    uma_pg_map,
)


class TestFriis:
    def test_unit_point(self):
        assert friis_pg(1.0, 1.0) == -32.45

    def test_cbrs_1km(self):
        expected = -(32.45 + 20 * math.log10(3660.0))
        assert abs(expected - (-103.72)) < 5e-3
        assert abs(friis_pg(1.0, 3660.0) - expected) < 1e-12

    def test_doubling_distance_costs_6db(self):
        delta = friis_pg(2.0, 3660.0) - friis_pg(1.0, 3660.0)
        assert abs(delta + 20 * math.log10(2.0)) < 1e-12

    def test_strictly_decreasing(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            d = rng.uniform(0.01, 50.0)
            f = rng.uniform(100.0, 10000.0)
            assert friis_pg(d * 1.01, f) < friis_pg(d, f)
            assert friis_pg(d, f * 1.01) < friis_pg(d, f)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            friis_pg(0.0, 100.0)
        with pytest.raises(ValueError):
            friis_pg(1.0, -5.0)


class TestBreakpoint:
    def test_reference_cell(self):
        d = uma_breakpoint(25.0, 1.5, 3.66e9)
        assert abs(d - 48.0 * 3.66e9 / SPEED_OF_LIGHT) < 1e-9
        assert abs(d - 586.0) < 0.01

    def test_f_equals_c(self):
        assert uma_breakpoint(2.0, 2.0, SPEED_OF_LIGHT) == 4.0

    def test_hand_case(self):
        assert abs(uma_breakpoint(11.0, 2.0, 2.0 * SPEED_OF_LIGHT) - 80.0) < 1e-9

    def test_low_antennas_rejected(self):
        with pytest.raises(ValueError):
            uma_breakpoint(1.0, 1.5, 1e9)
        with pytest.raises(ValueError):
            uma_breakpoint(25.0, 0.9, 1e9)


class TestUmaLos:
    def test_near_branch_unit(self):
        assert uma_los_pg(1.0, 1.0, 25.0, 1.5) == -28.0

    def test_near_branch_100m(self):
        expected = -(28.0 + 44.0 + 20 * math.log10(3.66))
        assert abs(expected - (-83.27)) < 5e-3
        assert abs(uma_los_pg(100.0, 3.66, 25.0, 1.5) - expected) < 1e-12

    def test_far_branch_1km(self):
        d_bp = uma_breakpoint(25.0, 1.5, 3.66e9)
        expected = -(
            28.0 + 40.0 * 3 + 20 * math.log10(3.66)
            - 9.0 * math.log10(d_bp**2 + 23.5**2)
        )
        assert abs(expected - (-109.44)) < 5e-3
        assert abs(uma_los_pg(1000.0, 3.66, 25.0, 1.5) - expected) < 1e-12

    def test_branch_selector_is_breakpoint(self):
        d_bp = uma_breakpoint(25.0, 1.5, 3.66e9)
        below = uma_los_pg(d_bp * (1 - 1e-9), 3.66, 25.0, 1.5)
        at = uma_los_pg(d_bp, 3.66, 25.0, 1.5)
        near_form = -(28.0 + 22.0 * math.log10(d_bp) + 20 * math.log10(3.66))
        far_form = -(
            28.0 + 40.0 * math.log10(d_bp) + 20 * math.log10(3.66)
            - 9.0 * math.log10(d_bp**2 + 23.5**2)
        )
        assert abs(below - near_form) < 1e-6
        assert abs(at - far_form) < 1e-12


class TestUmaNlos:
    def test_100m(self):
        expected = -(13.45 + 39.08 * 2 + 20 * math.log10(3.66))
        assert abs(expected - (-102.88)) < 5e-3
        assert abs(uma_nlos_pg(100.0, 3.66, 25.0, 1.5) - expected) < 1e-12

    def test_rx_height_correction_vanishes_at_reference(self):
        # at h_rx = 1.5 the correction term is exactly zero; perturbing
        # h_rx moves NLOS' by 0.6 dB per meter
        base = uma_nlos_pg(200.0, 3.66, 25.0, 1.5)
        up = uma_nlos_pg(200.0, 3.66, 25.0, 2.5)
        assert abs((up - base) - 0.6) < 1e-9

    def test_min_picks_los_at_tiny_distance(self):
        assert uma_nlos_pg(1.0, 1.0, 25.0, 1.5) == -28.0

    def test_never_above_los(self):
        rng = np.random.default_rng(13)
        for _ in range(300):
            d = rng.uniform(1.0, 3000.0)
            f = rng.uniform(0.5, 10.0)
            assert uma_nlos_pg(d, f, 25.0, 1.5) <= uma_los_pg(d, f, 25.0, 1.5) + 1e-12


class TestEricsson:
    def test_reference_point(self):
        lf = math.log10(3660.0)
        g = 44.49 * lf - 4.78 * lf * lf
        expected = -(36.2 + 12 * math.log10(30.0)
                     - 3.2 * math.log10(11.75 * 1.5) ** 2 + g)
        assert abs(expected - (-146.80)) < 5e-3
        assert abs(ericsson_pg(1.0, 3660.0, 30.0, 1.5) - expected) < 1e-12

    def test_all_log_terms_vanish(self):
        # d=1, f=1, h_tx=1, h_rx=1/11.75 leaves only a0
        assert abs(ericsson_pg(1.0, 1.0, 1.0, 1.0 / 11.75) - (-36.2)) < 1e-9

    def test_distance_slope(self):
        delta = ericsson_pg(10.0, 3660.0, 30.0, 1.5) - ericsson_pg(1.0, 3660.0, 30.0, 1.5)
        assert abs(delta - (-(30.2 + 0.1 * math.log10(30.0)))) < 1e-9
        assert abs(delta - (-30.348)) < 1e-3

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            ericsson_pg(-1.0, 3660.0, 30.0, 1.5)


class TestAntennaGain:
    def test_isotropic(self):
        spec = AntennaSpec(kind="isotropic")
        assert antenna_gain(spec, 50.0, -30.0) == 0.0

    def test_boresight(self):
        spec = AntennaSpec(kind="directional")
        assert antenna_gain(spec, 0.0, 0.0) == 6.3

    def test_half_beamwidth_is_3db(self):
        spec = AntennaSpec(kind="directional")
        assert abs(antenna_gain(spec, 32.5, 0.0) - 3.3) < 1e-12
        assert abs(antenna_gain(spec, 0.0, 4.0) - 3.3) < 1e-12

    def test_floor_is_front_to_back(self):
        spec = AntennaSpec(kind="directional")
        gains = [antenna_gain(spec, az, el)
                 for az in np.linspace(-180, 180, 73)
                 for el in np.linspace(-90, 90, 37)]
        assert max(gains) == 6.3
        assert min(gains) >= 6.3 - 30.0 - 1e-12
        assert min(gains) == 6.3 - 30.0

    def test_direction_with_azimuth_and_downtilt(self):
        spec = AntennaSpec(kind="directional")
        cell = CellConfig(azimuth=90.0, downtilt=10.0, antenna=spec)
        # direction exactly on the tilted boresight: east, 10 deg down
        g = antenna_gain_direction(spec, cell, 1.0, 0.0, -math.tan(math.radians(10.0)))
        assert abs(g - 6.3) < 1e-9


def slab_map(area, x0=240.0, x1=260.0, height=30.0):
    grid = np.zeros((area.grid_y, area.grid_x), np.float32)
    ix0, ix1 = int(x0 / 4), int(x1 / 4)
    grid[:, ix0:ix1] = height
    return BuildingMap(grid, area)


class TestLosTest:
    def test_empty_map_always_clear(self, empty_map):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = (*rng.uniform(1, 511, 2), rng.uniform(1, 40))
            b = (*rng.uniform(1, 511, 2), rng.uniform(1, 40))
            assert los_test(empty_map, a, b)

    def test_segment_clears_low_building(self, area):
        bmap = slab_map(area, height=10.0)
        # segment passes 15 m above the 10 m slab midway
        assert los_test(bmap, (200.0, 256.0, 18.0), (300.0, 256.0, 12.0))

    def test_tall_building_blocks(self, area):
        bmap = slab_map(area, height=30.0)
        assert not los_test(bmap, (200.0, 256.0, 25.0), (300.0, 256.0, 2.0))

    def test_interpolated_height_oracle(self, area):
        # segment height at the slab (midway) is 15 m: 14 m slab clears,
        # 16 m slab blocks
        tx = (200.0, 256.0, 28.0)
        rx = (300.0, 256.0, 2.0)
        assert los_test(slab_map(area, 248.0, 252.0, 14.0), tx, rx)
        assert not los_test(slab_map(area, 248.0, 252.0, 16.0), tx, rx)


class TestUmaPgMap:
    def test_empty_map_all_los(self, empty_map):
        cell = CellConfig(tx_height=25.0, rx_height=2.0)
        pg = uma_pg_map(empty_map, cell)
        # pixel at 100 m ground range east of center
        iy, ix = 63, 88  # center (354, 254): dx=98.0, dy=-2.0
        cx, cy = empty_map.area.pixel_center(ix, iy)
        d = math.dist((cx, cy, 2.0), (256.0, 256.0, 25.0))
        assert abs(pg.grid[iy, ix] - uma_los_pg(d, 3.66, 25.0, 2.0)) < 1e-4

    def test_occluded_pixel_gets_nlos(self, area):
        bmap = slab_map(area, 280.0, 300.0, 40.0)
        cell = CellConfig(tx_height=25.0, rx_height=2.0)
        pg = uma_pg_map(bmap, cell)
        iy, ix = 64, 90  # behind the slab
        cx, cy = area.pixel_center(ix, iy)
        d = math.dist((cx, cy, 2.0), (256.0, 256.0, 25.0))
        assert abs(pg.grid[iy, ix] - uma_nlos_pg(d, 3.66, 25.0, 2.0)) < 1e-4

    def test_buildings_masked(self, area):
        bmap = slab_map(area)
        pg = uma_pg_map(bmap, CellConfig())
        np.testing.assert_array_equal(pg.mask, bmap.grid > 0)
        assert np.isnan(pg.grid[pg.mask]).all()
        assert np.isfinite(pg.grid[~pg.mask]).all()

    def test_forced_modes_bound_auto(self, area):
        bmap = slab_map(area)
        cell = CellConfig()
        auto = uma_pg_map(bmap, cell, mode="auto").grid
        los = uma_pg_map(bmap, cell, mode="los").grid
        nlos = uma_pg_map(bmap, cell, mode="nlos").grid
        keep = ~np.isnan(auto)
        assert np.all(auto[keep] <= los[keep] + 1e-6)
        assert np.all(auto[keep] >= nlos[keep] - 1e-6)

    def test_scalar_map_consistency(self, empty_map):
        # every unmasked pixel equals the scalar model at its 3-D distance
        cell = CellConfig(tx_height=30.0, rx_height=2.0)
        pg = uma_pg_map(empty_map, cell)
        rng = np.random.default_rng(4)
        for _ in range(30):
            ix = int(rng.integers(0, 128))
            iy = int(rng.integers(0, 128))
            cx, cy = empty_map.area.pixel_center(ix, iy)
            d = math.dist((cx, cy, 2.0), (256.0, 256.0, 30.0))
            assert abs(pg.grid[iy, ix] - uma_los_pg(d, 3.66, 30.0, 2.0)) < 1e-4
