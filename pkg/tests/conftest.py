import numpy as np
import pytest

from sigmap.geodata import BuildingMap, GeoArea


@pytest.fixture
def area():
    return GeoArea()


@pytest.fixture
def empty_map(area):
    return BuildingMap(np.zeros((area.grid_y, area.grid_x), np.float32), area)


def numeric_gradient(f, arr, h=1e-6):
    """Central finite differences of scalar f w.r.t. every element of arr
    (modified in place and restored)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
