import datetime as dt
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from eopretrain.synth import (ANCHOR_YEARS, generate_tile, geomorphon_classify, temporal_anchor,
                           water_consensus)
from eopretrain.tiles import (DW_CLASSES, DW_WATER, ESA_CLASSES, ESA_WATER, GEOMORPHON_FORMS,
                           MODALITIES, ConfigurationError)

FLAT, PEAK, SLOPE = (GEOMORPHON_FORMS.index(n) for n in ("flat", "peak", "slope"))


# -- temporal anchors -------------------------------------------------------

def test_anchor_is_a_pure_function_of_the_id():
    assert temporal_anchor("tile-a") == temporal_anchor("tile-a")


def test_anchor_day_is_always_fifteen():
    assert {temporal_anchor(f"id-{i}").day for i in range(2000)} == {15}


def test_anchor_years_are_balanced():
    years = Counter(temporal_anchor(f"anchor-{i}").year for i in range(10_000))
    assert set(years) == set(ANCHOR_YEARS)
    for y in ANCHOR_YEARS:
        assert abs(years[y] / 10_000 - 0.25) <= 0.03


def test_anchor_empty_id():
    with pytest.raises(ValueError):
        temporal_anchor("")


# -- generator --------------------------------------------------------------

def test_generate_tile_is_bit_identical_for_fixed_seed():
    a = generate_tile("det-1", (32, 32), seed=4)
    b = generate_tile("det-1", (32, 32), seed=4)
    assert a.equals(b)


def test_different_seed_changes_the_tile():
    assert not generate_tile("det-1", (32, 32), seed=4).equals(generate_tile("det-1", (32, 32), seed=5))


def test_default_geometry_is_128():
    tile = generate_tile("default-geom", caption=False)
    assert tile.geometry == (128, 128)


@pytest.mark.parametrize("geom", [(8, 32), (32, 30)])
def test_bad_geometry(geom):
    with pytest.raises(ConfigurationError):
        generate_tile("bad", geom)


def test_water_fraction_matches_pixel_scan():
    for i in range(40):
        t = generate_tile(f"water-{i}", (32, 32), seed=2, caption=False)
        hits = 0
        for y in range(32):
            for x in range(32):
                hits += t.dw[y, x] == DW_WATER and t.esa[y, x] == ESA_WATER
        assert t.attributes.water_fraction == hits / 1024


def test_rasters_share_geometry_and_ranges():
    for i in range(20):
        t = generate_tile(f"range-{i}", (48, 32), seed=1, caption=False)
        for spec in MODALITIES:
            r = t.raster(spec.name)
            assert r.shape[-2:] == (48, 32)
            if spec.kind == "continuous":
                assert r.shape[0] == spec.channels and np.all(np.isfinite(r))
        assert t.canopy.min() >= 0.0
        assert t.dw.max() < len(DW_CLASSES) and t.esa.max() < len(ESA_CLASSES)
        assert 0.0 <= t.s2.min() and t.s2.max() <= 1.0


def _corr(a, b):
    a, b = a - a.mean(), b - b.mean()
    d = np.sqrt((a * a).sum() * (b * b).sum())
    return (a * b).sum() / d if d > 0 else 0.0


def _lag_corr(a, b, dy, dx):
    h, w = a.shape
    return _corr(a[max(0, dy):h + min(0, dy), max(0, dx):w + min(0, dx)],
                 b[max(0, -dy):h + min(0, -dy), max(0, -dx):w + min(0, -dx)])


def _high_pass(x):
    return x - ndimage.gaussian_filter(x, 1.0, mode="nearest")


def _lag_zero_wins(dem, canopy, max_lag=4):
    # pixel-scale relief is the field the two rasters share; broad terrain and
    # land-cover structure would otherwise dominate both correlations
    a, b = _high_pass(dem), _high_pass(canopy)
    at_zero = _lag_corr(a, b, 0, 0)
    lags = [(dy, dx) for dy in range(-max_lag, max_lag + 1) for dx in range(-max_lag, max_lag + 1)
            if max(abs(dy), abs(dx)) >= 2]
    return all(at_zero > _lag_corr(a, b, dy, dx) for dy, dx in lags)


def _aligned(size, count, shift=0):
    tiles = (generate_tile(f"align-{i}", (size, size), seed=9, caption=False) for i in range(count))
    return [_lag_zero_wins(t.dem[0].astype(float), np.roll(t.canopy[0].astype(float), shift, axis=1))
            for t in tiles]


def test_dem_and_canopy_are_coregistered():
    # forest edges can outweigh the shared relief on a rare steep tile
    assert np.mean(_aligned(32, 200)) >= 0.97
    assert all(_aligned(128, 6))


@pytest.mark.parametrize("shift", [2, 3])
def test_alignment_check_detects_a_shift(shift):
    assert not any(_aligned(32, 40, shift))


@pytest.mark.slow
def test_every_class_is_dominant_somewhere():
    dominant = Counter(generate_tile(f"bal-{i}", (32, 32), seed=0, caption=False).attributes.dominant_class
                       for i in range(1000))
    for k in range(len(DW_CLASSES)):
        assert dominant[k] / 1000 >= 0.02, DW_CLASSES[k]


def test_anchor_recorded_on_tile():
    t = generate_tile("anchored", (16, 16), caption=False)
    assert t.anchor_date == temporal_anchor("anchored") and isinstance(t.anchor_date, dt.date)


# -- geomorphons ------------------------------------------------------------

def test_constant_plane_is_flat():
    assert np.all(geomorphon_classify(np.full((20, 20), 42.0), 3) == FLAT)


def test_single_raised_pixel_is_a_peak():
    dem = np.zeros((21, 21))
    dem[10, 10] = 5.0
    assert geomorphon_classify(dem, 3)[10, 10] == PEAK


def test_ramp_interior_is_slope():
    dem = np.tile(np.arange(24.0), (24, 1))
    forms = geomorphon_classify(dem, 3)
    assert np.all(forms[3:-3, 3:-3] == SLOPE)


@settings(max_examples=40, deadline=None)
@given(scale=st.floats(0.01, 500.0), shift=st.floats(-5000.0, 5000.0), seed=st.integers(0, 10_000))
def test_geomorphon_affine_invariance(scale, shift, seed):
    dem = ndimage.gaussian_filter(np.random.default_rng(seed).normal(size=(24, 24)), 2.0) * 100
    base = geomorphon_classify(dem, 4)
    assert np.array_equal(base, geomorphon_classify(scale * dem + shift, 4))


@pytest.mark.parametrize("radius", [0, 11])
def test_geomorphon_radius_bounds(radius):
    with pytest.raises(ConfigurationError):
        geomorphon_classify(np.zeros((20, 20)), radius)


# -- water consensus --------------------------------------------------------

def test_all_water():
    mask, frac = water_consensus(np.full((8, 8), DW_WATER), np.full((8, 8), ESA_WATER))
    assert frac == 1.0 and mask.all()


def test_disjoint_water():
    dw = np.full((8, 8), DW_WATER)
    dw[:, 4:] = 1
    esa = np.full((8, 8), ESA_WATER)
    esa[:, :4] = 0
    assert water_consensus(dw, esa)[1] == 0.0


def test_independent_thirty_percent_overlap():
    rng = np.random.default_rng(0)
    shape = (300, 300)
    dw = np.where(rng.uniform(size=shape) < 0.3, DW_WATER, 1)
    esa = np.where(rng.uniform(size=shape) < 0.3, ESA_WATER, 0)
    frac = water_consensus(dw, esa)[1]
    expected = ((dw == DW_WATER) & (esa == ESA_WATER)).sum() / dw.size
    assert frac == expected
    assert abs(frac - 0.09) < 4 * np.sqrt(0.09 * 0.91 / dw.size)


def test_water_shape_mismatch():
    with pytest.raises(ValueError):
        water_consensus(np.zeros((4, 4)), np.zeros((4, 5)))
