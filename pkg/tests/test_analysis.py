import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from habitat.analysis import (AnalysisError, HabitatSeries, SeriesEntry, binarize,
                              monthly_series, parse_series, percent_change, predict_map,
                              render_map_image, suitable_area_km2, write_percent_change,
                              write_series)
from habitat.forest import Hyperparams, fit_forest, predict_proba
from habitat.grid import CATEGORICAL, FeatureStack, Grid, GridSpec, cell_area_km2
from habitat.raster_io import Polygon, PolygonSet
from habitat.sampling import LabeledDataset


def _prob_map(values, spec=None, mask=None, year=2001, month=1, threshold=0.5):
    values = np.asarray(values, float)
    spec = spec or GridSpec(values.shape[1], values.shape[0], 0.0, 0.0, 1.0)
    return binarize(Grid.from_array(spec, values, mask), threshold, year, month)


def _rect(name, x0, y0, x1, y1):
    return Polygon(name, (np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]], float),))


def test_binarize_invariants():
    m = _prob_map([[0.2, 0.5], [0.7, 0.1]], mask=[[False, False], [False, True]])
    assert m.binary.values[~m.binary.mask].tolist() == [0, 1, 1]
    assert np.array_equal(m.binary.mask, m.probability.mask)


# --- predict_map -------------------------------------------------------------

def _trained(names=("t", "lulc=1", "lulc=2")):
    rng = np.random.default_rng(0)
    X = np.column_stack([rng.normal(size=200), rng.integers(0, 2, 200)])
    X = np.column_stack([X[:, 0], X[:, 1], 1 - X[:, 1]])
    y = ((X[:, 0] + X[:, 1]) > 0.5).astype(int)
    return fit_forest(LabeledDataset(X, y, list(names)), Hyperparams(20, 2, 8), 0)


def _stack(spec, t, lulc, t_mask=None):
    return FeatureStack(spec, (("t", Grid.from_array(spec, t, t_mask)),
                               ("lulc", Grid.from_array(spec, lulc, kind=CATEGORICAL))), 3, 2005)


def test_predict_map_constant_stack():
    f = _trained()
    spec = GridSpec(4, 3, 74, 8, 0.1)
    m = predict_map(f, _stack(spec, np.full((3, 4), 0.3), np.ones((3, 4))))
    assert len(np.unique(m.probability.values)) == 1
    assert (m.year, m.month) == (2005, 3)


def test_predict_map_nodata_cell():
    f = _trained()
    spec = GridSpec(2, 2, 74, 8, 0.1)
    mask = np.array([[False, True], [False, False]])
    m = predict_map(f, _stack(spec, np.zeros((2, 2)), np.ones((2, 2)), mask))
    assert m.probability.mask[0, 1] and m.binary.mask[0, 1]
    assert m.probability.mask.sum() == 1


def test_predict_map_matches_per_cell_predictions():
    f = _trained()
    spec = GridSpec(30, 30, 74, 8, 0.1)
    rng = np.random.default_rng(5)
    stack = _stack(spec, rng.normal(size=(30, 30)), rng.integers(1, 3, (30, 30)))
    m = predict_map(f, stack, threads=3)
    for r in range(30):
        for c in range(30):
            t = stack.layer("t").values[r, c]
            lc = stack.layer("lulc").values[r, c]
            x = [t, float(lc == 1), float(lc == 2)]
            assert m.probability.values[r, c] == predict_proba(f, x)
            assert m.binary.values[r, c] == float(predict_proba(f, x) >= 0.5)


def test_predict_map_layer_mismatch():
    f = _trained()
    spec = GridSpec(2, 2, 0, 0, 1)
    swapped = FeatureStack(spec, (("lulc", Grid.from_array(spec, np.ones((2, 2)), kind=CATEGORICAL)),
                                  ("t", Grid.from_array(spec, np.zeros((2, 2))))))
    with pytest.raises(AnalysisError):
        predict_map(f, swapped)


# --- areas -------------------------------------------------------------------

def test_area_zero_map():
    assert suitable_area_km2(_prob_map(np.zeros((3, 3)))) == 0.0


def test_area_one_equatorial_cell():
    spec = GridSpec(1, 1, 30.0, -0.05, 0.1)
    area = suitable_area_km2(_prob_map([[0.9]], spec))
    assert area == pytest.approx(123.6, abs=0.05)
    assert area == cell_area_km2(spec, 0)


def test_area_zonal_additivity():
    spec = GridSpec(8, 6, 70, 10, 0.5)
    rng = np.random.default_rng(0)
    m = _prob_map(rng.random((6, 8)), spec)
    # grid spans lon 70..74, lat 10..13; four rectangles tile it
    zones = PolygonSet((_rect("nw", 69.9, 11.5, 72.0, 13.1),
                        _rect("ne", 72.0, 11.5, 74.1, 13.1),
                        _rect("sw", 69.9, 9.9, 72.0, 11.5),
                        _rect("se", 72.0, 9.9, 74.1, 11.5)), "zone")
    total = suitable_area_km2(m)
    parts = [suitable_area_km2(m, zones.subset(n)) for n in zones.names]
    assert sum(parts) == pytest.approx(total, rel=1e-12)
    # sw by hand: rows 3..5 (lat < 11.5), columns 0..3 (lon < 72)
    sw = sum(m.binary.values[r, :4].sum() * cell_area_km2(spec, r) for r in range(3, 6))
    assert parts[2] == pytest.approx(sw, rel=1e-12)
    assert all(p <= total for p in parts)


def test_area_threshold_monotone_random_maps():
    rng = np.random.default_rng(1)
    for _ in range(50):
        spec = GridSpec(int(rng.integers(1, 30)), int(rng.integers(1, 30)),
                        float(rng.uniform(-180, 150)), float(rng.uniform(-80, 50)), 0.25)
        prob = rng.random(spec.shape)
        mask = rng.random(spec.shape) < 0.1
        areas = [suitable_area_km2(_prob_map(prob, spec, mask, threshold=t))
                 for t in np.round(np.arange(0.1, 0.91, 0.1), 1)]
        assert all(a >= b for a, b in zip(areas, areas[1:]))


# --- series and change -------------------------------------------------------

def test_single_map_series():
    s = monthly_series([_prob_map([[1.0]])])
    assert len(s.entries) == 1 and s.entries[0].total_km2 > 0


def test_series_duplicate_rejected():
    with pytest.raises(AnalysisError):
        monthly_series([_prob_map([[1.0]]), _prob_map([[0.0]])])


def test_series_sorted_with_zone_columns_round_trip():
    zones = PolygonSet(tuple(_rect(n, 0, 0, 2, 2) for n in
                             ("north_east", "central", "north_west", "south")), "zone")
    maps = [_prob_map(np.full((2, 2), 0.9), year=y, month=m)
            for y, m in ((2002, 1), (2001, 2), (2001, 1))]
    s = monthly_series(maps, zones)
    assert [(e.year, e.month) for e in s.entries] == [(2001, 1), (2001, 2), (2002, 1)]
    for e in s.entries:
        assert set(e.zones_km2) == set(zones.names)
    text = write_series(s)
    assert text.splitlines()[0] == ("year,month,total_km2,north_east_km2,central_km2,"
                                    "north_west_km2,south_km2")
    assert write_series(parse_series(text)) == text


def test_monsoon_fixture_peaks_in_sep_nov():
    spec = GridSpec(20, 20, 74, 8, 0.1)
    rng = np.random.default_rng(2)
    base = rng.random(spec.shape)
    maps = []
    for month in range(1, 13):
        bump = 0.35 if month in (9, 10, 11) else 0.0
        maps.append(_prob_map(np.clip(base * 0.6 + bump, 0, 1), spec, month=month))
    s = monthly_series(maps)
    peak = max(s.entries, key=lambda e: e.total_km2)
    assert peak.month in (9, 10, 11)


def _series(areas):
    return HabitatSeries([SeriesEntry(y, m, a) for (y, m), a in areas.items()])


def test_percent_change_examples():
    s = _series({(2001, 1): 100.0, (2001, 2): 300.0, (2002, 1): 100.0, (2002, 2): 100.0,
                 (2003, 1): 250.0, (2003, 2): 250.0})
    out = dict(percent_change(s, 2001))
    assert out[2001] == 0.0
    assert out[2002] == -50.0
    assert out[2003] == pytest.approx(100 * (250 - 200) / 200)


@given(st.lists(st.floats(0.001, 1e7), min_size=1, max_size=12))
def test_percent_change_baseline_exactly_zero(areas):
    s = _series({(2000, i + 1): a for i, a in enumerate(areas)})
    assert dict(percent_change(s, 2000))[2000] == 0.0


def test_percent_change_errors_and_table():
    s = _series({(2001, 1): 0.0, (2002, 1): 5.0})
    with pytest.raises(AnalysisError):
        percent_change(s, 2001)
    with pytest.raises(AnalysisError):
        percent_change(s, 1999)
    table = write_percent_change(s, 2001).splitlines()
    assert table == ["year,total_pct", "2001,undefined", "2002,undefined"]


# --- images ------------------------------------------------------------------

def _pixels(ppm):
    header, body = ppm.split(b"\n255\n", 1)
    w, h = map(int, header.split(b"\n")[1].split())
    return np.frombuffer(body, np.uint8).reshape(h, w, 3)


def test_render_probability_ramp():
    m = _prob_map([[0.0, 1.0], [0.5, 0.0]], mask=[[False, False], [False, True]])
    px = _pixels(render_map_image(m, "probability"))
    assert px[0, 0].tolist() == [255, 255, 255]
    assert px[0, 1].tolist() == [255, 0, 0]
    assert px[1, 0].tolist() == [255, 128, 128]
    assert px[1, 1].tolist() == [128, 128, 128]


def test_render_binary_and_determinism():
    rng = np.random.default_rng(3)
    m = _prob_map(rng.random((7, 9)))
    img = render_map_image(m, "binary")
    assert img.startswith(b"P6\n9 7\n255\n")
    colors = {tuple(c) for c in _pixels(img).reshape(-1, 3).tolist()}
    assert colors <= {(255, 0, 0), (255, 255, 255)}
    digests = {hashlib.sha256(render_map_image(_prob_map(m.probability.values.copy()),
                                               "probability")).hexdigest() for _ in range(3)}
    assert len(digests) == 1
    with pytest.raises(AnalysisError):
        render_map_image(m, "heatmap")
