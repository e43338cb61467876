"""Monthly habitat maps, suitable-area accounting and change reports."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .forest import RandomForest, predict_proba_batch
from .grid import CATEGORICAL, FeatureStack, Grid, feature_layer, row_areas_km2, stack_matrix
from .raster_io import PolygonSet, points_in_polygonset

PROB_NODATA = -9999.0


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class HabitatMap:
    probability: Grid
    binary: Grid
    year: int | None
    month: int | None
    threshold: float = 0.5


def binarize(probability: Grid, threshold: float, year=None, month=None) -> HabitatMap:
    prob = probability.masked()
    binary = np.where(np.isnan(prob), 0.0, (prob >= threshold).astype(np.float64))
    b = Grid(probability.header, binary, probability.mask, CATEGORICAL)
    return HabitatMap(probability, b, year, month, threshold)


def predict_map(f: RandomForest, stack: FeatureStack, threshold: float = 0.5,
                threads: int = 1) -> HabitatMap:
    """Presence probability for every cell where all layers have data."""
    needed = []
    for name in f.feature_names:
        layer = feature_layer(name)
        if layer not in needed:
            needed.append(layer)
    if needed != stack.names:
        raise AnalysisError(
            f"stack layers {stack.names} do not match the forest's features {needed}")
    X = stack_matrix(stack, f.feature_names)
    valid = ~np.isnan(X).any(axis=1)
    prob = np.full(len(X), PROB_NODATA)
    if valid.any():
        prob[valid] = predict_proba_batch(f, X[valid], threads)
    grid = Grid.from_array(stack.spec, prob.reshape(stack.spec.shape), ~valid,
                           nodata_value=PROB_NODATA)
    return binarize(grid, threshold, stack.year, stack.month)


def zone_mask(spec, zone: PolygonSet | None) -> np.ndarray:
    """Cells whose centers fall inside ``zone`` (everything when zone is None)."""
    if zone is None:
        return np.ones(spec.shape, dtype=bool)
    lon, lat = spec.cell_centers()
    return points_in_polygonset(lon, lat, zone)


def suitable_area_km2(m: HabitatMap, zone: PolygonSet | None = None, _mask=None) -> float:
    spec = m.binary.spec
    sel = (m.binary.values == 1) & ~m.binary.mask
    sel &= zone_mask(spec, zone) if _mask is None else _mask
    per_row = sel.sum(axis=1)
    return float(np.dot(per_row, row_areas_km2(spec)))


@dataclass
class SeriesEntry:
    year: int
    month: int
    total_km2: float
    zones_km2: dict = field(default_factory=dict)


@dataclass
class HabitatSeries:
    entries: list[SeriesEntry]
    zone_names: list[str] = field(default_factory=list)

    def area(self, year: int, month: int, zone: str | None = None) -> float:
        for e in self.entries:
            if (e.year, e.month) == (year, month):
                return e.total_km2 if zone is None else e.zones_km2[zone]
        raise KeyError((year, month))

    def years(self) -> list[int]:
        return sorted({e.year for e in self.entries})


def monthly_series(maps: Sequence[HabitatMap], zones: PolygonSet | None = None) -> HabitatSeries:
    """Total and per-zone suitable area for each (year, month) map."""
    keys = [(m.year, m.month) for m in maps]
    if len(set(keys)) != len(keys):
        dup = sorted({k for k in keys if keys.count(k) > 1})
        raise AnalysisError(f"duplicate (year, month) maps: {dup}")
    names = zones.names if zones is not None else []
    masks = {}
    entries = []
    for m in sorted(maps, key=lambda m: (m.year, m.month)):
        spec = m.binary.spec
        per_zone = {}
        for name in names:
            key = (spec, name)
            if key not in masks:
                masks[key] = zone_mask(spec, zones.subset(name))
            per_zone[name] = suitable_area_km2(m, _mask=masks[key])
        entries.append(SeriesEntry(m.year, m.month, suitable_area_km2(m), per_zone))
    return HabitatSeries(entries, list(names))


def annual_means(series: HabitatSeries, zone: str | None = None) -> dict[int, float]:
    by_year: dict[int, list[float]] = {}
    for e in series.entries:
        v = e.total_km2 if zone is None else e.zones_km2[zone]
        by_year.setdefault(e.year, []).append(v)
    return {y: float(np.mean(v)) for y, v in sorted(by_year.items())}


def percent_change(series: HabitatSeries, baseline_year: int, zone: str | None = None):
    """[(year, 100 * (A(year) - A(base)) / A(base))] on annual means of monthly areas."""
    means = annual_means(series, zone)
    if baseline_year not in means:
        raise AnalysisError(f"baseline year {baseline_year} not in series")
    base = means[baseline_year]
    if base <= 0:
        raise AnalysisError(f"baseline area is zero for zone {zone or 'total'}")
    return [(y, 0.0 if y == baseline_year else 100.0 * (a - base) / base)
            for y, a in means.items()]


def write_series(series: HabitatSeries, delimiter: str = ",") -> str:
    out = io.StringIO()
    cols = ["year", "month", "total_km2", *(f"{z}_km2" for z in series.zone_names)]
    out.write(delimiter.join(cols) + "\n")
    for e in series.entries:
        vals = [str(e.year), str(e.month), repr(float(e.total_km2)),
                *(repr(float(e.zones_km2[z])) for z in series.zone_names)]
        out.write(delimiter.join(vals) + "\n")
    return out.getvalue()


def parse_series(text: str, delimiter: str = ",") -> HabitatSeries:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(delimiter)
    if header[:3] != ["year", "month", "total_km2"]:
        raise AnalysisError("series header must start with year,month,total_km2")
    zones = [h[:-len("_km2")] for h in header[3:]]
    entries = []
    for ln in lines[1:]:
        v = ln.split(delimiter)
        entries.append(SeriesEntry(int(v[0]), int(v[1]), float(v[2]),
                                   {z: float(x) for z, x in zip(zones, v[3:])}))
    return HabitatSeries(entries, zones)


def write_percent_change(series: HabitatSeries, baseline_year: int,
                         delimiter: str = ",") -> str:
    cols = ["total", *series.zone_names]
    tables = {}
    for z in cols:
        try:
            tables[z] = dict(percent_change(series, baseline_year, None if z == "total" else z))
        except AnalysisError:
            tables[z] = {}
    out = io.StringIO()
    out.write(delimiter.join(["year", *(f"{c}_pct" for c in cols)]) + "\n")
    for y in series.years():
        row = [str(y)]
        for z in cols:
            v = tables[z].get(y)
            row.append("undefined" if v is None else repr(float(v)))
        out.write(delimiter.join(row) + "\n")
    return out.getvalue()


NODATA_RGB = (128, 128, 128)


def render_map_image(m: HabitatMap, mode: str = "probability") -> bytes:
    """Binary PPM (P6): white-to-red ramp for probability, red/white for binary, gray nodata."""
    if mode == "probability":
        p = np.clip(m.probability.masked(), 0.0, 1.0)
        fade = np.rint(255.0 * (1.0 - np.nan_to_num(p))).astype(np.uint8)
        rgb = np.stack([np.full_like(fade, 255), fade, fade], axis=-1)
        nodata = m.probability.mask
    elif mode == "binary":
        on = m.binary.values == 1
        rgb = np.where(on[..., None], np.array([255, 0, 0], np.uint8),
                       np.array([255, 255, 255], np.uint8)).astype(np.uint8)
        nodata = m.binary.mask
    else:
        raise AnalysisError(f"unknown render mode {mode!r}")
    rgb[nodata] = NODATA_RGB
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()
