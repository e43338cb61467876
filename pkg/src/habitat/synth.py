"""Seeded synthetic fixtures with a planted logistic suitability surface.

Ten layers named after the usual predictor set are written: seven carry the
planted signal (six monthly climate/vegetation layers plus static elevation)
and three are deliberately uninformative (land cover, distance to roads,
distance to rivers). Suitability is the logistic of a weighted sum of the
informative layers' standardised values, with a post-monsoon seasonal peak
in October and a slow decline across years. Occurrences are drawn from cells
inside the range polygon where the surface exceeds 0.5.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import CATEGORICAL, Grid, GridSpec, distance_transform
from .raster_io import (OccurrenceRecord, Polygon, PolygonSet, points_in_polygonset,
                        save_ascii_grid, write_occurrences)

# name, monthly?, offset, scale, weight in the linear predictor
INFORMATIVE = (
    ("precipitation", True, 120.0, 60.0, 0.7),
    ("tmin", True, 18.0, 4.0, 0.7),
    ("tmax", True, 31.0, 4.0, 0.7),
    ("elevation", False, 600.0, 400.0, 1.0),
    ("npp", True, 2.5, 1.0, 1.0),
    ("lai", True, 2.0, 0.8, 1.0),
    ("ndvi", True, 0.5, 0.15, 0.7),
)
NOISE = ("lulc", "dist_roads", "dist_rivers")
LAYER_ORDER = ("precipitation", "tmin", "tmax", "elevation", "dist_rivers", "dist_roads",
               "lulc", "npp", "lai", "ndvi")


@dataclass
class SynthConfig:
    seed: int = 2021
    xllcorner: float = 74.0
    yllcorner: float = 8.0
    ncols: int = 60
    nrows: int = 60
    cellsize: float = 0.1
    years: list = field(default_factory=lambda: [2015, 2016])
    n_occurrences: int = 300
    season_amplitude: float = 0.8
    peak_month: int = 10
    annual_trend: float = -0.15
    intercept: float = -0.8
    steepness: float = 2.0

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.ncols, self.nrows, self.xllcorner, self.yllcorner, self.cellsize)


def _smooth_field(rng, shape, n_waves: int = 6) -> np.ndarray:
    """Standardised sum of random low-frequency cosine waves."""
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    out = np.zeros(shape)
    for _ in range(n_waves):
        ky, kx = rng.uniform(0.5, 3.0, 2) * 2 * math.pi / np.array(shape)
        phase = rng.uniform(0, 2 * math.pi)
        out += math.cos(phase) * np.cos(kx * cols + ky * rows + phase)
    return (out - out.mean()) / (out.std() or 1.0)


def _core(spec: GridSpec):
    """Gaussian bump centered in the region; returns (field, center, radii in cells)."""
    rows, cols = np.mgrid[0:spec.nrows, 0:spec.ncols]
    cy, cx = spec.nrows * 0.45, spec.ncols * 0.5
    ry, rx = spec.nrows * 0.28, spec.ncols * 0.3
    d2 = ((rows + 0.5 - cy) / ry) ** 2 + ((cols + 0.5 - cx) / rx) ** 2
    bump = np.exp(-d2)
    return (bump - bump.mean()) / bump.std(), (cy, cx), (ry, rx)


def season(month: int, peak_month: int = 10) -> float:
    return math.cos(2 * math.pi * (month - peak_month) / 12.0)


@dataclass
class Fixture:
    spec: GridSpec
    layers: dict          # (name, year, month) or (name, None, None) -> Grid
    suitability: dict     # (year, month) -> ndarray
    records: list
    range_ring: np.ndarray
    zones: dict           # name -> ring


def generate(cfg: SynthConfig) -> Fixture:
    rng = np.random.default_rng(cfg.seed)
    spec = cfg.spec
    shape = spec.shape
    core, (cy, cx), (ry, rx) = _core(spec)

    static_z = {}
    spatial = {}
    for name, monthly, *_ in INFORMATIVE:
        spatial[name] = 0.8 * core + 0.6 * _smooth_field(rng, shape)
        if not monthly:
            static_z[name] = spatial[name]

    layers = {}
    for name, monthly, offset, scale, _ in INFORMATIVE:
        if not monthly:
            layers[(name, None, None)] = Grid.from_array(
                spec, np.round(offset + scale * static_z[name], 3))

    road_mask = rng.random(shape) < 0.02
    river_mask = rng.random(shape) < 0.02
    for m in (road_mask, river_mask):
        # tiny grids can draw no feature cells at all
        if not m.any():
            m.flat[rng.integers(m.size)] = True
    layers[("dist_roads", None, None)] = _rounded(distance_transform(
        Grid.from_array(spec, road_mask.astype(float)), spec), 1)
    layers[("dist_rivers", None, None)] = _rounded(distance_transform(
        Grid.from_array(spec, river_mask.astype(float)), spec), 1)
    layers[("lulc", None, None)] = Grid.from_array(
        spec, rng.integers(1, 4, size=shape).astype(float), kind=CATEGORICAL)

    suitability = {}
    for yi, year in enumerate(cfg.years):
        for month in range(1, 13):
            s = season(month, cfg.peak_month)
            linear = np.zeros(shape)
            for name, monthly, offset, scale, weight in INFORMATIVE:
                if monthly:
                    z = (spatial[name] + cfg.season_amplitude * s
                         + cfg.annual_trend * yi + 0.15 * rng.standard_normal(shape))
                    layers[(name, year, month)] = Grid.from_array(
                        spec, np.round(offset + scale * z, 4))
                else:
                    z = static_z[name]
                linear += weight * z
            linear /= sum(w for *_, w in INFORMATIVE)
            suitability[(year, month)] = 1.0 / (
                1.0 + np.exp(-cfg.steepness * (linear * 3.0 + cfg.intercept)))

    # range polygon: ellipse around the core, 36 vertices
    theta = np.linspace(0.0, 2 * math.pi, 37)
    theta[-1] = 0.0
    ring = np.column_stack([
        spec.xllcorner + (cx + 1.25 * rx * np.cos(theta)) * spec.cellsize,
        spec.ytop - (cy + 1.25 * ry * np.sin(theta)) * spec.cellsize,
    ])
    ring = np.round(ring, 6)
    ring[-1] = ring[0]

    lon, lat = spec.cell_centers()
    in_range = points_in_polygonset(lon, lat, PolygonSet((Polygon("range", (ring,)),)))

    keys = sorted(suitability)
    weights = np.stack([np.where(in_range & (suitability[k] > 0.5), suitability[k], 0.0)
                        for k in keys])
    flat = weights.ravel() / weights.sum()
    picks = rng.choice(len(flat), size=cfg.n_occurrences, replace=True, p=flat)
    records = []
    for p in picks:
        k, cell = divmod(int(p), shape[0] * shape[1])
        r, c = divmod(cell, shape[1])
        year, month = keys[k]
        # keep the recorded point well inside its cell
        jx, jy = rng.uniform(0.2, 0.8, 2)
        rec_lon = round(float(spec.xllcorner + (c + jx) * spec.cellsize), 5)
        rec_lat = round(float(spec.ytop - (r + jy) * spec.cellsize), 5)
        unc = None if rng.random() < 0.2 else float(rng.integers(10, 200) * 10)
        records.append(OccurrenceRecord(rec_lat, rec_lon, year, month, unc))

    zones = _zones(spec)
    return Fixture(spec, layers, suitability, records, ring, zones)


def _rounded(g: Grid, digits: int) -> Grid:
    return Grid(g.header, np.round(g.values, digits), g.mask, g.kind)


def _zones(spec: GridSpec) -> dict:
    """Four illustrative rectangles tiling the region, edges on cell boundaries."""
    cs = spec.cellsize
    x0, x1 = spec.xllcorner, spec.xright
    xm = spec.xllcorner + (spec.ncols // 2) * cs
    y0, y3 = spec.yllcorner, spec.ytop
    y1 = spec.yllcorner + round(spec.nrows * 0.4) * cs
    y2 = spec.yllcorner + round(spec.nrows * 0.7) * cs

    def rect(a, b, c, d):
        return np.round(np.array([[a, b], [c, b], [c, d], [a, d], [a, b]]), 9)
    return {
        "north_west": rect(x0, y2, xm, y3),
        "north_east": rect(xm, y2, x1, y3),
        "central": rect(x0, y1, x1, y2),
        "south": rect(x0, y0, x1, y1),
    }


def _geojson(rings: dict) -> str:
    feats = [{"type": "Feature", "properties": {"name": name},
              "geometry": {"type": "Polygon", "coordinates": [ring.tolist()]}}
             for name, ring in rings.items()]
    return json.dumps({"type": "FeatureCollection", "features": feats}, indent=1)


def write_fixture(fx: Fixture, cfg: SynthConfig, out_dir) -> dict:
    """Write rasters, manifest, occurrences, polygons and a run config; return paths."""
    layer_dir = os.path.join(out_dir, "layers")
    truth_dir = os.path.join(out_dir, "truth")
    os.makedirs(layer_dir, exist_ok=True)
    os.makedirs(truth_dir, exist_ok=True)
    manifest = []
    by_name = {}
    for (name, year, month), g in fx.layers.items():
        by_name.setdefault(name, []).append((year, month, g))
    for name in LAYER_ORDER:
        for year, month, g in sorted(by_name[name], key=lambda t: (t[0] or 0, t[1] or 0)):
            if year is None:
                fname = f"{name}.asc"
                entry = {"name": name, "path": f"layers/{fname}", "kind": g.kind,
                         "temporal": "static"}
            else:
                fname = f"{name}_{year}_{month:02d}.asc"
                entry = {"name": name, "path": f"layers/{fname}", "kind": g.kind,
                         "temporal": "monthly", "year": year, "month": month}
            save_ascii_grid(g, os.path.join(layer_dir, fname))
            manifest.append(entry)
    for (year, month), s in sorted(fx.suitability.items()):
        save_ascii_grid(Grid.from_array(fx.spec, np.round(s, 6)),
                        os.path.join(truth_dir, f"suitability_{year}_{month:02d}.asc"))

    paths = {
        "layers": os.path.join(out_dir, "layers.json"),
        "occurrences": os.path.join(out_dir, "occurrences.tsv"),
        "range_map": os.path.join(out_dir, "range_map.geojson"),
        "zones": os.path.join(out_dir, "zones.geojson"),
        "config": os.path.join(out_dir, "config.json"),
    }
    with open(paths["layers"], "w") as f:
        json.dump(manifest, f, indent=1)
    with open(paths["occurrences"], "w") as f:
        f.write(write_occurrences(fx.records))
    with open(paths["range_map"], "w") as f:
        f.write(_geojson({"synthetic_range": fx.range_ring}))
    with open(paths["zones"], "w") as f:
        f.write(_geojson(fx.zones))
    run_config = {
        "occurrences": "occurrences.tsv",
        "layers": "layers.json",
        "range_map": "range_map.geojson",
        "zones": "zones.geojson",
        "output_dir": "run",
        "grid": asdict(fx.spec),
        "sampling": {"k_pseudo_presence": 2, "default_uncertainty_m": 1000.0,
                     "n_pseudo_absence": None, "buffer_m": 0.0, "fallback": False},
        "forest": {"n_estimators": 500, "max_features": 2, "max_depth": 22},
        "tuning": {"grid": {"n_estimators": [100, 500], "max_features": [1, 2, 3],
                            "max_depth": [8, 22]}, "folds": 5},
        "threshold": 0.5,
        "seed": cfg.seed,
        "baseline_year": cfg.years[0],
        "delimiter": "\t",
    }
    with open(paths["config"], "w") as f:
        json.dump(run_config, f, indent=1)
    return paths
