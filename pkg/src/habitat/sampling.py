"""Labeled training set construction.

Presence rows come from occurrence records plus pseudo-presences jittered
inside each record's coordinate-uncertainty disk; pseudo-absences are drawn
from valid cells outside the range map. Features are read off the monthly
stacks and the result is split 70/30 stratified by label.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .grid import EARTH_RADIUS_M, FeatureStack, Grid, GridSpec, haversine_m, stack_points
from .raster_io import OccurrenceRecord, PolygonSet, points_in_polygonset

log = logging.getLogger(__name__)

PRESENCE = "presence"
PSEUDO_PRESENCE = "pseudo-presence"
PSEUDO_ABSENCE = "pseudo-absence"
PROVENANCES = (PRESENCE, PSEUDO_PRESENCE, PSEUDO_ABSENCE)

DEFAULT_UNCERTAINTY_M = 1000.0

_MASK64 = (1 << 64) - 1


class SamplingError(ValueError):
    pass


def mix_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed with the splitmix64 finalizer."""
    z = 0x9E3779B97F4A7C15
    for p in parts:
        z = (z + (int(p) & _MASK64) + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z ^= z >> 31
    return z


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledSample:
    features: tuple[float, ...]
    label: int
    provenance: str
    lon: float
    lat: float
    year: int
    month: int


@dataclass(eq=False)
class LabeledDataset:
    """Column-oriented labeled samples.

    ``X`` is (n, n_features) float64, ``y`` holds 0/1 labels. Location, date
    and provenance columns travel with every row.
    """

    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    provenance: np.ndarray = None
    lon: np.ndarray = None
    lat: np.ndarray = None
    year: np.ndarray = None
    month: np.ndarray = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1, len(self.feature_names))
        n = len(self.X)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(n)
        self.feature_names = list(self.feature_names)
        if len(set(self.feature_names)) != len(self.feature_names):
            raise SamplingError(f"duplicate feature names: {self.feature_names}")
        if n and not np.isin(self.y, (0, 1)).all():
            raise SamplingError("labels must be 0 or 1")
        if np.isnan(self.X).any():
            raise SamplingError("features contain nodata")
        self.provenance = (np.asarray(self.provenance, dtype=object).reshape(n)
                           if self.provenance is not None
                           else np.where(self.y == 1, PRESENCE, PSEUDO_ABSENCE).astype(object))
        self.lon = np.zeros(n) if self.lon is None else np.asarray(self.lon, float).reshape(n)
        self.lat = np.zeros(n) if self.lat is None else np.asarray(self.lat, float).reshape(n)
        self.year = (np.zeros(n, np.int64) if self.year is None
                     else np.asarray(self.year, np.int64).reshape(n))
        self.month = (np.zeros(n, np.int64) if self.month is None
                      else np.asarray(self.month, np.int64).reshape(n))

    def __len__(self):
        return len(self.y)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def __getitem__(self, i) -> LabeledSample:
        return LabeledSample(tuple(self.X[i].tolist()), int(self.y[i]), str(self.provenance[i]),
                             float(self.lon[i]), float(self.lat[i]), int(self.year[i]),
                             int(self.month[i]))

    @property
    def samples(self) -> list[LabeledSample]:
        return [self[i] for i in range(len(self))]

    def take(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.X[idx], self.y[idx], self.feature_names, self.provenance[idx],
                              self.lon[idx], self.lat[idx], self.year[idx], self.month[idx])

    def select_features(self, names: Sequence[str]) -> "LabeledDataset":
        cols = [self.feature_names.index(n) for n in names]
        return LabeledDataset(self.X[:, cols], self.y, list(names), self.provenance, self.lon,
                              self.lat, self.year, self.month)

    def class_counts(self) -> tuple[int, int]:
        return int((self.y == 0).sum()), int((self.y == 1).sum())


_META_COLUMNS = ("label", "provenance", "lon", "lat", "year", "month")


def write_dataset(ds: LabeledDataset, delimiter: str = "\t") -> str:
    out = io.StringIO()
    w = csv.writer(out, delimiter=delimiter, lineterminator="\n")
    w.writerow([*ds.feature_names, *_META_COLUMNS])
    for i in range(len(ds)):
        w.writerow([*(repr(v) for v in ds.X[i].tolist()), int(ds.y[i]), ds.provenance[i],
                    repr(float(ds.lon[i])), repr(float(ds.lat[i])), int(ds.year[i]),
                    int(ds.month[i])])
    return out.getvalue()


def parse_dataset(text: str, delimiter: str = "\t") -> LabeledDataset:
    rows = list(csv.reader(io.StringIO(text), delimiter=delimiter))
    if not rows:
        raise SamplingError("empty dataset file")
    header = rows[0]
    if tuple(header[-len(_META_COLUMNS):]) != _META_COLUMNS:
        raise SamplingError(f"dataset header must end with {_META_COLUMNS}")
    nf = len(header) - len(_META_COLUMNS)
    body = [r for r in rows[1:] if r]
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise SamplingError(f"line {lineno}: expected {len(header)} fields, got {len(r)}")
    X = np.array([[float(v) for v in r[:nf]] for r in body], dtype=np.float64).reshape(-1, nf)
    return LabeledDataset(
        X, [int(r[nf]) for r in body], header[:nf],
        [r[nf + 1] for r in body], [float(r[nf + 2]) for r in body],
        [float(r[nf + 3]) for r in body], [int(r[nf + 4]) for r in body],
        [int(r[nf + 5]) for r in body])


def concat(datasets: Sequence[LabeledDataset]) -> LabeledDataset:
    names = datasets[0].feature_names
    for d in datasets[1:]:
        if d.feature_names != names:
            raise SamplingError("cannot concatenate datasets with different features")
    cat = np.concatenate
    return LabeledDataset(cat([d.X for d in datasets]), cat([d.y for d in datasets]), names,
                          cat([d.provenance for d in datasets]), cat([d.lon for d in datasets]),
                          cat([d.lat for d in datasets]), cat([d.year for d in datasets]),
                          cat([d.month for d in datasets]))


# ---------------------------------------------------------------------------
# Point generation
# ---------------------------------------------------------------------------

def destination(lon: float, lat: float, distance_m: float, bearing_rad: float):
    """Point reached from (lon, lat) along a great circle (spherical direct problem)."""
    phi1 = math.radians(lat)
    lam1 = math.radians(lon)
    delta = distance_m / EARTH_RADIUS_M
    sin_phi2 = (math.sin(phi1) * math.cos(delta)
                + math.cos(phi1) * math.sin(delta) * math.cos(bearing_rad))
    phi2 = math.asin(max(-1.0, min(1.0, sin_phi2)))
    lam2 = lam1 + math.atan2(math.sin(bearing_rad) * math.sin(delta) * math.cos(phi1),
                             math.cos(delta) - math.sin(phi1) * sin_phi2)
    lon2 = (math.degrees(lam2) + 540.0) % 360.0 - 180.0
    return lon2, math.degrees(phi2)


def pseudo_presence(rec: OccurrenceRecord, k: int = 2, rng_seed: int = 0,
                    default_uncertainty_m: float = DEFAULT_UNCERTAINTY_M):
    """k points uniform in area on the geodesic disk of the record's uncertainty.

    Distance is ``r*sqrt(u)`` with a uniform bearing. When coordinate rounding
    pushes the computed great-circle distance past ``r`` (only plausible for
    sub-millimeter radii or at the poles), the step is halved along the same
    bearing, down to the record itself, so every point satisfies the bound.
    """
    if k < 0:
        raise SamplingError("k must be >= 0")
    r = default_uncertainty_m if rec.uncertainty_m is None else rec.uncertainty_m
    if r == 0 or k == 0:
        return [(rec.longitude, rec.latitude)] * k
    rng = np.random.default_rng(rng_seed)
    out = []
    for _ in range(k):
        u, v = rng.random(2)
        d = r * math.sqrt(u)
        point = (rec.longitude, rec.latitude)
        for _ in range(64):
            if d == 0:
                break
            lon, lat = destination(rec.longitude, rec.latitude, d, 2.0 * math.pi * v)
            if haversine_m(rec.longitude, rec.latitude, lon, lat) <= r:
                point = (lon, lat)
                break
            d /= 2.0
        out.append(point)
    return out


EDGE_STEP_DEG = 0.01


def _densify(ring: np.ndarray, step: float = EDGE_STEP_DEG) -> np.ndarray:
    """Subdivide edges, straight in lon/lat, into pieces of at most ``step`` degrees.

    Polygon membership treats edges as straight lines in lon/lat, while the
    distance below measures to great-circle arcs; on short pieces the two
    agree to about a centimeter.
    """
    out = [ring[:1]]
    for a, b in zip(ring[:-1], ring[1:]):
        n = max(1, math.ceil(float(np.abs(b - a).max()) / step))
        t = np.arange(1, n + 1)[:, None] / n
        out.append(a + t * (b - a))
    return np.concatenate(out)


def _unit(lon, lat) -> np.ndarray:
    lo, la = np.radians(lon), np.radians(lat)
    return np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], -1)


def _point_segment_distance_m(lon, lat, ring: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Great-circle distance from points to the closest edge of a ring."""
    verts = _unit(*_densify(ring).T)
    a, b = verts[:-1], verts[1:]
    n = np.cross(a, b)
    norm = np.linalg.norm(n, axis=1)
    n = n / np.where(norm > 0, norm, 1.0)[:, None]
    p_all = _unit(np.ravel(lon), np.ravel(lat))
    out = np.empty(len(p_all))
    for s in range(0, len(p_all), chunk):
        p = p_all[s:s + chunk]
        da = np.arccos(np.clip(p @ a.T, -1.0, 1.0))
        db = np.arccos(np.clip(p @ b.T, -1.0, 1.0))
        d = np.minimum(da, db)
        pn = p @ n.T
        proj = p[:, None, :] - pn[..., None] * n[None]
        # the foot of the perpendicular lies on the arc when it sits between a and b
        on_arc = ((np.einsum("sk,psk->ps", np.cross(a, n), proj) <= 0)
                  & (np.einsum("sk,psk->ps", np.cross(b, n), proj) >= 0) & (norm > 0))
        cross_track = np.abs(np.arcsin(np.clip(pn, -1.0, 1.0)))
        d = np.where(on_arc, np.minimum(d, cross_track), d)
        out[s:s + chunk] = d.min(axis=1)
    return out.reshape(np.shape(lon)) * EARTH_RADIUS_M


def boundary_distance_m(lon, lat, s: PolygonSet) -> np.ndarray:
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    best = np.full(lon.shape, np.inf)
    for ring in s.rings():
        best = np.minimum(best, _point_segment_distance_m(lon, lat, ring))
    return best


def eligible_absence_cells(range_maps: PolygonSet, study_region: GridSpec, valid_mask,
                           buffer_m: float = 0.0) -> np.ndarray:
    """Flat indices of valid cells whose centers are outside the range map (and buffer)."""
    valid = np.asarray(valid_mask.values != 0 if isinstance(valid_mask, Grid) else valid_mask,
                       dtype=bool)
    if isinstance(valid_mask, Grid):
        valid &= ~valid_mask.mask
    if valid.shape != study_region.shape:
        raise SamplingError("valid mask does not match the study region")
    lon, lat = study_region.cell_centers()
    ok = valid.ravel().copy()
    cand = np.flatnonzero(ok)
    if len(range_maps.polygons) and len(cand):
        inside = points_in_polygonset(lon.ravel()[cand], lat.ravel()[cand], range_maps)
        ok[cand[inside]] = False
        cand = np.flatnonzero(ok)
        if buffer_m > 0 and len(cand):
            near = boundary_distance_m(lon.ravel()[cand], lat.ravel()[cand], range_maps) < buffer_m
            ok[cand[near]] = False
    return np.flatnonzero(ok)


def pseudo_absence(range_maps: PolygonSet, study_region: GridSpec, valid_mask, n: int,
                   buffer_m: float = 0.0, rng_seed: int = 0):
    """n distinct cell centers drawn uniformly from the eligible cells.

    ``valid_mask`` is a boolean array (or 0/1 grid) over ``study_region``.
    """
    if n < 1:
        raise SamplingError("n must be >= 1")
    cells = eligible_absence_cells(range_maps, study_region, valid_mask, buffer_m)
    if len(cells) < n:
        raise SamplingError(
            f"only {len(cells)} eligible pseudo-absence cells for {n} requested points")
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(cells, size=n, replace=False)
    lon, lat = study_region.cell_centers()
    return list(zip(lon.ravel()[chosen].tolist(), lat.ravel()[chosen].tolist()))


# ---------------------------------------------------------------------------
# Feature extraction and splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledPoint:
    lon: float
    lat: float
    label: int
    provenance: str
    year: int
    month: int


def climatology(stacks: Mapping[tuple[int, int], FeatureStack], month: int) -> FeatureStack:
    """Per-layer mean over all years of ``month``; nodata anywhere gives nodata."""
    same = [stacks[k] for k in sorted(stacks) if k[1] == month]
    if not same:
        raise SamplingError(f"no stack for month {month} in any year")
    first = same[0]
    layers = []
    for name, g in first.layers:
        vals = np.stack([st.layer(name).values for st in same])
        mask = np.any(np.stack([st.layer(name).mask for st in same]), axis=0)
        if g.kind == "categorical":
            mean = vals[0]
        else:
            mean = vals.mean(axis=0)
        layers.append((name, Grid(g.header, mean, mask, g.kind)))
    return FeatureStack(first.spec, tuple(layers), month, None)


def extract_features(points: Iterable, stacks: Mapping[tuple[int, int], FeatureStack],
                     feature_names: Sequence[str], fallback: bool = False):
    """Read each point's features from its (year, month) stack.

    Returns ``(dataset, n_dropped)``. Points on nodata in any layer (or off the
    stack) are dropped; order of the survivors is preserved. A missing stack
    is an error unless ``fallback`` substitutes that month's climatology.
    """
    points = [p if isinstance(p, LabeledPoint) else LabeledPoint(*p) for p in points]
    feature_names = list(feature_names)
    groups: dict[tuple[int, int], list[int]] = {}
    for i, p in enumerate(points):
        groups.setdefault((p.year, p.month), []).append(i)
    X = np.full((len(points), len(feature_names)), np.nan)
    clim_cache = {}
    for key, idx in groups.items():
        st = stacks.get(key)
        if st is None:
            if not fallback:
                raise SamplingError(f"no feature stack for (year, month) = {key}")
            if key[1] not in clim_cache:
                clim_cache[key[1]] = climatology(stacks, key[1])
            st = clim_cache[key[1]]
        lon = np.array([points[i].lon for i in idx])
        lat = np.array([points[i].lat for i in idx])
        X[idx] = stack_points(st, lon, lat, feature_names)
    keep = ~np.isnan(X).any(axis=1) if len(points) else np.zeros(0, bool)
    dropped = int((~keep).sum())
    if dropped:
        log.info("dropped %d of %d points on nodata", dropped, len(points))
    kept = [p for p, k in zip(points, keep) if k]
    ds = LabeledDataset(
        X[keep], [p.label for p in kept], feature_names, [p.provenance for p in kept],
        [p.lon for p in kept], [p.lat for p in kept], [p.year for p in kept],
        [p.month for p in kept])
    return ds, dropped


def split_counts(n: int, fraction_tenths: int = 7) -> int:
    """round-half-up of n * fraction_tenths / 10 in exact integer arithmetic."""
    return (fraction_tenths * n + 5) // 10


def split_70_30(ds: LabeledDataset, rng_seed: int = 0):
    """Stratified 70/30 split.

    Overall train size is round(0.7 n); per class it is floor or ceil of 70%
    of that class, allotted by largest remainder (ties to the lower label).
    """
    idx_by_class = {c: np.flatnonzero(ds.y == c) for c in (0, 1)}
    for c, idx in idx_by_class.items():
        if len(idx) < 2:
            raise SamplingError(f"class {c} has {len(idx)} samples; need at least 2")
    floors = {c: (7 * len(idx)) // 10 for c, idx in idx_by_class.items()}
    rems = {c: (7 * len(idx)) % 10 for c, idx in idx_by_class.items()}
    extra = split_counts(len(ds)) - sum(floors.values())
    for c in sorted(rems, key=lambda c: (-rems[c], c))[:max(extra, 0)]:
        if rems[c]:
            floors[c] += 1
    rng = np.random.default_rng(rng_seed)
    train, test = [], []
    for c in (0, 1):
        perm = rng.permutation(idx_by_class[c])
        train.append(perm[:floors[c]])
        test.append(perm[floors[c]:])
    train_idx = np.sort(np.concatenate(train))
    test_idx = np.sort(np.concatenate(test))
    return ds.take(train_idx), ds.take(test_idx)


@dataclass
class SamplingReport:
    records_used: int = 0
    records_without_month: int = 0
    default_uncertainty_records: int = 0
    presence_points: int = 0
    absence_points: int = 0
    dropped_nodata: int = 0
    extra: dict = field(default_factory=dict)


def build_labeled_dataset(records: Sequence[OccurrenceRecord],
                          stacks: Mapping[tuple[int, int], FeatureStack],
                          range_maps: PolygonSet, feature_names: Sequence[str], *,
                          k_pseudo_presence: int = 2,
                          default_uncertainty_m: float = DEFAULT_UNCERTAINTY_M,
                          n_pseudo_absence: int | None = None, buffer_m: float = 0.0,
                          fallback: bool = False, master_seed: int):
    """Presences, pseudo-presences and pseudo-absences, with features attached.

    Pseudo-absences take their (year, month) from the presence points in a
    seeded shuffled round-robin, so both classes share one temporal profile.
    """
    report = SamplingReport()
    points: list[LabeledPoint] = []
    for i, rec in enumerate(records):
        if rec.event_month is None:
            report.records_without_month += 1
            continue
        if (rec.event_year, rec.event_month) not in stacks and not fallback:
            report.extra["records_without_stack"] = report.extra.get(
                "records_without_stack", 0) + 1
            continue
        if rec.uncertainty_m is None:
            report.default_uncertainty_records += 1
            log.debug("record %d has no uncertainty; using %g m", i, default_uncertainty_m)
        report.records_used += 1
        ym = (rec.event_year, rec.event_month)
        points.append(LabeledPoint(rec.longitude, rec.latitude, 1, PRESENCE, *ym))
        for lon, lat in pseudo_presence(rec, k_pseudo_presence, mix_seed(master_seed, 1, i),
                                        default_uncertainty_m):
            points.append(LabeledPoint(lon, lat, 1, PSEUDO_PRESENCE, *ym))
    if not points:
        raise SamplingError("no usable occurrence records")
    report.presence_points = len(points)

    n_abs = len(points) if n_pseudo_absence is None else n_pseudo_absence
    first = next(iter(stacks.values()))
    valid = np.ones(first.spec.shape, dtype=bool)
    for st in stacks.values():
        valid &= st.valid_mask()
    locs = pseudo_absence(range_maps, first.spec, valid, n_abs, buffer_m,
                          mix_seed(master_seed, 2))
    order = np.random.default_rng(mix_seed(master_seed, 3)).permutation(len(points))
    for j, (lon, lat) in enumerate(locs):
        src = points[order[j % len(points)]]
        points.append(LabeledPoint(lon, lat, 0, PSEUDO_ABSENCE, src.year, src.month))
    report.absence_points = n_abs

    ds, dropped = extract_features(points, stacks, feature_names, fallback)
    report.dropped_nodata = dropped
    return ds, report
