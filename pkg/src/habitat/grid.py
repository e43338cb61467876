"""Raster data model and grid algebra on a regular lon/lat lattice.

Row 0 of every grid is the northern-most row (ESRI ASCII order). Cell
``(row, col)`` spans longitudes ``[xll + col*cs, xll + (col+1)*cs)`` and
latitudes ``[ytop - (row+1)*cs, ytop - row*cs)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_M = 6371008.8
EARTH_RADIUS_KM = EARTH_RADIUS_M / 1000.0

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
KINDS = (CONTINUOUS, CATEGORICAL)


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    ncols: int
    nrows: int
    xllcorner: float
    yllcorner: float
    cellsize: float

    def __post_init__(self):
        if int(self.ncols) != self.ncols or self.ncols < 1:
            raise GridError(f"ncols must be a positive integer, got {self.ncols}")
        if int(self.nrows) != self.nrows or self.nrows < 1:
            raise GridError(f"nrows must be a positive integer, got {self.nrows}")
        if not (math.isfinite(self.cellsize) and self.cellsize > 0):
            raise GridError(f"cellsize must be > 0, got {self.cellsize}")
        if not (-180.0 <= self.xllcorner < 360.0):
            raise GridError(f"xllcorner out of range [-180, 360): {self.xllcorner}")
        if not (-90.0 <= self.yllcorner <= 90.0):
            raise GridError(f"yllcorner out of range [-90, 90]: {self.yllcorner}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def ytop(self) -> float:
        return self.yllcorner + self.nrows * self.cellsize

    @property
    def xright(self) -> float:
        return self.xllcorner + self.ncols * self.cellsize

    def col_centers(self) -> np.ndarray:
        return self.xllcorner + (np.arange(self.ncols) + 0.5) * self.cellsize

    def row_centers(self) -> np.ndarray:
        """Latitude of each row's center, north to south."""
        return self.yllcorner + (self.nrows - np.arange(self.nrows) - 0.5) * self.cellsize

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(lon, lat) arrays of shape (nrows, ncols)."""
        lon, lat = np.meshgrid(self.col_centers(), self.row_centers())
        return lon, lat

    def locate(self, lon, lat) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Floor-index points into the lattice.

        Returns ``(row, col, inside)``; row/col are only meaningful where
        ``inside`` is true.
        """
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        col = np.floor((lon - self.xllcorner) / self.cellsize)
        row_from_bottom = np.floor((lat - self.yllcorner) / self.cellsize)
        inside = (
            np.isfinite(col) & np.isfinite(row_from_bottom)
            & (col >= 0) & (col < self.ncols)
            & (row_from_bottom >= 0) & (row_from_bottom < self.nrows)
        )
        col = np.where(inside, col, 0).astype(np.int64)
        row = np.where(inside, self.nrows - 1 - row_from_bottom, 0).astype(np.int64)
        return row, col, inside


def as_spec(s: GridSpec) -> GridSpec:
    """Strip any header extras, leaving a plain :class:`GridSpec`."""
    if type(s) is GridSpec:
        return s
    return GridSpec(s.ncols, s.nrows, s.xllcorner, s.yllcorner, s.cellsize)


@dataclass(frozen=True)
class AsciiGridHeader(GridSpec):
    nodata_value: float = -9999.0

    def __post_init__(self):
        super().__post_init__()
        if not math.isfinite(self.nodata_value):
            raise GridError(f"nodata_value must be finite, got {self.nodata_value}")

    @property
    def spec(self) -> GridSpec:
        return as_spec(self)

    @classmethod
    def from_spec(cls, spec: GridSpec, nodata_value: float = -9999.0) -> "AsciiGridHeader":
        return cls(spec.ncols, spec.nrows, spec.xllcorner, spec.yllcorner,
                   spec.cellsize, nodata_value)


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable raster: values of shape (nrows, ncols) plus a nodata mask.

    Masked cells always hold ``header.nodata_value`` in ``values``.
    """

    header: AsciiGridHeader
    values: np.ndarray
    mask: np.ndarray = None
    kind: str = CONTINUOUS

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GridError(f"unknown grid kind {self.kind!r}")
        values = np.array(self.values, dtype=np.float64)
        if values.shape != self.header.shape:
            if values.size != self.header.nrows * self.header.ncols:
                raise GridError(
                    f"expected {self.header.nrows}x{self.header.ncols} values, got {values.size}")
            values = values.reshape(self.header.shape)
        if self.mask is None:
            mask = ~np.isfinite(values) | (values == self.header.nodata_value)
        else:
            mask = np.array(self.mask, dtype=bool).reshape(self.header.shape)
            mask = mask | ~np.isfinite(values)
        values[mask] = self.header.nodata_value
        if self.kind == CATEGORICAL:
            valid = values[~mask]
            if np.any(valid != np.round(valid)):
                raise GridError("categorical grid holds non-integer values")
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_array(cls, spec: GridSpec, values, mask=None, kind: str = CONTINUOUS,
                   nodata_value: float = -9999.0) -> "Grid":
        header = spec if isinstance(spec, AsciiGridHeader) else AsciiGridHeader.from_spec(
            spec, nodata_value)
        return cls(header, values, mask, kind)

    @property
    def spec(self) -> GridSpec:
        return self.header.spec

    @property
    def shape(self) -> tuple[int, int]:
        return self.header.shape

    def masked(self) -> np.ndarray:
        """Float copy of the values with nodata replaced by NaN."""
        out = self.values.copy()
        out[self.mask] = np.nan
        return out

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.header == other.header
            and self.kind == other.kind
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def haversine_m(lon1, lat1, lon2, lat2):
    """Great-circle distance in meters on the spherical Earth."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(a, dtype=float))
                              for a in (lon1, lat1, lon2, lat2))
    h = (np.sin((lat2 - lat1) / 2.0) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def resample(src: Grid, target: GridSpec, method: str = "nearest") -> Grid:
    """Resample ``src`` onto ``target`` by nearest or bilinear interpolation.

    Bilinear uses the four source cell centers around each target center; if
    any of them is nodata or off-grid, the nearest value is used instead.
    Target cells whose center falls outside the source extent are nodata.
    """
    if method not in ("nearest", "bilinear"):
        raise GridError(f"unknown resampling method {method!r}")
    if method == "bilinear" and src.kind == CATEGORICAL:
        raise GridError("bilinear resampling is not defined for categorical grids")
    target = as_spec(target)
    header = AsciiGridHeader.from_spec(target, src.header.nodata_value)
    if target == src.spec:
        return Grid(header, src.values, src.mask, src.kind)

    lon, lat = target.cell_centers()
    row, col, inside = src.spec.locate(lon, lat)
    out = np.full(target.shape, src.header.nodata_value, dtype=np.float64)
    out_mask = np.ones(target.shape, dtype=bool)
    near_vals = src.values[row, col]
    near_mask = src.mask[row, col] | ~inside
    out[~near_mask] = near_vals[~near_mask]
    out_mask[:] = near_mask

    if method == "bilinear":
        s = src.spec
        fx = (lon - s.xllcorner) / s.cellsize - 0.5
        fy = (s.ytop - lat) / s.cellsize - 0.5
        c0 = np.floor(fx).astype(np.int64)
        r0 = np.floor(fy).astype(np.int64)
        tx = fx - c0
        ty = fy - r0
        ok = inside & (c0 >= 0) & (c0 + 1 < s.ncols) & (r0 >= 0) & (r0 + 1 < s.nrows)
        c0c = np.clip(c0, 0, s.ncols - 2) if s.ncols > 1 else np.zeros_like(c0)
        r0c = np.clip(r0, 0, s.nrows - 2) if s.nrows > 1 else np.zeros_like(r0)
        c1c = np.minimum(c0c + 1, s.ncols - 1)
        r1c = np.minimum(r0c + 1, s.nrows - 1)
        v = src.values
        m = src.mask
        ok &= ~(m[r0c, c0c] | m[r0c, c1c] | m[r1c, c0c] | m[r1c, c1c])
        interp = ((1 - ty) * ((1 - tx) * v[r0c, c0c] + tx * v[r0c, c1c])
                  + ty * ((1 - tx) * v[r1c, c0c] + tx * v[r1c, c1c]))
        out[ok] = interp[ok]
        out_mask[ok] = False
    return Grid(header, out, out_mask, src.kind)


def sample_at(g: Grid, lon: float, lat: float) -> float | None:
    """Value of the cell containing (lon, lat), or None for nodata/outside."""
    row, col, inside = g.spec.locate(lon, lat)
    if not inside or g.mask[row, col]:
        return None
    return float(g.values[row, col])


def sample_points(g: Grid, lon, lat) -> np.ndarray:
    """Vectorised :func:`sample_at`; nodata and outside points become NaN."""
    row, col, inside = g.spec.locate(lon, lat)
    vals = np.where(inside, g.values[row, col], np.nan)
    return np.where(inside & ~g.mask[row, col], vals, np.nan)


def distance_transform(features: Grid, spec: GridSpec | None = None) -> Grid:
    """Great-circle distance (m) from each cell center to the nearest feature cell center.

    Exact: equal to a brute-force scan over all feature cells. Feature rows are
    visited in order of latitude separation and the scan stops once the
    meridional lower bound ``R*|dlat|`` exceeds every current best in the row.
    Within one feature row the nearest feature is the one with the smallest
    longitude gap, so a binary search suffices.
    """
    spec = features.spec if spec is None else as_spec(spec)
    if features.spec != spec:
        raise GridError("feature mask does not conform to the target spec")
    mask = (features.values != 0) & ~features.mask
    if not mask.any():
        raise GridError("distance transform needs at least one feature cell")

    lons = spec.col_centers()
    lats = spec.row_centers()
    lat_rad = np.radians(lats)
    feature_rows = np.flatnonzero(mask.any(axis=1))
    feature_cols = {r: np.flatnonzero(mask[r]) for r in feature_rows}
    out = np.empty(spec.shape, dtype=np.float64)
    # beyond 180 degrees the longitude gap stops being monotone in distance
    wraps = spec.ncols * spec.cellsize > 180.0
    all_cols = np.arange(spec.ncols)

    for r in range(spec.nrows):
        best = np.full(spec.ncols, np.inf)
        gaps = np.abs(lat_rad[feature_rows] - lat_rad[r])
        for fr_pos in np.argsort(gaps, kind="stable"):
            if EARTH_RADIUS_M * gaps[fr_pos] > best.max():
                break
            fr = feature_rows[fr_pos]
            fc = feature_cols[fr]
            if wraps:
                d = haversine_m(lons[:, None], lats[r], lons[fc][None, :], lats[fr]).min(axis=1)
            else:
                pos = np.searchsorted(fc, all_cols)
                left = fc[np.clip(pos - 1, 0, len(fc) - 1)]
                right = fc[np.clip(pos, 0, len(fc) - 1)]
                nearest = np.where(np.abs(right - all_cols) < np.abs(all_cols - left),
                                   right, left)
                d = haversine_m(lons, lats[r], lons[nearest], lats[fr])
            np.minimum(best, d, out=best)
        out[r] = best
    out[mask] = 0.0
    return Grid.from_array(spec, out)


def cell_area_km2(spec: GridSpec, row: int) -> float:
    """Spherical area of one cell in ``row``: R^2 * dlon * (sin(top) - sin(bottom))."""
    if not 0 <= row < spec.nrows:
        raise GridError(f"row {row} outside [0, {spec.nrows})")
    top = spec.ytop - row * spec.cellsize
    bottom = top - spec.cellsize
    return (EARTH_RADIUS_KM ** 2 * math.radians(spec.cellsize)
            * (math.sin(math.radians(top)) - math.sin(math.radians(bottom))))


def row_areas_km2(spec: GridSpec) -> np.ndarray:
    return np.array([cell_area_km2(spec, r) for r in range(spec.nrows)])


@dataclass(frozen=True)
class FeatureStack:
    spec: GridSpec
    layers: tuple[tuple[str, Grid], ...]
    month: int | None = None
    year: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "spec", as_spec(self.spec))
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [n for n, _ in self.layers]
        if len(set(names)) != len(names):
            raise GridError(f"duplicate layer names in stack: {names}")
        for name, g in self.layers:
            if g.spec != self.spec:
                raise GridError(f"layer {name!r} does not conform to the stack spec")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.layers]

    def layer(self, name: str) -> Grid:
        for n, g in self.layers:
            if n == name:
                return g
        raise KeyError(name)

    def valid_mask(self) -> np.ndarray:
        """True where every layer has data."""
        valid = np.ones(self.spec.shape, dtype=bool)
        for _, g in self.layers:
            valid &= ~g.mask
        return valid


def build_stack(layers: Iterable[tuple[str, Grid, str]], target: GridSpec,
                month: int | None = None, year: int | None = None) -> FeatureStack:
    """Resample named layers onto ``target`` (bilinear continuous, nearest categorical)."""
    target = as_spec(target)
    layers = list(layers)
    names = [name for name, _, _ in layers]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise GridError(f"duplicate layer names: {dupes}")
    out = []
    for name, g, kind in layers:
        if kind != g.kind:
            g = Grid(g.header, g.values, g.mask, kind)
        method = "nearest" if kind == CATEGORICAL else "bilinear"
        out.append((name, resample(g, target, method)))
    return FeatureStack(target, tuple(out), month, year)


# Feature columns: a continuous layer contributes one column named after it;
# a categorical layer contributes one indicator column per class, "name=value".

def split_feature_name(name: str) -> tuple[str, float | None]:
    if "=" in name:
        layer, value = name.split("=", 1)
        return layer, float(value)
    return name, None


def feature_layer(name: str) -> str:
    return split_feature_name(name)[0]


def feature_names_for(stacks: Sequence[FeatureStack]) -> list[str]:
    """Column names for a set of stacks sharing one layer list.

    Categorical classes are the sorted union over all stacks.
    """
    first = stacks[0]
    names = []
    for lname, g in first.layers:
        if g.kind == CATEGORICAL:
            classes = set()
            for st in stacks:
                lg = st.layer(lname)
                classes.update(np.unique(lg.values[~lg.mask]).tolist())
            names.extend(f"{lname}={int(c)}" for c in sorted(classes))
        else:
            names.append(lname)
    return names


def _columns(layer_values: dict[str, np.ndarray], feature_names: Sequence[str]) -> np.ndarray:
    cols = []
    for fname in feature_names:
        lname, cls = split_feature_name(fname)
        if lname not in layer_values:
            raise GridError(f"feature {fname!r} has no layer {lname!r} in the stack")
        v = layer_values[lname]
        if cls is None:
            cols.append(v)
        else:
            cols.append(np.where(np.isnan(v), np.nan, (v == cls).astype(np.float64)))
    return np.column_stack(cols) if cols else np.empty((0, 0))


def stack_matrix(stack: FeatureStack, feature_names: Sequence[str]) -> np.ndarray:
    """(nrows*ncols, n_features) matrix in row-major cell order; NaN marks nodata."""
    values = {n: g.masked().ravel() for n, g in stack.layers}
    return _columns(values, feature_names)


def stack_points(stack: FeatureStack, lon, lat, feature_names: Sequence[str]) -> np.ndarray:
    """Feature rows for points; NaN where a layer is nodata or the point is outside."""
    values = {n: sample_points(g, lon, lat) for n, g in stack.layers}
    return _columns(values, feature_names)
