"""Readers and writers for the external file formats.

* ESRI ASCII grids (six-line header, row-major body, top row first)
* GBIF-style delimited occurrence tables
* GeoJSON FeatureCollections of Polygon / MultiPolygon features
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .grid import CONTINUOUS, AsciiGridHeader, Grid, GridError

log = logging.getLogger(__name__)

HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")
_CENTER_KEYS = {"xllcenter": "xllcorner", "yllcenter": "yllcorner"}


class ParseError(ValueError):
    """Malformed input; ``line`` and ``column`` are 1-based when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


# ---------------------------------------------------------------------------
# ASCII grid
# ---------------------------------------------------------------------------

def _number(token: str, lineno: int, col: int, integer: bool = False) -> float:
    try:
        value = int(token) if integer else float(token)
    except ValueError:
        raise ParseError(f"expected {'an integer' if integer else 'a number'}, got {token!r}",
                         lineno, col) from None
    if not integer and not math.isfinite(value):
        raise ParseError(f"non-finite value {token!r}", lineno, col)
    return value


def _token_column(line: str, index: int) -> int:
    for i, m in enumerate(re.finditer(r"\S+", line)):
        if i == index:
            return m.start() + 1
    return len(line) + 1


def parse_ascii_grid(text: str, kind: str = CONTINUOUS) -> Grid:
    """Parse an ESRI ASCII grid.

    Header keys are case-insensitive and may appear in any order within the
    first six lines; XLLCENTER/YLLCENTER are accepted and converted to corners.
    The body may wrap lines freely as long as it holds exactly nrows*ncols
    numbers.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"input is not valid UTF-8 ({exc.reason})") from None
    lines = text.splitlines()
    raw: dict[str, tuple[str, int, int]] = {}
    centered = set()
    for i in range(6):
        lineno = i + 1
        if i >= len(lines):
            raise ParseError("truncated header", lineno, 1)
        parts = lines[i].split()
        if len(parts) != 2:
            raise ParseError(f"header line must be 'KEY value', got {lines[i]!r}", lineno, 1)
        key = parts[0].lower()
        if key in _CENTER_KEYS:
            centered.add(_CENTER_KEYS[key])
            key = _CENTER_KEYS[key]
        if key not in HEADER_KEYS:
            raise ParseError(f"unknown header key {parts[0]!r}", lineno, 1)
        if key in raw:
            raise ParseError(f"duplicate header key {parts[0]!r}", lineno, 1)
        raw[key] = (parts[1], lineno, _token_column(lines[i], 1))

    vals = {}
    for key, (tok, lineno, col) in raw.items():
        vals[key] = _number(tok, lineno, col, integer=key in ("ncols", "nrows"))
    half = vals["cellsize"] / 2.0
    for key in centered:
        vals[key] -= half
    try:
        header = AsciiGridHeader(vals["ncols"], vals["nrows"], vals["xllcorner"],
                                 vals["yllcorner"], vals["cellsize"],
                                 float(vals["nodata_value"]))
    except GridError as exc:
        raise ParseError(str(exc), 1) from None

    expected = header.nrows * header.ncols
    if expected > len(text):
        raise ParseError(f"header promises {expected} values but the input is too short",
                         len(lines) + 1, 1)
    values = np.empty(expected, dtype=np.float64)
    n = 0
    for i in range(6, len(lines)):
        tokens = lines[i].split()
        if not tokens:
            continue
        if n + len(tokens) > expected:
            col = _token_column(lines[i], expected - n)
            raise ParseError(f"too many values: expected {expected}", i + 1, col)
        try:
            values[n:n + len(tokens)] = [float(t) for t in tokens]
        except ValueError:
            for j, tok in enumerate(tokens):
                _number(tok, i + 1, _token_column(lines[i], j))
        chunk = values[n:n + len(tokens)]
        if not np.isfinite(chunk).all():
            j = int(np.flatnonzero(~np.isfinite(chunk))[0])
            raise ParseError(f"non-finite value {tokens[j]!r}", i + 1, _token_column(lines[i], j))
        n += len(tokens)
    if n != expected:
        raise ParseError(f"expected {expected} values, found {n}", len(lines) + 1, 1)
    try:
        return Grid(header, values.reshape(header.shape), kind=kind)
    except GridError as exc:
        raise ParseError(str(exc)) from None


def _fmt(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_ascii_grid(grid: Grid) -> str:
    """Serialise a grid; values are written with shortest round-trip precision."""
    h = grid.header
    out = io.StringIO()
    out.write(f"NCOLS {h.ncols}\n")
    out.write(f"NROWS {h.nrows}\n")
    out.write(f"XLLCORNER {_fmt(h.xllcorner)}\n")
    out.write(f"YLLCORNER {_fmt(h.yllcorner)}\n")
    out.write(f"CELLSIZE {_fmt(h.cellsize)}\n")
    out.write(f"NODATA_VALUE {_fmt(h.nodata_value)}\n")
    for row in grid.values:
        out.write(" ".join(_fmt(v) for v in row.tolist()))
        out.write("\n")
    return out.getvalue()


def read_ascii_grid(path, kind: str = CONTINUOUS) -> Grid:
    with open(path, encoding="utf-8") as f:
        return parse_ascii_grid(f.read(), kind)


def save_ascii_grid(grid: Grid, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(write_ascii_grid(grid))


# ---------------------------------------------------------------------------
# Occurrences
# ---------------------------------------------------------------------------

OCCURRENCE_COLUMNS = ("decimalLatitude", "decimalLongitude", "eventDate",
                      "coordinateUncertaintyInMeters")
_DATE = re.compile(r"^\s*(\d{4})(?:-(\d{1,2}))?(?:-(\d{1,2}))?")


@dataclass(frozen=True)
class OccurrenceRecord:
    latitude: float
    longitude: float
    event_year: int
    event_month: int | None = None
    uncertainty_m: float | None = None

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")
        if not 1900 <= self.event_year <= 2100:
            raise ValueError(f"event year out of range: {self.event_year}")
        if self.event_month is not None and not 1 <= self.event_month <= 12:
            raise ValueError(f"event month out of range: {self.event_month}")
        if self.uncertainty_m is not None and not (self.uncertainty_m >= 0):
            raise ValueError(f"negative uncertainty: {self.uncertainty_m}")


@dataclass
class OccurrenceTable:
    """Parsed occurrence rows plus per-reason counts of skipped rows."""

    records: list[OccurrenceRecord]
    skipped: Counter = field(default_factory=Counter)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def n_skipped(self) -> int:
        return sum(self.skipped.values())


def parse_event_date(text: str) -> tuple[int, int | None] | None:
    m = _DATE.match(text or "")
    if not m:
        return None
    year = int(m.group(1))
    month = int(m.group(2)) if m.group(2) else None
    if month is not None and not 1 <= month <= 12:
        return None
    return year, month


def parse_occurrences(text: str, delimiter: str = "\t") -> OccurrenceTable:
    """Parse a GBIF-style occurrence table.

    Rows with missing or out-of-range coordinates, or an unusable eventDate,
    are skipped and counted by reason. An empty or unparseable uncertainty is
    recorded as absent.
    """
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty occurrence file", 1) from None
    header = [h.strip() for h in header]
    missing = [c for c in OCCURRENCE_COLUMNS if c not in header]
    if missing:
        raise ParseError(f"missing mandatory column(s): {', '.join(missing)}", 1)
    idx = {c: header.index(c) for c in OCCURRENCE_COLUMNS}

    records = []
    skipped: Counter = Counter()
    for row in reader:
        if not any(cell.strip() for cell in row):
            continue
        if len(row) < len(header):
            row = row + [""] * (len(header) - len(row))
        try:
            lat = float(row[idx["decimalLatitude"]])
            lon = float(row[idx["decimalLongitude"]])
        except ValueError:
            skipped["bad_coordinates"] += 1
            continue
        if not (math.isfinite(lat) and math.isfinite(lon)):
            skipped["bad_coordinates"] += 1
            continue
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            skipped["coordinates_out_of_range"] += 1
            continue
        date = parse_event_date(row[idx["eventDate"]])
        if date is None or not 1900 <= date[0] <= 2100:
            skipped["bad_event_date"] += 1
            continue
        unc_text = row[idx["coordinateUncertaintyInMeters"]].strip()
        uncertainty = None
        if unc_text:
            try:
                uncertainty = float(unc_text)
            except ValueError:
                uncertainty = None
            if uncertainty is not None and not (math.isfinite(uncertainty) and uncertainty >= 0):
                uncertainty = None
        records.append(OccurrenceRecord(lat, lon, date[0], date[1], uncertainty))
    if skipped:
        log.warning("skipped %d occurrence rows: %s", sum(skipped.values()), dict(skipped))
    return OccurrenceTable(records, skipped)


def write_occurrences(records, delimiter: str = "\t") -> str:
    out = io.StringIO()
    w = csv.writer(out, delimiter=delimiter, lineterminator="\n")
    w.writerow(["gbifID", *OCCURRENCE_COLUMNS])
    for i, r in enumerate(records):
        date = f"{r.event_year:04d}" + (f"-{r.event_month:02d}" if r.event_month else "")
        unc = "" if r.uncertainty_m is None else _fmt(r.uncertainty_m)
        w.writerow([i + 1, repr(float(r.latitude)), repr(float(r.longitude)), date, unc])
    return out.getvalue()


# ---------------------------------------------------------------------------
# Polygons
# ---------------------------------------------------------------------------

RANGE_MAP = "range-map"
ZONE = "zone"


@dataclass(frozen=True, eq=False)
class Polygon:
    """One polygon part: ``rings[0]`` is the shell, the rest are holes.

    Each ring is an (n, 2) array of lon/lat with first vertex == last.
    """

    name: str
    rings: tuple[np.ndarray, ...]


@dataclass(frozen=True, eq=False)
class PolygonSet:
    polygons: tuple[Polygon, ...]
    role: str = RANGE_MAP

    @property
    def names(self) -> list[str]:
        seen = []
        for p in self.polygons:
            if p.name not in seen:
                seen.append(p.name)
        return seen

    def rings(self, name: str | None = None) -> list[np.ndarray]:
        return [r for p in self.polygons if name is None or p.name == name for r in p.rings]

    def subset(self, name: str) -> "PolygonSet":
        polys = tuple(p for p in self.polygons if p.name == name)
        if not polys:
            raise KeyError(name)
        return PolygonSet(polys, self.role)


def _ring(coords, feature: str) -> np.ndarray:
    try:
        ring = np.asarray(coords, dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(f"feature {feature!r}: ring coordinates are not numeric") from None
    if ring.ndim != 2 or ring.shape[1] < 2:
        raise ParseError(f"feature {feature!r}: ring must be a list of [lon, lat] positions")
    ring = ring[:, :2]
    if not np.isfinite(ring).all():
        raise ParseError(f"feature {feature!r}: non-finite vertex")
    if len(ring) < 4:
        raise ParseError(f"feature {feature!r}: ring has {len(ring)} vertices, need at least 4")
    if not np.array_equal(ring[0], ring[-1]):
        raise ParseError(f"feature {feature!r}: ring is not closed")
    ring.flags.writeable = False
    return ring


def parse_polygons(text: str, role: str = RANGE_MAP) -> PolygonSet:
    """Parse a GeoJSON FeatureCollection (or single Feature) of polygons.

    The feature name comes from ``properties.name`` (any case), then the
    feature ``id``, then its position in the collection.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise ParseError("polygon document must be a JSON object")
    if doc.get("type") == "Feature":
        features = [doc]
    elif doc.get("type") == "FeatureCollection":
        features = doc.get("features")
        if not isinstance(features, list):
            raise ParseError("FeatureCollection without a 'features' list")
    else:
        raise ParseError(f"unsupported document type {doc.get('type')!r}")

    polygons = []
    for i, feat in enumerate(features):
        if not isinstance(feat, dict):
            raise ParseError(f"feature #{i} is not an object")
        props = feat.get("properties") or {}
        name = None
        if isinstance(props, dict):
            for key in ("name", "Name", "NAME"):
                if props.get(key) is not None:
                    name = str(props[key])
                    break
        if name is None:
            name = str(feat["id"]) if feat.get("id") is not None else f"feature_{i}"
        geom = feat.get("geometry")
        if not isinstance(geom, dict):
            raise ParseError(f"feature {name!r} has no geometry")
        gtype = geom.get("type")
        coords = geom.get("coordinates")
        if gtype == "Polygon":
            parts = [coords]
        elif gtype == "MultiPolygon":
            parts = coords
        else:
            raise ParseError(f"feature {name!r}: unsupported geometry type {gtype!r}")
        if not isinstance(parts, list) or not parts:
            raise ParseError(f"feature {name!r}: empty coordinates")
        for part in parts:
            if not isinstance(part, list) or not part:
                raise ParseError(f"feature {name!r}: polygon without rings")
            polygons.append(Polygon(name, tuple(_ring(r, name) for r in part)))
    return PolygonSet(tuple(polygons), role)


def write_polygons(s: PolygonSet) -> str:
    features = []
    for name in s.names:
        parts = [[r.tolist() for r in p.rings] for p in s.polygons if p.name == name]
        geom = ({"type": "Polygon", "coordinates": parts[0]} if len(parts) == 1
                else {"type": "MultiPolygon", "coordinates": parts})
        features.append({"type": "Feature", "properties": {"name": name}, "geometry": geom})
    return json.dumps({"type": "FeatureCollection", "features": features}, indent=1)


def read_polygons(path, role: str = RANGE_MAP) -> PolygonSet:
    with open(path, encoding="utf-8") as f:
        return parse_polygons(f.read(), role)


def _on_segment(px, py, ax, ay, bx, by):
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    scale = np.maximum(np.abs(bx - ax) + np.abs(by - ay), 1e-300)
    within = ((px >= np.minimum(ax, bx)) & (px <= np.maximum(ax, bx))
              & (py >= np.minimum(ay, by)) & (py <= np.maximum(ay, by)))
    return within & (np.abs(cross) <= 1e-12 * scale)


def points_in_polygon(lon, lat, poly: Polygon) -> np.ndarray:
    """Even-odd test against one polygon part (shell + holes); edges count as inside."""
    px = np.asarray(lon, dtype=np.float64)
    py = np.asarray(lat, dtype=np.float64)
    inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    edge = np.zeros_like(inside)
    for ring in poly.rings:
        ax, ay = ring[:-1, 0], ring[:-1, 1]
        bx, by = ring[1:, 0], ring[1:, 1]
        for k in range(len(ax)):
            x0, y0, x1, y1 = ax[k], ay[k], bx[k], by[k]
            edge |= _on_segment(px, py, x0, y0, x1, y1)
            if y0 == y1:
                continue
            crosses = (y0 > py) != (y1 > py)
            xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            inside ^= crosses & (px < xint)
    return inside | edge


def points_in_polygonset(lon, lat, s: PolygonSet) -> np.ndarray:
    """Union over polygon parts of :func:`points_in_polygon`."""
    px = np.asarray(lon, dtype=np.float64)
    py = np.asarray(lat, dtype=np.float64)
    out = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    for poly in s.polygons:
        shell = poly.rings[0]
        bbox = ((px >= shell[:, 0].min()) & (px <= shell[:, 0].max())
                & (py >= shell[:, 1].min()) & (py <= shell[:, 1].max()))
        if not bbox.any():
            continue
        out |= bbox & points_in_polygon(px, py, poly)
    return out


def point_in_polygonset(p: tuple[float, float], s: PolygonSet) -> bool:
    """Whether the lon/lat point ``p`` lies in any polygon of ``s`` (edges inclusive)."""
    return bool(points_in_polygonset(p[0], p[1], s))
