"""Core spatial data model and file I/O.

Everything downstream works on a projected, meter-based plane: rasters carry a
:class:`GeoTransform`, vectors are plain coordinate tuples in world meters.
Supported formats are ESRI ASCII grids (.asc) for rasters, GeoJSON (RFC 7946)
and headered CSV for vectors. No reprojection, no geodesics.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

__all__ = [
    "GeoTransform",
    "DemGrid",
    "UavDetection",
    "SvObservation",
    "CoveragePolygon",
    "TileWindow",
    "read_dem",
    "write_ascii_grid",
    "tile_raster",
    "georeference_detection",
    "read_detections",
    "read_uav_detections",
    "read_sv_observations",
    "read_coverage",
    "write_detections_csv",
    "detections_to_geojson",
    "write_geojson",
    "read_geojson",
]

_UAV_FIELDS = ("x", "y", "area_m2", "confidence")
_SV_FIELDS = ("x", "y", "score")


@dataclass(frozen=True)
class GeoTransform:
    """Affine pixel-to-world mapping for north-up, square-cell rasters.

    ``origin_x``/``origin_y`` are the west/north edges of the raster in world
    meters; ``cell_size`` is the ground size of one pixel. The center of cell
    (col, row) sits at ``(origin_x + (col + 0.5) * cell_size,
    origin_y - (row + 0.5) * cell_size)``. ``epsg_hint`` is carried verbatim
    for provenance and never interpreted.
    """

    origin_x: float
    origin_y: float
    cell_size: float
    epsg_hint: int = 0

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValidationError(f"cell_size must be > 0, got {self.cell_size}")

    def pixel_to_world(self, col, row):
        """World coordinates of the center of cell (col, row)."""
        x = self.origin_x + (np.asarray(col, dtype=float) + 0.5) * self.cell_size
        y = self.origin_y - (np.asarray(row, dtype=float) + 0.5) * self.cell_size
        if np.ndim(col) == 0:
            return float(x), float(y)
        return x, y

    def world_to_pixel(self, x, y):
        """Continuous pixel coordinates (col, row) of a world point.

        The center of integer cell (c, r) maps to (c + 0.5, r + 0.5).
        """
        col = (np.asarray(x, dtype=float) - self.origin_x) / self.cell_size
        row = (self.origin_y - np.asarray(y, dtype=float)) / self.cell_size
        if np.ndim(x) == 0:
            return float(col), float(row)
        return col, row

    def world_to_cell(self, x, y):
        """Integer cell indices (col, row) containing a world point."""
        col, row = self.world_to_pixel(x, y)
        if np.ndim(col) == 0:
            return int(math.floor(col)), int(math.floor(row))
        return (
            np.floor(col).astype(np.int64),
            np.floor(row).astype(np.int64),
        )


@dataclass
class DemGrid:
    """Single-band elevation raster with geotransform and nodata sentinel."""

    values: np.ndarray
    transform: GeoTransform
    nodata: float = -9999.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("DEM values must be a 2-D array")
        finite = np.isfinite(self.values) | (self.values == self.nodata)
        if not finite.all():
            raise ValidationError("DEM contains non-finite, non-nodata values")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def nodata_mask(self) -> np.ndarray:
        return self.values == self.nodata


@dataclass(frozen=True)
class UavDetection:
    """One georeferenced UAV waste detection (bbox centroid plus area)."""

    centroid_x: float
    centroid_y: float
    area_m2: float
    confidence: float

    def __post_init__(self):
        if not self.area_m2 > 0:
            raise ValidationError(f"area_m2 must be > 0, got {self.area_m2}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(
                f"confidence must be in [0, 1], got {self.confidence}"
            )


@dataclass(frozen=True)
class SvObservation:
    """One street-view sample point; score counts positive patch classifications."""

    x: float
    y: float
    score: int

    def __post_init__(self):
        if not 0 <= self.score <= 12:
            raise ValidationError(f"score must be in [0, 12], got {self.score}")


def _ring_closed(ring) -> bool:
    return len(ring) >= 4 and tuple(ring[0]) == tuple(ring[-1])


def _segments_intersect(p1, p2, p3, p4) -> bool:
    """Proper intersection test for open segments (shared endpoints excluded)."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4)


def _ring_self_intersects(ring) -> bool:
    n = len(ring) - 1  # closing vertex repeats the first
    for i in range(n):
        a1, a2 = ring[i], ring[i + 1]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue  # adjacent through the closure
            if _segments_intersect(a1, a2, ring[j], ring[j + 1]):
                return True
    return False


@dataclass
class CoveragePolygon:
    """Closed planar polygon (outer ring plus optional holes) in world meters."""

    outer: list
    holes: list = field(default_factory=list)

    def __post_init__(self):
        self.outer = [(float(x), float(y)) for x, y in self.outer]
        self.holes = [[(float(x), float(y)) for x, y in h] for h in self.holes]
        for ring in [self.outer, *self.holes]:
            if not _ring_closed(ring):
                raise ValidationError(
                    "polygon ring must be closed (first vertex == last) "
                    "and have >= 3 distinct vertices"
                )
            if _ring_self_intersects(ring):
                raise ValidationError("polygon ring is self-intersecting")

    def bounds(self):
        xs = [p[0] for p in self.outer]
        ys = [p[1] for p in self.outer]
        return min(xs), min(ys), max(xs), max(ys)


# ---------------------------------------------------------------------------
# ESRI ASCII grid I/O
# ---------------------------------------------------------------------------

_ASC_HEADER_KEYS = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"}


def read_dem(path) -> DemGrid:
    """Read an ESRI ASCII grid (.asc).

    The six headers (ncols, nrows, xllcorner, yllcorner, cellsize,
    NODATA_value) are required, case-insensitive, and must precede the data
    block; each data row must sit on its own line with exactly ``ncols``
    values. Parse failures name the offending file line.
    """
    path = Path(path)
    header = {}
    data_rows = []
    data_row_lines = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()

    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if key in _ASC_HEADER_KEYS and len(header) < 6:
            if len(parts) != 2:
                raise ParseError(f"{path.name}: line {i + 1}: malformed header {lines[i]!r}")
            try:
                header[key] = float(parts[1])
            except ValueError:
                raise ParseError(
                    f"{path.name}: line {i + 1}: non-numeric header value {parts[1]!r}"
                ) from None
            i += 1
        else:
            break

    missing = _ASC_HEADER_KEYS - set(header)
    if missing:
        raise ParseError(
            f"{path.name}: line {i + 1}: missing header(s): {', '.join(sorted(missing))}"
        )
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    if ncols <= 0 or nrows <= 0:
        raise ParseError(f"{path.name}: ncols/nrows must be positive")

    for line_no in range(i, len(lines)):
        parts = lines[line_no].split()
        if not parts:
            continue
        row_idx = len(data_rows) + 1
        if len(parts) != ncols:
            raise ParseError(
                f"{path.name}: line {line_no + 1}: data row {row_idx} has "
                f"{len(parts)} values, expected {ncols}"
            )
        try:
            data_rows.append([float(v) for v in parts])
        except ValueError:
            bad = next(v for v in parts if not _is_number(v))
            raise ParseError(
                f"{path.name}: line {line_no + 1}: non-numeric cell {bad!r} "
                f"in data row {row_idx}"
            ) from None
        data_row_lines.append(line_no + 1)

    if len(data_rows) != nrows:
        raise ParseError(
            f"{path.name}: expected {nrows} data rows, found {len(data_rows)}"
        )

    values = np.array(data_rows, dtype=np.float64)
    transform = GeoTransform(
        origin_x=header["xllcorner"],
        origin_y=header["yllcorner"] + nrows * header["cellsize"],
        cell_size=header["cellsize"],
    )
    return DemGrid(values=values, transform=transform, nodata=header["nodata_value"])


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def _fmt_value(v) -> str:
    if float(v) == int(v):
        return str(int(v))
    return repr(float(v))


def write_ascii_grid(values, transform: GeoTransform, path, nodata=-9999):
    """Write a 2-D array as an ESRI ASCII grid (lossless for round-trips)."""
    values = np.asarray(values)
    nrows, ncols = values.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"ncols {ncols}\n")
        fh.write(f"nrows {nrows}\n")
        fh.write(f"xllcorner {_fmt_value(transform.origin_x)}\n")
        fh.write(f"yllcorner {_fmt_value(transform.origin_y - nrows * transform.cell_size)}\n")
        fh.write(f"cellsize {_fmt_value(transform.cell_size)}\n")
        fh.write(f"NODATA_value {_fmt_value(nodata)}\n")
        if np.issubdtype(values.dtype, np.integer):
            for row in values:
                fh.write(" ".join(str(int(v)) for v in row) + "\n")
        else:
            for row in values:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Raster tiling and detection georeferencing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TileWindow:
    """One tile window: true (clamped) pixel extent plus virtual padding.

    ``width``/``height`` are the pixels actually present in the raster;
    ``pad_cols``/``pad_rows`` record how much virtual padding on the
    right/bottom edge would restore the nominal tile size.
    """

    col0: int
    row0: int
    width: int
    height: int
    pad_cols: int = 0
    pad_rows: int = 0

    @property
    def tile_width(self) -> int:
        return self.width + self.pad_cols

    @property
    def tile_height(self) -> int:
        return self.height + self.pad_rows


def tile_raster(rows: int, cols: int, tile: int, stride: int | None = None):
    """Slice a raster into tile windows in deterministic row-major order.

    Every pixel is covered at least once; edge windows are clamped to the
    raster and record the virtual padding needed to reach the nominal size.
    """
    if stride is None:
        stride = tile
    if tile <= 0:
        raise ValidationError(f"tile must be > 0, got {tile}")
    if not 0 < stride <= tile:
        raise ValidationError(f"stride must be in (0, tile], got {stride}")
    windows = []
    for row0 in range(0, rows, stride):
        h = min(tile, rows - row0)
        for col0 in range(0, cols, stride):
            w = min(tile, cols - col0)
            windows.append(
                TileWindow(
                    col0=col0,
                    row0=row0,
                    width=w,
                    height=h,
                    pad_cols=tile - w,
                    pad_rows=tile - h,
                )
            )
    return windows


def georeference_detection(bbox, window: TileWindow, transform: GeoTransform) -> UavDetection:
    """Turn a detector bbox in tile-pixel coordinates into a world detection.

    ``bbox`` is (x0, y0, x1, y1[, confidence]) with exclusive max edges, in
    the tile's own pixel frame. The centroid is the world position of the
    bbox center; the area is the bbox pixel area times the squared ground
    sampling distance.
    """
    if len(bbox) == 5:
        x0, y0, x1, y1, conf = bbox
    else:
        x0, y0, x1, y1 = bbox
        conf = 1.0
    if not (x1 > x0 and y1 > y0):
        raise ValidationError(f"empty bbox {bbox!r}")
    if x0 < 0 or y0 < 0 or x1 > window.tile_width or y1 > window.tile_height:
        raise ValidationError(
            f"bbox {bbox!r} outside tile bounds "
            f"{window.tile_width}x{window.tile_height}"
        )
    col_px = window.col0 + (x0 + x1) / 2.0
    row_px = window.row0 + (y0 + y1) / 2.0
    cs = transform.cell_size
    return UavDetection(
        centroid_x=transform.origin_x + col_px * cs,
        centroid_y=transform.origin_y - row_px * cs,
        area_m2=(x1 - x0) * (y1 - y0) * cs * cs,
        confidence=conf,
    )


# ---------------------------------------------------------------------------
# Detection / observation I/O (CSV and GeoJSON points)
# ---------------------------------------------------------------------------


def read_detections(path):
    """Read UAV detections or SV observations from CSV or GeoJSON.

    The kind is inferred from the declared CSV header (``x,y,area_m2,
    confidence`` vs ``x,y,score``) or from the GeoJSON point properties.
    Invalid records raise :class:`ValidationError` naming the row.
    """
    path = Path(path)
    if path.suffix.lower() in (".geojson", ".json"):
        return _read_detections_geojson(path)
    return _read_detections_csv(path)


def read_uav_detections(path) -> list:
    records = read_detections(path)
    if records and not isinstance(records[0], UavDetection):
        raise ParseError(f"{Path(path).name}: expected UAV detections (x,y,area_m2,confidence)")
    return records


def read_sv_observations(path) -> list:
    records = read_detections(path)
    if records and not isinstance(records[0], SvObservation):
        raise ParseError(f"{Path(path).name}: expected SV observations (x,y,score)")
    return records


def _read_detections_csv(path: Path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            raw_header = next(reader)
        except StopIteration:
            raise ParseError(f"{path.name}: empty file") from None
        header = tuple(h.strip().lower() for h in raw_header)
        if header == _UAV_FIELDS:
            kind = "uav"
        elif header == _SV_FIELDS:
            kind = "sv"
        else:
            raise ParseError(
                f"{path.name}: unrecognized header {','.join(raw_header)!r}; "
                f"expected 'x,y,area_m2,confidence' or 'x,y,score'"
            )
        records = []
        for idx, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path.name}: row {idx}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                if kind == "uav":
                    records.append(
                        UavDetection(
                            centroid_x=float(row[0]),
                            centroid_y=float(row[1]),
                            area_m2=float(row[2]),
                            confidence=float(row[3]),
                        )
                    )
                else:
                    records.append(
                        SvObservation(x=float(row[0]), y=float(row[1]), score=int(row[2]))
                    )
            except (ValueError, ValidationError) as exc:
                raise ValidationError(f"{path.name}: row {idx}: {exc}") from None
    return records


def _read_detections_geojson(path: Path):
    fc = read_geojson(path)
    records = []
    for idx, feat in enumerate(fc.get("features", []), start=1):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Point":
            raise ParseError(f"{path.name}: feature {idx}: expected Point geometry")
        x, y = geom["coordinates"][:2]
        props = feat.get("properties") or {}
        try:
            if "score" in props:
                records.append(SvObservation(x=float(x), y=float(y), score=int(props["score"])))
            elif "area_m2" in props:
                records.append(
                    UavDetection(
                        centroid_x=float(x),
                        centroid_y=float(y),
                        area_m2=float(props["area_m2"]),
                        confidence=float(props.get("confidence", 1.0)),
                    )
                )
            else:
                raise ParseError(
                    f"{path.name}: feature {idx}: properties carry neither "
                    f"'area_m2' nor 'score'"
                )
        except (ValueError, ValidationError) as exc:
            raise ValidationError(f"{path.name}: feature {idx}: {exc}") from None
    return records


def write_detections_csv(records, path):
    """Write detections/observations as headered CSV, losslessly for floats."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if not records:
            writer.writerow(_UAV_FIELDS)
            return
        if isinstance(records[0], UavDetection):
            writer.writerow(_UAV_FIELDS)
            for d in records:
                writer.writerow(
                    [repr(d.centroid_x), repr(d.centroid_y), repr(d.area_m2), repr(d.confidence)]
                )
        else:
            writer.writerow(_SV_FIELDS)
            for o in records:
                writer.writerow([repr(o.x), repr(o.y), str(o.score)])


def detections_to_geojson(records, parameters: dict | None = None) -> dict:
    """Point FeatureCollection for detections or observations."""
    features = []
    for rec in records:
        if isinstance(rec, UavDetection):
            coords = [rec.centroid_x, rec.centroid_y]
            props = {"area_m2": rec.area_m2, "confidence": rec.confidence}
        else:
            coords = [rec.x, rec.y]
            props = {"score": rec.score}
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": coords},
                "properties": props,
            }
        )
    fc = {"type": "FeatureCollection", "features": features}
    if parameters is not None:
        fc["parameters"] = parameters
    return fc


def read_coverage(path) -> list:
    """Read coverage polygons from a GeoJSON Polygon/MultiPolygon file."""
    fc = read_geojson(path)
    polys = []
    feats = fc.get("features", [])
    for idx, feat in enumerate(feats, start=1):
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        if gtype == "Polygon":
            rings = geom["coordinates"]
            polys.append(CoveragePolygon(outer=rings[0], holes=rings[1:]))
        elif gtype == "MultiPolygon":
            for rings in geom["coordinates"]:
                polys.append(CoveragePolygon(outer=rings[0], holes=rings[1:]))
        else:
            raise ParseError(
                f"{Path(path).name}: feature {idx}: expected Polygon/MultiPolygon, got {gtype}"
            )
    return polys


def write_geojson(obj: dict, path):
    """Write a GeoJSON object with round-trip-exact float formatting."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, ensure_ascii=False, separators=(",", ": "), indent=1)
        fh.write("\n")


def read_geojson(path) -> dict:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path.name}: invalid JSON: {exc}") from None
    if not isinstance(obj, dict) or obj.get("type") != "FeatureCollection":
        raise ParseError(f"{path.name}: expected a GeoJSON FeatureCollection")
    return obj
