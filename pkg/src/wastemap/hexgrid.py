"""Shared hexagonal tessellation and the two normalized waste indices.

Flat-top hexagons on axial coordinates (q, r). The grid origin is pinned to
the extent's min corner, so identical inputs produce identical grids. Cell
area A and edge length a relate by A = (3*sqrt(3)/2) * a**2.

Per cell, the UAV index is total detected waste area divided by the fraction
of the cell covered by UAV imagery (no-data below a minimum coverage), and
the SV index is the mean score of the street-view points inside the cell
(no-data when empty).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError
from .geodata import CoveragePolygon, read_geojson

__all__ = [
    "HexGrid",
    "HexCell",
    "OverflowReport",
    "build_hexgrid",
    "point_to_cell",
    "points_to_cells",
    "aggregate_uav",
    "aggregate_sv",
    "polygon_hex_intersection_area",
    "convex_clip",
    "hexgrid_to_geojson",
    "hexgrid_from_geojson",
]

SQRT3 = math.sqrt(3.0)


@dataclass
class HexCell:
    q: int
    r: int
    center_x: float
    center_y: float
    uav_waste_area_m2: float | None = None
    uav_coverage_frac: float = 0.0
    uav_index: float | None = None
    sv_score_sum: float = 0.0
    sv_point_count: int = 0
    sv_index: float | None = None


@dataclass
class HexGrid:
    """Flat-top hexagonal grid keyed by axial (q, r)."""

    origin_x: float
    origin_y: float
    edge_len: float
    extent: tuple
    cells: dict

    @property
    def cell_area(self) -> float:
        return 1.5 * SQRT3 * self.edge_len**2

    def cell_center(self, q: int, r: int):
        a = self.edge_len
        return (self.origin_x + 1.5 * a * q, self.origin_y + SQRT3 * a * (r + q / 2.0))

    def hex_vertices(self, q: int, r: int):
        """Six vertices, counterclockwise starting due east of the center."""
        cx, cy = self.cell_center(q, r)
        a = self.edge_len
        return [
            (cx + a * math.cos(k * math.pi / 3.0), cy + a * math.sin(k * math.pi / 3.0))
            for k in range(6)
        ]

    def neighbors(self, q: int, r: int):
        """The up-to-6 edge-sharing neighbor keys present in the grid."""
        out = []
        for dq, dr in ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)):
            key = (q + dq, r + dr)
            if key in self.cells:
                out.append(key)
        return out


def build_hexgrid(extent, cell_area_m2: float) -> HexGrid:
    """Tessellate a bounding box (min_x, min_y, max_x, max_y) with hexagons.

    Every cell whose hexagon meets the extent (touching included) is
    materialized, so each point of the extent falls in exactly one cell.
    """
    min_x, min_y, max_x, max_y = map(float, extent)
    if not (max_x > min_x and max_y > min_y):
        raise ValidationError(f"degenerate extent {extent!r}")
    if not cell_area_m2 > 0:
        raise ValidationError(f"cell_area_m2 must be > 0, got {cell_area_m2}")

    a = math.sqrt(2.0 * cell_area_m2 / (3.0 * SQRT3))
    grid = HexGrid(
        origin_x=min_x, origin_y=min_y, edge_len=a, extent=(min_x, min_y, max_x, max_y), cells={}
    )

    q_lo = math.floor((min_x - a - min_x) / (1.5 * a)) - 1
    q_hi = math.ceil((max_x + a - min_x) / (1.5 * a)) + 1
    for q in range(q_lo, q_hi + 1):
        # centers with cy in [min_y - a, max_y + a]
        r_lo = math.floor((min_y - a - min_y) / (SQRT3 * a) - q / 2.0) - 1
        r_hi = math.ceil((max_y + a - min_y) / (SQRT3 * a) - q / 2.0) + 1
        for r in range(r_lo, r_hi + 1):
            cx, cy = grid.cell_center(q, r)
            if _hex_intersects_rect(cx, cy, a, min_x, min_y, max_x, max_y):
                grid.cells[(q, r)] = HexCell(q=q, r=r, center_x=cx, center_y=cy)
    return grid


def _hex_intersects_rect(cx, cy, a, min_x, min_y, max_x, max_y) -> bool:
    """Separating-axis test between a flat-top hexagon and a rectangle."""
    verts = [
        (cx + a * math.cos(k * math.pi / 3.0), cy + a * math.sin(k * math.pi / 3.0))
        for k in range(6)
    ]
    corners = ((min_x, min_y), (max_x, min_y), (max_x, max_y), (min_x, max_y))
    axes = (
        (1.0, 0.0),
        (0.0, 1.0),
        (math.cos(math.pi / 6.0), math.sin(math.pi / 6.0)),
        (math.cos(5.0 * math.pi / 6.0), math.sin(5.0 * math.pi / 6.0)),
    )
    for ax, ay in axes:
        h = [vx * ax + vy * ay for vx, vy in verts]
        rct = [vx * ax + vy * ay for vx, vy in corners]
        if max(h) < min(rct) or max(rct) < min(h):
            return False
    return True


# ---------------------------------------------------------------------------
# Point-to-cell lookup (cube rounding == nearest center for hexagons)
# ---------------------------------------------------------------------------


def points_to_cells(grid: HexGrid, xs, ys):
    """Vectorized axial lookup; returns int arrays (qs, rs)."""
    a = grid.edge_len
    dx = np.asarray(xs, dtype=float) - grid.origin_x
    dy = np.asarray(ys, dtype=float) - grid.origin_y
    qf = (2.0 / 3.0) * dx / a
    rf = (-dx / 3.0 + SQRT3 / 3.0 * dy) / a

    x = qf
    z = rf
    y = -x - z
    rx, ry, rz = np.round(x), np.round(y), np.round(z)
    ddx, ddy, ddz = np.abs(rx - x), np.abs(ry - y), np.abs(rz - z)
    fix_x = (ddx > ddy) & (ddx > ddz)
    fix_y = ~fix_x & (ddy > ddz)
    fix_z = ~fix_x & ~fix_y
    rx = np.where(fix_x, -ry - rz, rx)
    ry = np.where(fix_y, -rx - rz, ry)
    rz = np.where(fix_z, -rx - ry, rz)
    return rx.astype(np.int64), rz.astype(np.int64)


def point_to_cell(grid: HexGrid, x: float, y: float):
    """Axial key (q, r) of the hexagon containing the point.

    Boundary points resolve to the nearest center (cube rounding), the same
    answer on every call.
    """
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValidationError(f"point must be finite, got ({x}, {y})")
    qs, rs = points_to_cells(grid, [x], [y])
    return int(qs[0]), int(rs[0])


# ---------------------------------------------------------------------------
# Convex clipping (Sutherland-Hodgman) against the hexagon
# ---------------------------------------------------------------------------


def convex_clip(subject, clipper):
    """Clip a polygon ring by a counterclockwise convex ring.

    Both rings are open vertex lists. Returns the clipped ring (possibly
    empty). The subject may be concave; the output's shoelace area is then
    the total area of the clipped pieces.
    """
    output = [(float(x), float(y)) for x, y in subject]
    m = len(clipper)
    for i in range(m):
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % m]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        if not inp:
            break
        px, py = inp[-1]
        p_in = ex * (py - ay) - ey * (px - ax) <= 0 if False else None  # placeholder
        # inside = left of directed edge a->b for CCW clipper
        p_in = ex * (py - ay) - ey * (px - ax) >= 0
        for qx, qy in inp:
            q_in = ex * (qy - ay) - ey * (qx - ax) >= 0
            if q_in:
                if not p_in:
                    output.append(_line_intersect(px, py, qx, qy, ax, ay, ex, ey))
                output.append((qx, qy))
            elif p_in:
                output.append(_line_intersect(px, py, qx, qy, ax, ay, ex, ey))
            px, py, p_in = qx, qy, q_in
    return output


def _line_intersect(px, py, qx, qy, ax, ay, ex, ey):
    """Intersection of segment p-q with the infinite line through a along e."""
    dx, dy = qx - px, qy - py
    denom = dx * ey - dy * ex
    t = ((ax - px) * ey - (ay - py) * ex) / denom
    return (px + t * dx, py + t * dy)


def _ring_area(ring) -> float:
    n = len(ring)
    if n < 3:
        return 0.0
    s = 0.0
    x0, y0 = ring[-1]
    for x1, y1 in ring:
        s += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return abs(s) / 2.0


def polygon_hex_intersection_area(hexagon, polygon) -> float:
    """Area of (polygon ∩ hexagon) in m² via exact convex clipping.

    ``hexagon`` is the counterclockwise vertex list of one cell;
    ``polygon`` is a CoveragePolygon (holes subtracted) or a bare ring.
    """
    if isinstance(polygon, CoveragePolygon):
        rings = [polygon.outer[:-1]]
        holes = [h[:-1] for h in polygon.holes]
    else:
        ring = list(polygon)
        if len(ring) > 1 and tuple(ring[0]) == tuple(ring[-1]):
            ring = ring[:-1]
        rings, holes = [ring], []
    area = sum(_ring_area(convex_clip(r, hexagon)) for r in rings)
    area -= sum(_ring_area(convex_clip(h, hexagon)) for h in holes)
    hex_area = _ring_area(hexagon)
    return min(max(area, 0.0), hex_area)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass
class OverflowReport:
    """Detections that fell outside the grid; kept so mass balances."""

    total_count: int = 0
    assigned_count: int = 0
    overflow_count: int = 0
    overflow_area_m2: float = 0.0


def aggregate_uav(
    grid: HexGrid,
    detections,
    coverage=None,
    min_coverage: float = 0.1,
) -> OverflowReport:
    """Sum detection areas per cell and normalize by UAV coverage.

    ``coverage`` is a list of CoveragePolygon (None means full coverage
    everywhere). Cells with coverage below ``min_coverage`` get a no-data
    index; detections whose centroid misses the grid are tallied in the
    returned report instead of being dropped silently.
    """
    if not 0 < min_coverage <= 1:
        raise ValidationError(f"min_coverage must be in (0, 1], got {min_coverage}")

    for cell in grid.cells.values():
        cell.uav_waste_area_m2 = 0.0

    report = OverflowReport(total_count=len(detections))
    if detections:
        xs = np.array([d.centroid_x for d in detections])
        ys = np.array([d.centroid_y for d in detections])
        qs, rs = points_to_cells(grid, xs, ys)
        for det, q, r in zip(detections, qs.tolist(), rs.tolist()):
            cell = grid.cells.get((q, r))
            if cell is None:
                report.overflow_count += 1
                report.overflow_area_m2 += det.area_m2
            else:
                cell.uav_waste_area_m2 += det.area_m2
                report.assigned_count += 1

    if coverage is None:
        for cell in grid.cells.values():
            cell.uav_coverage_frac = 1.0
    else:
        hex_area = grid.cell_area
        a = grid.edge_len
        for cell in grid.cells.values():
            cell.uav_coverage_frac = 0.0
        for poly in coverage:
            pminx, pminy, pmaxx, pmaxy = poly.bounds()
            for cell in grid.cells.values():
                if (
                    cell.center_x + a < pminx
                    or cell.center_x - a > pmaxx
                    or cell.center_y + a < pminy
                    or cell.center_y - a > pmaxy
                ):
                    continue
                inter = polygon_hex_intersection_area(
                    grid.hex_vertices(cell.q, cell.r), poly
                )
                cell.uav_coverage_frac += inter / hex_area
        for cell in grid.cells.values():
            cell.uav_coverage_frac = min(cell.uav_coverage_frac, 1.0)

    for cell in grid.cells.values():
        if cell.uav_coverage_frac >= min_coverage:
            cell.uav_index = cell.uav_waste_area_m2 / cell.uav_coverage_frac
        else:
            cell.uav_index = None
    return report


def aggregate_sv(grid: HexGrid, observations) -> OverflowReport:
    """Mean SV score per cell; cells without points stay no-data."""
    for cell in grid.cells.values():
        cell.sv_score_sum = 0.0
        cell.sv_point_count = 0

    report = OverflowReport(total_count=len(observations))
    if observations:
        xs = np.array([o.x for o in observations])
        ys = np.array([o.y for o in observations])
        qs, rs = points_to_cells(grid, xs, ys)
        for obs, q, r in zip(observations, qs.tolist(), rs.tolist()):
            cell = grid.cells.get((q, r))
            if cell is None:
                report.overflow_count += 1
            else:
                cell.sv_score_sum += obs.score
                cell.sv_point_count += 1
                report.assigned_count += 1

    for cell in grid.cells.values():
        if cell.sv_point_count > 0:
            cell.sv_index = cell.sv_score_sum / cell.sv_point_count
        else:
            cell.sv_index = None
    return report


# ---------------------------------------------------------------------------
# GeoJSON export / import
# ---------------------------------------------------------------------------


def hexgrid_to_geojson(grid: HexGrid, parameters: dict | None = None) -> dict:
    """Hex polygons with per-cell indices; no-data encoded as null."""
    features = []
    for key in sorted(grid.cells):
        cell = grid.cells[key]
        ring = [[x, y] for x, y in grid.hex_vertices(cell.q, cell.r)]
        ring.append(ring[0])
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": {
                    "q": cell.q,
                    "r": cell.r,
                    "uav_index": cell.uav_index,
                    "sv_index": cell.sv_index,
                    "uav_coverage_frac": cell.uav_coverage_frac,
                    "sv_point_count": cell.sv_point_count,
                },
            }
        )
    fc = {
        "type": "FeatureCollection",
        "hex": {
            "origin_x": grid.origin_x,
            "origin_y": grid.origin_y,
            "edge_len": grid.edge_len,
            "extent": list(grid.extent),
        },
        "features": features,
    }
    if parameters is not None:
        fc["parameters"] = parameters
    return fc


def hexgrid_from_geojson(path) -> HexGrid:
    fc = read_geojson(path)
    meta = fc.get("hex")
    if not meta:
        raise ParseError(f"{path}: missing 'hex' grid metadata")
    grid = HexGrid(
        origin_x=float(meta["origin_x"]),
        origin_y=float(meta["origin_y"]),
        edge_len=float(meta["edge_len"]),
        extent=tuple(meta["extent"]),
        cells={},
    )
    for feat in fc.get("features", []):
        props = feat.get("properties") or {}
        q, r = int(props["q"]), int(props["r"])
        cx, cy = grid.cell_center(q, r)
        grid.cells[(q, r)] = HexCell(
            q=q,
            r=r,
            center_x=cx,
            center_y=cy,
            uav_index=props.get("uav_index"),
            sv_index=props.get("sv_index"),
            uav_coverage_frac=float(props.get("uav_coverage_frac") or 0.0),
            sv_point_count=int(props.get("sv_point_count") or 0),
        )
    return grid
