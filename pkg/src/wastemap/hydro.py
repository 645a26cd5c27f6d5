"""Surface-flow structure from a DEM.

Pipeline: depression filling (priority-flood) -> D8 flow directions ->
flow accumulation -> stream extraction -> Strahler ordering. All kernels are
pure functions of their inputs and deterministic; nodata cells are
impermeable (flow never enters or crosses them), and border or
nodata-adjacent cells with no lower neighbor become outlets (code 0).

D8 codes: 1=E, 2=SE, 4=S, 8=SW, 16=W, 32=NW, 64=N, 128=NE, 0=pit/outlet,
255=nodata. Ties in steepest descent break toward the smallest code value.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError
from .geodata import DemGrid, GeoTransform, read_geojson

__all__ = [
    "FlowDirGrid",
    "AccumGrid",
    "StreamSegment",
    "StreamNetwork",
    "fill_depressions",
    "fill_depressions_with_drains",
    "d8_flow_direction",
    "flow_accumulation",
    "extract_streams",
    "strahler_order",
    "default_stream_threshold",
    "streams_to_geojson",
    "streams_from_geojson",
]

# (drow, dcol, code) in ascending code order: E, SE, S, SW, W, NW, N, NE
D8_OFFSETS = (
    (0, 1, 1),
    (1, 1, 2),
    (1, 0, 4),
    (1, -1, 8),
    (0, -1, 16),
    (-1, -1, 32),
    (-1, 0, 64),
    (-1, 1, 128),
)
D8_CODES = np.array([o[2] for o in D8_OFFSETS], dtype=np.uint8)
NODATA_CODE = 255
# direction from neighbor back toward the cell it drains to
OPPOSITE_CODE = {1: 16, 2: 32, 4: 64, 8: 128, 16: 1, 32: 2, 64: 4, 128: 8}
CODE_TO_OFFSET = {code: (dr, dc) for dr, dc, code in D8_OFFSETS}


@dataclass
class FlowDirGrid:
    """Per-cell D8 drainage codes."""

    codes: np.ndarray
    transform: GeoTransform

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.uint8)
        valid = np.isin(self.codes, [0, 1, 2, 4, 8, 16, 32, 64, 128, 255])
        if not valid.all():
            bad = sorted(set(self.codes[~valid].tolist()))
            raise ValidationError(f"invalid D8 code(s): {bad}")

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]


@dataclass
class AccumGrid:
    """Per-cell count of upstream cells (the cell itself excluded)."""

    counts: np.ndarray
    transform: GeoTransform

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @property
    def rows(self) -> int:
        return self.counts.shape[0]

    @property
    def cols(self) -> int:
        return self.counts.shape[1]


@dataclass
class StreamSegment:
    id: int
    points: list
    strahler_order: int = 0
    downstream_id: int | None = None
    cells: list = field(default_factory=list)  # (row, col) cells owned by this segment


@dataclass
class StreamNetwork:
    segments: list

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)


# ---------------------------------------------------------------------------
# Depression filling (priority-flood)
# ---------------------------------------------------------------------------


def fill_depressions(dem: DemGrid) -> DemGrid:
    """Minimally raise cells so every cell drains to an outlet.

    Priority-flood: outputs the lowest surface >= the input on which every
    non-nodata cell has a non-ascending 8-neighbor path to the raster border
    or to a nodata-adjacent outlet. Idempotent.
    """
    filled, _ = fill_depressions_with_drains(dem)
    return filled


def fill_depressions_with_drains(dem: DemGrid):
    """Like :func:`fill_depressions`, also returning flat-drain codes.

    The second return value holds, for each cell, the D8 code toward the
    neighbor it was flooded from (its spill direction). Cells on filled or
    natural flats have no strictly lower neighbor; these recorded codes give
    them a deterministic non-ascending route to the spill point. Seed cells
    (border / nodata-adjacent) carry code 0.
    """
    z = dem.values
    rows, cols = z.shape
    n = rows * cols
    nodata_flat = dem.nodata_mask().ravel()
    if nodata_flat.all():
        raise ValidationError("cannot fill an all-nodata DEM")

    # seed set: border cells plus cells with a nodata 8-neighbor
    seed = np.zeros((rows, cols), dtype=bool)
    seed[0, :] = seed[-1, :] = True
    seed[:, 0] = seed[:, -1] = True
    nd = dem.nodata_mask()
    if nd.any():
        padded = np.pad(nd, 1, constant_values=False)
        near_nd = np.zeros((rows, cols), dtype=bool)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                near_nd |= padded[1 + dr : 1 + dr + rows, 1 + dc : 1 + dc + cols]
        seed |= near_nd
    seed_flat = seed.ravel() & ~nodata_flat

    # flat python lists are markedly faster than ndarray indexing here
    filled = z.ravel().tolist()
    visited = bytearray(n)
    drain = bytearray(n)
    for idx in np.flatnonzero(nodata_flat):
        visited[idx] = 1

    heap = []
    counter = 0
    for idx in np.flatnonzero(seed_flat):
        idx = int(idx)
        visited[idx] = 1
        heap.append((filled[idx], counter, idx))
        counter += 1
    heapq.heapify(heap)

    offsets = [(dr * cols + dc, dr, dc, OPPOSITE_CODE[code]) for dr, dc, code in D8_OFFSETS]
    push = heapq.heappush
    pop = heapq.heappop
    while heap:
        zc, _, idx = pop(heap)
        r, c = divmod(idx, cols)
        for doff, dr, dc, back in offsets:
            nr = r + dr
            nc = c + dc
            if nr < 0 or nr >= rows or nc < 0 or nc >= cols:
                continue
            nidx = idx + doff
            if visited[nidx]:
                continue
            visited[nidx] = 1
            nz = filled[nidx]
            if nz < zc:
                filled[nidx] = nz = zc
            drain[nidx] = back
            push(heap, (nz, counter, nidx))
            counter += 1

    out = np.array(filled, dtype=np.float64).reshape(rows, cols)
    drains = np.frombuffer(bytes(drain), dtype=np.uint8).reshape(rows, cols).copy()
    drains[nd] = 0
    return DemGrid(values=out, transform=dem.transform, nodata=dem.nodata), drains


# ---------------------------------------------------------------------------
# D8 flow direction
# ---------------------------------------------------------------------------


def d8_flow_direction(dem: DemGrid, flat_drains: np.ndarray | None = None) -> FlowDirGrid:
    """Steepest-descent D8 codes.

    Each cell points to the in-grid, non-nodata neighbor maximizing
    (z_cell - z_neighbor) / distance with distance cell_size (cardinal) or
    cell_size * sqrt(2) (diagonal); ties break toward the smallest code. A
    cell with no strictly lower neighbor is coded 0 unless ``flat_drains``
    (from :func:`fill_depressions_with_drains`) supplies a spill direction.
    """
    z = dem.values
    nodata = dem.nodata_mask()
    rows, cols = z.shape
    cs = dem.transform.cell_size
    diag = cs * math.sqrt(2.0)

    slopes = np.full((8, rows, cols), -np.inf)
    for k, (dr, dc, _code) in enumerate(D8_OFFSETS):
        dist = diag if dr != 0 and dc != 0 else cs
        r0, r1 = max(0, -dr), rows - max(0, dr)
        c0, c1 = max(0, -dc), cols - max(0, dc)
        drop = z[r0:r1, c0:c1] - z[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
        s = drop / dist
        s[nodata[r0 + dr : r1 + dr, c0 + dc : c1 + dc]] = -np.inf
        slopes[k, r0:r1, c0:c1] = s

    best = np.argmax(slopes, axis=0)  # first max wins -> smallest code
    best_slope = np.take_along_axis(slopes, best[None], axis=0)[0]
    codes = np.where(best_slope > 0, D8_CODES[best], 0).astype(np.uint8)
    if flat_drains is not None:
        flat = (codes == 0) & ~nodata & (np.asarray(flat_drains) > 0)
        codes[flat] = np.asarray(flat_drains, dtype=np.uint8)[flat]
    codes[nodata] = NODATA_CODE
    return FlowDirGrid(codes=codes, transform=dem.transform)


# ---------------------------------------------------------------------------
# Flow accumulation
# ---------------------------------------------------------------------------


def _downstream_index(fd: FlowDirGrid) -> np.ndarray:
    """Flat downstream index per cell, -1 for pits/outlets/nodata.

    Raises if any coded direction points off-grid or into nodata.
    """
    codes = fd.codes
    rows, cols = codes.shape
    n = rows * cols
    down = np.full(n, -1, dtype=np.int64)
    rr, cc = np.divmod(np.arange(n, dtype=np.int64), cols)
    flat_codes = codes.ravel()
    nodata = flat_codes == NODATA_CODE
    for dr, dc, code in D8_OFFSETS:
        sel = flat_codes == code
        if not sel.any():
            continue
        tr = rr[sel] + dr
        tc = cc[sel] + dc
        if (tr < 0).any() or (tr >= rows).any() or (tc < 0).any() or (tc >= cols).any():
            raise ValidationError(f"D8 code {code} points off-grid")
        tgt = tr * cols + tc
        if nodata[tgt].any():
            raise ValidationError(f"D8 code {code} points into a nodata cell")
        down[sel] = tgt
    return down


def flow_accumulation(fd: FlowDirGrid) -> AccumGrid:
    """Count, per cell, the upstream cells whose D8 path reaches it.

    Processes cells in topological order (Kahn waves); a leftover cell means
    the code grid contains a cycle, which signals an unfilled DEM or
    corrupted codes.
    """
    codes = fd.codes
    rows, cols = codes.shape
    n = rows * cols
    down = _downstream_index(fd)
    valid = (codes.ravel() != NODATA_CODE)

    counts = np.zeros(n, dtype=np.int64)
    indeg = np.bincount(down[down >= 0], minlength=n)
    frontier = np.flatnonzero(valid & (indeg == 0))
    processed = frontier.size
    while frontier.size:
        d = down[frontier]
        sel = d >= 0
        d = d[sel]
        np.add.at(counts, d, counts[frontier[sel]] + 1)
        np.add.at(indeg, d, -1)
        cand = np.unique(d)
        frontier = cand[indeg[cand] == 0]
        processed += frontier.size
    if processed != int(valid.sum()):
        raise ValidationError("cycle detected in flow directions (unfilled DEM?)")
    return AccumGrid(counts=counts.reshape(rows, cols), transform=fd.transform)


# ---------------------------------------------------------------------------
# Stream extraction and Strahler order
# ---------------------------------------------------------------------------


def default_stream_threshold(rows: int, cols: int) -> int:
    """Default accumulation threshold: 0.5% of the cell count, at least 1."""
    return max(1, round(0.005 * rows * cols))


def extract_streams(acc: AccumGrid, fd: FlowDirGrid, threshold: int) -> StreamNetwork:
    """Vectorize stream cells (accumulation >= threshold) into segments.

    Cells are traced downstream from heads and confluences; segments split at
    confluences (>= 2 stream inflows), which own the downstream segment and
    appear as the final vertex of each upstream one. Polylines run through
    cell centers. An empty network is returned when nothing meets the
    threshold.
    """
    if threshold < 1:
        raise ValidationError(f"stream threshold must be >= 1, got {threshold}")
    codes = fd.codes
    rows, cols = codes.shape
    down = _downstream_index(fd)
    stream = (acc.counts.ravel() >= threshold) & (codes.ravel() != NODATA_CODE)
    stream_idx = np.flatnonzero(stream)
    if stream_idx.size == 0:
        return StreamNetwork(segments=[])

    inflow = np.zeros(rows * cols, dtype=np.int32)
    src = stream_idx[down[stream_idx] >= 0]
    tgt = down[src]
    tgt_stream = stream[tgt]
    np.add.at(inflow, tgt[tgt_stream], 1)

    starts = [int(i) for i in stream_idx if inflow[i] == 0 or inflow[i] >= 2]
    start_to_seg = {s: seg_id for seg_id, s in enumerate(starts)}
    transform = fd.transform

    def center(idx):
        r, c = divmod(idx, cols)
        return transform.pixel_to_world(c, r)

    segments = []
    pending_links = {}
    for seg_id, s in enumerate(starts):
        cells = [s]
        points = [center(s)]
        cur = s
        while True:
            nxt = int(down[cur])
            if nxt < 0 or not stream[nxt]:
                break
            points.append(center(nxt))
            if inflow[nxt] >= 2:
                pending_links[seg_id] = nxt
                break
            cells.append(nxt)
            cur = nxt
        segments.append(
            StreamSegment(
                id=seg_id,
                points=points,
                cells=[divmod(i, cols) for i in cells],
            )
        )
    for seg_id, conf_idx in pending_links.items():
        segments[seg_id].downstream_id = start_to_seg[conf_idx]
    return StreamNetwork(segments=segments)


def strahler_order(net: StreamNetwork) -> StreamNetwork:
    """Fill Strahler orders over the downstream-oriented segment forest.

    Leaves get order 1; a segment fed by orders {k1..km} gets max(ki), plus
    one when the max is attained by two or more feeders. Orders are written
    in place and the network returned.
    """
    by_id = {seg.id: seg for seg in net.segments}
    upstream = {seg.id: [] for seg in net.segments}
    for seg in net.segments:
        if seg.downstream_id is not None:
            if seg.downstream_id not in by_id:
                raise ValidationError(
                    f"segment {seg.id} references unknown downstream {seg.downstream_id}"
                )
            upstream[seg.downstream_id].append(seg.id)

    remaining = {sid: len(ups) for sid, ups in upstream.items()}
    queue = [sid for sid, k in remaining.items() if k == 0]
    resolved = 0
    while queue:
        sid = queue.pop()
        ups = upstream[sid]
        if not ups:
            order = 1
        else:
            orders = [by_id[u].strahler_order for u in ups]
            top = max(orders)
            order = top + 1 if orders.count(top) >= 2 else top
        by_id[sid].strahler_order = order
        resolved += 1
        d = by_id[sid].downstream_id
        if d is not None:
            remaining[d] -= 1
            if remaining[d] == 0:
                queue.append(d)
    if resolved != len(net.segments):
        raise ValidationError("cycle detected in stream segment graph")
    return net


# ---------------------------------------------------------------------------
# GeoJSON export / import
# ---------------------------------------------------------------------------


def streams_to_geojson(net: StreamNetwork, parameters: dict | None = None) -> dict:
    features = []
    for seg in net.segments:
        coords = [[x, y] for x, y in seg.points]
        if len(coords) == 1:
            coords = coords * 2  # degenerate single-cell segment
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": coords},
                "properties": {
                    "id": seg.id,
                    "strahler_order": seg.strahler_order,
                    "downstream_id": seg.downstream_id,
                },
            }
        )
    fc = {"type": "FeatureCollection", "features": features}
    if parameters is not None:
        fc["parameters"] = parameters
    return fc


def streams_from_geojson(path) -> StreamNetwork:
    fc = read_geojson(path)
    segments = []
    for idx, feat in enumerate(fc.get("features", []), start=1):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "LineString":
            raise ParseError(f"stream feature {idx}: expected LineString")
        props = feat.get("properties") or {}
        segments.append(
            StreamSegment(
                id=int(props["id"]),
                points=[(float(x), float(y)) for x, y in geom["coordinates"]],
                strahler_order=int(props.get("strahler_order", 0)),
                downstream_id=(
                    None if props.get("downstream_id") is None else int(props["downstream_id"])
                ),
            )
        )
    return StreamNetwork(segments=segments)
