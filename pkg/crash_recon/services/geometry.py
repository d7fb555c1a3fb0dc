"""
Road-geometry standardization and queries.

Frames: survey coordinates (raw) are mapped to the world frame by a rigid
transform, then rotated north-up about the centroid of all road vertices.
The north angle is the counter-clockwise angle from +y to the north arrow.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from crash_recon.core.errors import GeometryValidationError
from crash_recon.schemas.case import AccidentCase, ImpactSide
from crash_recon.schemas.geometry import (
    CATEGORY_ORDER,
    AngleSource,
    GeometryFrame,
    Polyline,
    PolylineCategory,
    RigidTransform,
    RoadGeometry,
)

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 6 + len(CATEGORY_ORDER)


def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def _map_geometry(geom: RoadGeometry, fn) -> dict:
    def poly(p: Polyline) -> Polyline:
        return Polyline(id=p.id, category=p.category, points=[tuple(q) for q in fn(p.as_array())])

    return dict(
        curves=[poly(p) for p in geom.curves],
        lane_centerlines=[poly(p) for p in geom.lane_centerlines],
        lane_polygons=[[tuple(q) for q in fn(np.asarray(r, dtype=float))] for r in geom.lane_polygons],
    )


def validate_rotation(matrix: np.ndarray, tol: float = 1e-9) -> None:
    if matrix.shape != (2, 2) or not np.all(np.isfinite(matrix)):
        raise GeometryValidationError("rotation must be a finite 2x2 matrix")
    if np.max(np.abs(matrix.T @ matrix - np.eye(2))) > tol:
        raise GeometryValidationError("rotation matrix is not orthonormal")
    if np.linalg.det(matrix) <= 0:
        raise GeometryValidationError("rotation matrix must be proper (det = +1)")


def apply_rigid(points: np.ndarray, rigid: RigidTransform) -> np.ndarray:
    r = rigid.matrix()
    return points @ r.T + np.asarray(rigid.translation, dtype=float)


def to_world(geom: RoadGeometry, rigid: RigidTransform) -> RoadGeometry:
    """Map survey-frame geometry into the world frame: p' = R p + t"""
    if geom.frame != GeometryFrame.RAW:
        raise GeometryValidationError(f"to_world expects raw geometry, got {geom.frame.value}")
    validate_rotation(rigid.matrix())
    mapped = _map_geometry(geom, lambda pts: apply_rigid(pts, rigid))
    return geom.model_copy(update={**mapped, "frame": GeometryFrame.WORLD, "transform": None})


def all_vertices(geom: RoadGeometry) -> np.ndarray:
    parts = [p.as_array() for p in geom.all_polylines()]
    parts += [np.asarray(r, dtype=float)[:-1] for r in geom.lane_polygons]
    if not parts:
        return np.zeros((0, 2))
    return np.concatenate(parts, axis=0)


def scene_centroid(geom: RoadGeometry) -> np.ndarray:
    pts = all_vertices(geom)
    return pts.mean(axis=0) if len(pts) else np.zeros(2)


def resolve_north_angle(geom: RoadGeometry) -> Tuple[float, AngleSource]:
    """North arrow wins over metadata; with neither the angle is 0"""
    if geom.north_arrow is not None:
        return float(geom.north_arrow), AngleSource.NORTH_ARROW
    if geom.north_metadata is not None:
        return float(geom.north_metadata), AngleSource.DEFAULT_METADATA
    return 0.0, AngleSource.DEFAULT_METADATA


def north_up_points(points: np.ndarray, north_angle: float, center: np.ndarray) -> np.ndarray:
    return (points - center) @ rotation(-north_angle).T + center


def to_north_up(geom: RoadGeometry, north_angle: float, source: AngleSource) -> RoadGeometry:
    """Rotate world geometry by -north_angle about the scene centroid"""
    if geom.frame != GeometryFrame.WORLD:
        raise GeometryValidationError(f"to_north_up expects world geometry, got {geom.frame.value}")
    center = scene_centroid(geom)
    mapped = _map_geometry(geom, lambda pts: north_up_points(pts, north_angle, center))
    return geom.model_copy(update={
        **mapped,
        "frame": GeometryFrame.NORTH_UP,
        "north_angle": float(north_angle),
        "north_source": source,
    })


def standardize_case(case: AccidentCase) -> AccidentCase:
    """Bring geometry, trajectories, headings, directions and the accident location into the north-up frame"""
    geom = case.geometry
    if geom.frame == GeometryFrame.NORTH_UP:
        return case
    steps = []
    if geom.frame == GeometryFrame.RAW:
        rigid = geom.transform or RigidTransform()
        geom = to_world(geom, rigid)
        r = rigid.matrix()
        steps.append((lambda p, r=r, t=np.asarray(rigid.translation): p @ r.T + t, r))
    angle, source = resolve_north_angle(geom)
    center = scene_centroid(geom)
    geom = to_north_up(geom, angle, source)
    steps.append((lambda p, a=angle, c=center: north_up_points(p, a, c), rotation(-angle)))
    if source == AngleSource.DEFAULT_METADATA and case.geometry.north_metadata is None:
        logger.info(f"case {case.case_id}: no north annotation, north-up angle defaults to 0")

    def map_points(p: np.ndarray) -> np.ndarray:
        for fn, _ in steps:
            p = fn(p)
        return p

    def map_vector(v: np.ndarray) -> np.ndarray:
        for _, r in steps:
            v = v @ r.T
        return v

    turn = float(sum(np.arctan2(r[1, 0], r[0, 0]) for _, r in steps))
    raw_points = []
    for pts in case.raw_points:
        if not pts:
            raw_points.append([])
            continue
        xy = map_points(np.array([[p[0], p[1]] for p in pts], dtype=float))
        raw_points.append([
            (float(x), float(y), None if p[2] is None else float(p[2] + turn))
            for (x, y), p in zip(xy, pts)
        ])
    vehicles = []
    for v in case.vehicles:
        if v.travel_direction is None:
            vehicles.append(v)
            continue
        u = map_vector(np.asarray(v.travel_direction, dtype=float))
        u = u / np.linalg.norm(u)
        vehicles.append(v.model_copy(update={"travel_direction": (float(u[0]), float(u[1]))}))
    ann = case.annotations
    if ann.accident_location is not None:
        a = map_points(np.asarray([ann.accident_location], dtype=float))[0]
        ann = ann.model_copy(update={"accident_location": (float(a[0]), float(a[1]))})
    return case.model_copy(update={
        "geometry": geom,
        "raw_points": raw_points,
        "vehicles": vehicles,
        "annotations": ann,
    })


# ---- rasterization --------------------------------------------------------

@dataclass
class BevRaster:
    """Occupancy grid (C, H, W); row index grows with y, column index with x"""
    grid: np.ndarray
    origin: np.ndarray
    resolution: float
    empty: bool = False

    def cell_of(self, point: Sequence[float]) -> Tuple[int, int]:
        col = int(np.floor((point[0] - self.origin[0]) / self.resolution))
        row = int(np.floor((point[1] - self.origin[1]) / self.resolution))
        return row, col

    def cell_centers(self) -> np.ndarray:
        """(H*W, 2) world coordinates of cell centers in row-major order"""
        h, w = self.grid.shape[1:]
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        x = self.origin[0] + (cols.reshape(-1) + 0.5) * self.resolution
        y = self.origin[1] + (rows.reshape(-1) + 0.5) * self.resolution
        return np.stack([x, y], axis=1)


def bresenham(r0: int, c0: int, r1: int, c1: int) -> List[Tuple[int, int]]:
    cells = []
    dr, dc = abs(r1 - r0), -abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dr + dc
    r, c = r0, c0
    while True:
        cells.append((r, c))
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 >= dc:
            err += dc
            r += sr
        if e2 <= dr:
            err += dr
            c += sc
    return cells


def rasterize(geom: RoadGeometry, resolution: float, extent: float,
              center: Optional[Sequence[float]] = None) -> BevRaster:
    """Draw every polyline into its category channel with one-cell Bresenham strokes"""
    if geom.frame != GeometryFrame.NORTH_UP:
        raise GeometryValidationError("rasterize expects north-up geometry")
    if resolution <= 0:
        raise GeometryValidationError("resolution must be positive")
    size = int(round(extent / resolution))
    center = np.zeros(2) if center is None else np.asarray(center, dtype=float)
    origin = center - 0.5 * size * resolution
    grid = np.zeros((len(CATEGORY_ORDER), size, size), dtype=np.uint8)
    raster = BevRaster(grid=grid, origin=origin, resolution=resolution)
    for poly in geom.all_polylines():
        channel = CATEGORY_ORDER.index(poly.category)
        cells = [raster.cell_of(p) for p in poly.points]
        for (r0, c0), (r1, c1) in zip(cells[:-1], cells[1:]):
            for r, c in bresenham(r0, c0, r1, c1):
                if 0 <= r < size and 0 <= c < size:
                    grid[channel, r, c] = 1
    if not grid.any():
        raster.empty = True
        logger.warning("rasterize: extent excludes all geometry, raster is empty")
    return raster


# ---- polyline queries -----------------------------------------------------

def cumulative_length(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    """n points evenly spaced in arc length, endpoints kept"""
    cum = cumulative_length(points)
    s = np.linspace(0.0, cum[-1], n)
    return np.stack([np.interp(s, cum, points[:, 0]), np.interp(s, cum, points[:, 1])], axis=1)


def polyline_descriptor(poly: Polyline, scene_extent: float) -> np.ndarray:
    """
    Shape descriptor of one polyline
    :param poly: curve in the north-up frame
    :param scene_extent: side length of the square scene; lengths are divided by its diagonal
    :return: [mid_x, mid_y, orientation in [0, pi), normalized length, bbox width, bbox height, one-hot category]
    """
    pts = poly.as_array()
    cum = cumulative_length(pts)
    half = 0.5 * cum[-1]
    mid = np.array([np.interp(half, cum, pts[:, 0]), np.interp(half, cum, pts[:, 1])])
    centered = pts - pts.mean(axis=0)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    axis = vecs[:, -1]
    angle = float(np.mod(np.arctan2(axis[1], axis[0]), np.pi))
    if angle >= np.pi - 1e-12 or abs(angle) < 1e-12:
        angle = 0.0
    span = pts.max(axis=0) - pts.min(axis=0)
    onehot = np.zeros(len(CATEGORY_ORDER))
    onehot[CATEGORY_ORDER.index(poly.category)] = 1.0
    return np.concatenate([mid, [angle, cum[-1] / (scene_extent * np.sqrt(2.0))], span, onehot])


def nearest_on_segments(q: np.ndarray, points: np.ndarray):
    """Per-segment closest points of q; returns (distances, params in [0,1], segment vectors)"""
    a = points[:-1]
    d = points[1:] - a
    denom = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", q - a, d) / denom, 0.0, 1.0)
    proj = a + t[:, None] * d
    return np.linalg.norm(q - proj, axis=1), t, d


def nearest_on_lane(q: Sequence[float], lane: Polyline) -> Tuple[float, float, np.ndarray]:
    """Exact point-to-polyline distance, arc-length position of the foot point, unit tangent of its segment"""
    pts = lane.as_array()
    q = np.asarray(q, dtype=float)
    dist, t, d = nearest_on_segments(q, pts)
    i = int(np.argmin(dist))
    seg_len = float(np.linalg.norm(d[i]))
    arc = cumulative_length(pts)[i] + t[i] * seg_len
    return float(dist[i]), float(arc), d[i] / seg_len


def project_onto_lane(q: Sequence[float], lane: Polyline) -> Tuple[int, float]:
    """Segment index and clipped parameter of the closest point"""
    dist, t, _ = nearest_on_segments(np.asarray(q, dtype=float), lane.as_array())
    i = int(np.argmin(dist))
    return i, float(t[i])


def point_at_arc(points: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Positions at arc lengths s; beyond either end the end segment is extended linearly"""
    cum = cumulative_length(points)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(points) - 2)
    seg = points[idx + 1] - points[idx]
    frac = (s - cum[idx]) / (cum[idx + 1] - cum[idx])
    return points[idx] + frac[:, None] * seg


def march_along(points: np.ndarray, start_arc: float, step: float, count: int) -> np.ndarray:
    return point_at_arc(points, start_arc + step * np.arange(count))


def polyline_tensor(geom: RoadGeometry, max_polylines: int, max_points: int):
    """
    Fixed-size polyline tensor
    :return: points (P, M, 2), point mask (P, M), kept polylines
    """
    polys = geom.all_polylines()
    if len(polys) > max_polylines:
        logger.warning(f"{len(polys) - max_polylines} polylines dropped beyond the tensor capacity")
        polys = polys[:max_polylines]
    pts = np.zeros((max_polylines, max_points, 2))
    mask = np.zeros((max_polylines, max_points), dtype=bool)
    for n, poly in enumerate(polys):
        arr = poly.as_array()
        if len(arr) > max_points:
            arr = resample_polyline(arr, max_points)
        pts[n, :len(arr)] = arr
        mask[n, :len(arr)] = True
    return pts, mask, polys


# ---- contact sides --------------------------------------------------------

SIDE_BUCKETS = [ImpactSide.FRONT, ImpactSide.RIGHT, ImpactSide.REAR, ImpactSide.LEFT]


def side_bucket(heading: Sequence[float], offset: Sequence[float]) -> ImpactSide:
    """
    Bucket the bearing of ``offset`` seen from a body heading along ``heading``.
    Bearings run clockwise from the heading: front [-45, 45), right [45, 135),
    rear [135, 225), left [225, 315) degrees.
    """
    ccw = np.degrees(np.arctan2(offset[1], offset[0]) - np.arctan2(heading[1], heading[0]))
    bearing = np.mod(-ccw, 360.0)
    return SIDE_BUCKETS[int(np.floor(np.mod(bearing + 45.0, 360.0) / 90.0)) % 4]


def contact_radius(floor: float, reported: Optional[float]) -> float:
    """Contact distance for a case: the floor, raised to the reported collision distance when larger"""
    return max(floor, reported) if reported is not None else floor
