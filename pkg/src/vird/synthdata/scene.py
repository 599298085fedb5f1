"""Procedural road-and-building worlds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import LineString, box
from shapely.ops import unary_union

from ..geometry import Pose

PALETTE = np.array([
    [0.80, 0.25, 0.20],
    [0.90, 0.60, 0.15],
    [0.90, 0.85, 0.30],
    [0.25, 0.40, 0.80],
    [0.55, 0.30, 0.65],
    [0.92, 0.92, 0.88],
    [0.50, 0.33, 0.20],
    [0.20, 0.70, 0.75],
])
GROUND_BASE = np.array([0.35, 0.55, 0.25])
ROAD_BASE = np.array([0.42, 0.42, 0.45])
SKY_BASE = np.array([0.60, 0.78, 0.95])


class SceneError(ValueError):
    pass


@dataclass
class SynthParams:
    """World layout and render sizes for one synthetic dataset."""

    sat_px: int = 64
    resolution: float = 0.5
    pano_h: int = 32
    pano_w: int = 128
    hfov_deg: float = 360.0
    elev_max_deg: float = 45.0
    elev_min_deg: float = -45.0
    cam_height: float = 1.6
    search_extent: float = 16.0
    n_roads: int = 2
    road_width: tuple = (3.0, 5.0)
    bend_prob: float = 0.5
    n_buildings: int = 10
    building_size: tuple = (3.0, 8.0)
    building_height: tuple = (3.0, 12.0)
    clearance: float = 0.5
    color_jitter: float = 0.06
    max_attempts: int = 300

    def __post_init__(self):
        self.road_width = tuple(float(v) for v in self.road_width)
        self.building_size = tuple(float(v) for v in self.building_size)
        self.building_height = tuple(float(v) for v in self.building_height)
        if self.sat_px < 1 or self.pano_h < 1 or self.pano_w < 1:
            raise SceneError("image sizes must be positive")
        if not self.resolution > 0 or not self.search_extent > 0:
            raise SceneError("resolution and search extent must be positive")
        if self.search_extent > self.world_extent:
            raise SceneError("search extent exceeds the world")
        if self.n_roads < 0 or self.n_buildings < 0:
            raise SceneError("counts must be non-negative")
        if not 0 < self.hfov_deg <= 360 or not self.elev_min_deg < 0 < self.elev_max_deg:
            raise SceneError("invalid camera field of view")
        if self.road_width[0] <= 2 * 0.25 or self.road_width[0] > self.road_width[1]:
            raise SceneError(f"invalid road width range {self.road_width}")
        if self.building_size[0] <= 0 or self.building_size[0] > self.building_size[1]:
            raise SceneError(f"invalid building size range {self.building_size}")
        if self.building_height[0] <= self.cam_height or self.building_height[0] > self.building_height[1]:
            raise SceneError("buildings must be taller than the camera")

    @property
    def world_extent(self) -> float:
        return self.sat_px * self.resolution

    @property
    def hfov(self) -> float:
        return math.radians(self.hfov_deg)


@dataclass
class Road:
    points: np.ndarray  # (n, 2) polyline
    width: float
    color: np.ndarray

    def polygon(self):
        return LineString(self.points).buffer(self.width / 2.0)

    def distance(self, x, y):
        """Distance to the centreline minus half the width; ``<= 0`` on the road."""
        best = np.full(np.broadcast(x, y).shape, np.inf)
        for a, b in zip(self.points[:-1], self.points[1:]):
            ab = b - a
            t = np.clip(((x - a[0]) * ab[0] + (y - a[1]) * ab[1]) / (ab @ ab), 0.0, 1.0)
            best = np.minimum(best, np.hypot(x - a[0] - t * ab[0], y - a[1] - t * ab[1]))
        return best - self.width / 2.0


@dataclass
class Building:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    height: float
    facade: np.ndarray
    roof: np.ndarray

    def polygon(self):
        return box(self.xmin, self.ymin, self.xmax, self.ymax)

    def contains(self, x, y):
        return (x >= self.xmin) & (x < self.xmax) & (y >= self.ymin) & (y < self.ymax)


@dataclass
class SceneSpec:
    extent: float
    search_extent: float
    roads: list
    buildings: list
    ground_color: np.ndarray
    sky_color: np.ndarray
    seed: object = None
    margin: float = field(default=0.25)

    def road_distance(self, x, y):
        """Signed distance from points to the nearest road edge (negative inside)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        best = np.full(np.broadcast(x, y).shape, np.inf)
        for road in self.roads:
            best = np.minimum(best, road.distance(x, y))
        return best

    def surface_color(self, x, y):
        """Ground-plane colour (road or terrain) at world points; ``(..., 3)``."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        shape = np.broadcast(x, y).shape
        out = np.broadcast_to(self.ground_color, shape + (3,)).copy()
        for road in self.roads:
            out[road.distance(x, y) <= 0.0] = road.color
        return out

    def building_at(self, x, y) -> int:
        for i, b in enumerate(self.buildings):
            if b.contains(x, y):
                return i
        return -1

    def valid_camera(self, x: float, y: float) -> bool:
        half = self.search_extent / 2.0
        if abs(x) >= half or abs(y) >= half:
            return False
        if self.road_distance(x, y) > -self.margin:
            return False
        return self.building_at(x, y) < 0

    def camera_region(self):
        """Shapely region where cameras may be placed."""
        half = self.search_extent / 2.0
        roads = unary_union([LineString(r.points).buffer(r.width / 2.0 - self.margin) for r in self.roads]) \
            if self.roads else None
        if roads is None:
            return box(0, 0, 0, 0)
        region = roads.intersection(box(-half, -half, half, half))
        for b in self.buildings:
            region = region.difference(b.polygon())
        return region


def _jitter(rng, base, amount):
    return np.clip(base + rng.uniform(-amount, amount, size=3), 0.0, 1.0)


def generate_scene(seed, params: SynthParams | None = None) -> SceneSpec:
    """Deterministic scene for ``seed`` (int or sequence of ints)."""
    params = params or SynthParams()
    rng = np.random.default_rng(seed)
    W = params.world_extent
    half_search = params.search_extent / 2.0
    j = params.color_jitter
    roads = []
    for _ in range(params.n_roads):
        c = rng.uniform(-0.7 * half_search, 0.7 * half_search, size=2)
        phi = rng.uniform(0.0, math.pi)
        u1 = np.array([math.cos(phi), math.sin(phi)])
        if rng.uniform() < params.bend_prob:
            bend = rng.uniform(-math.radians(40), math.radians(40))
            u2 = -np.array([math.cos(phi + bend), math.sin(phi + bend)])
        else:
            u2 = -u1
        pts = np.stack([c + 1.5 * W * u1, c, c + 1.5 * W * u2])
        roads.append(Road(pts, float(rng.uniform(*params.road_width)), _jitter(rng, ROAD_BASE, j / 2)))
    road_zone = unary_union([r.polygon() for r in roads]) if roads else None

    buildings: list[Building] = []
    footprints = []
    attempts = 0
    while len(buildings) < params.n_buildings and attempts < params.max_attempts:
        attempts += 1
        w, h = rng.uniform(*params.building_size, size=2)
        cx = rng.uniform(-W / 2 + w / 2, W / 2 - w / 2)
        cy = rng.uniform(-W / 2 + h / 2, W / 2 - h / 2)
        height = rng.uniform(*params.building_height)
        k = rng.integers(len(PALETTE))
        fp = box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        grown = fp.buffer(params.clearance)
        if road_zone is not None and grown.intersects(road_zone):
            continue
        if any(grown.intersects(o) for o in footprints):
            continue
        facade = _jitter(rng, PALETTE[k], j)
        roof = np.clip(facade * 0.75 + rng.uniform(-j, j, size=3) / 2, 0.0, 1.0)
        footprints.append(fp)
        buildings.append(Building(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, float(height), facade, roof))

    scene = SceneSpec(
        extent=W, search_extent=params.search_extent, roads=roads, buildings=buildings,
        ground_color=_jitter(rng, GROUND_BASE, j), sky_color=_jitter(rng, SKY_BASE, j / 2), seed=seed)
    if scene.camera_region().is_empty:
        raise SceneError(f"scene {seed!r} has no valid camera placement")
    return scene


def sample_camera_pose(scene: SceneSpec, rng: np.random.Generator, max_tries: int = 10000) -> Pose:
    """Uniform pose on the road surface inside the search extent, uniform yaw."""
    half = scene.search_extent / 2.0
    for _ in range(max_tries):
        x, y = rng.uniform(-half, half, size=2)
        if scene.valid_camera(x, y):
            return Pose(x, y, rng.uniform(-math.pi, math.pi))
    region = scene.camera_region()
    if region.is_empty:
        raise SceneError("no valid camera placement")
    p = region.representative_point()
    return Pose(p.x, p.y, rng.uniform(-math.pi, math.pi))


def placement_feasible(scene: SceneSpec) -> bool:
    region = scene.camera_region()
    return (not region.is_empty) and scene.valid_camera(*region.representative_point().coords[0])


__all__ = ["SynthParams", "SceneSpec", "Road", "Building", "SceneError", "generate_scene",
           "sample_camera_pose", "placement_feasible"]
