"""Seeded synthetic urban scenes and base-station deployments.

Buildings are axis-aligned rectangles in metric coordinates, rasterized onto
an ``grid_size x grid_size`` grid by cell-center inclusion. Cell ``(i, j)``
has its center at ``x = (j + 0.5) * cell_size``, ``y = (i + 0.5) * cell_size``;
rows therefore run along +y.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

ROAD_CATEGORIES = ("crossroad", "t_junction", "canyon", "offset_crossroad")
BUILDING_CATEGORIES = ("building_dense", "building_medium", "building_sparse")
CATEGORIES = ROAD_CATEGORIES + BUILDING_CATEGORIES

DEFAULT_BUILDING_COUNT = {
    "crossroad": 180,
    "t_junction": 200,
    "canyon": 220,
    "offset_crossroad": 180,
    "building_dense": 300,
    "building_medium": 200,
    "building_sparse": 120,
}

MAX_ATTEMPTS_PER_BUILDING = 10_000
ROOFTOP_ANTENNA_OFFSET_M = 2.0
ROADSIDE_HEIGHT_M = 10.0


class SceneGenerationError(RuntimeError):
    """Raised when the requested layout cannot be realized."""


@dataclass(frozen=True)
class SceneConfig:
    category: str = "crossroad"
    extent_m: float = 400.0
    grid_size: int = 512
    street_width_m: float = 30.0
    building_count: int | None = None
    height_range_m: tuple[float, float] = (10.0, 50.0)
    footprint_range_m: tuple[float, float] = (6.0, 18.0)
    min_clearance_m: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown scene category {self.category!r}")
        if self.extent_m <= 0 or self.grid_size <= 0:
            raise ValueError("extent_m and grid_size must be positive")
        if self.street_width_m <= 0:
            raise ValueError("street_width_m must be positive")
        lo, hi = self.height_range_m
        if not 0 < lo <= hi:
            raise ValueError("height_range_m must satisfy 0 < min <= max")
        flo, fhi = self.footprint_range_m
        if not 0 < flo <= fhi:
            raise ValueError("footprint_range_m must satisfy 0 < min <= max")
        if self.min_clearance_m < 0:
            raise ValueError("min_clearance_m must be nonnegative")
        if self.building_count is not None and self.building_count < 0:
            raise ValueError("building_count must be nonnegative")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def cell_size_m(self) -> float:
        return self.extent_m / self.grid_size

    @property
    def n_buildings(self) -> int:
        if self.building_count is None:
            return DEFAULT_BUILDING_COUNT[self.category]
        return self.building_count


@dataclass
class Scene:
    occupancy: np.ndarray  # bool (H, W)
    heights: np.ndarray  # float64 (H, W), meters
    road_mask: np.ndarray  # bool (H, W)
    cell_size_m: float
    config: SceneConfig
    buildings: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))
    """Rows of ``(x0, y0, x1, y1, height)`` in meters."""

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupancy.shape

    @property
    def accessible(self) -> np.ndarray:
        return ~self.occupancy

    def cell_center(self, i, j):
        return (np.asarray(j) + 0.5) * self.cell_size_m, (np.asarray(i) + 0.5) * self.cell_size_m

    def cell_index(self, x: float, y: float) -> tuple[int, int]:
        h, w = self.shape
        j = min(max(int(np.floor(x / self.cell_size_m)), 0), w - 1)
        i = min(max(int(np.floor(y / self.cell_size_m)), 0), h - 1)
        return i, j


@dataclass(frozen=True)
class BsDeployment:
    position: tuple[float, float, float]
    mode: str
    id: int


def road_rectangles(category: str, extent: float, width: float) -> list[tuple[float, float, float, float]]:
    """Road strips ``(x0, y0, x1, y1)`` in meters for a layout category."""
    c = extent / 2.0
    hw = width / 2.0
    if category == "crossroad":
        return [(0.0, c - hw, extent, c + hw), (c - hw, 0.0, c + hw, extent)]
    if category == "t_junction":
        return [(0.0, c - hw, extent, c + hw), (c - hw, c - hw, c + hw, extent)]
    if category == "canyon":
        return [(0.0, c - hw, extent, c + hw)]
    if category == "offset_crossroad":
        y1, y2 = extent / 3.0, 2.0 * extent / 3.0
        return [
            (c - hw, 0.0, c + hw, extent),
            (0.0, y1 - hw, c + hw, y1 + hw),
            (c - hw, y2 - hw, extent, y2 + hw),
        ]
    return []


def rasterize_rect(rect, grid_size: int, cell_size: float) -> np.ndarray:
    """Cells whose centers lie inside the closed rectangle."""
    x0, y0, x1, y1 = rect
    centers = (np.arange(grid_size) + 0.5) * cell_size
    cols = (centers >= x0) & (centers <= x1)
    rows = (centers >= y0) & (centers <= y1)
    return rows[:, None] & cols[None, :]


def rect_gap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean gap between axis-aligned rectangles; negative when they overlap.

    ``a`` is a single ``(x0, y0, x1, y1)`` row, ``b`` may be ``(N, 4)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.atleast_2d(np.asarray(b, dtype=float))
    gx = np.maximum(a[0] - b[:, 2], b[:, 0] - a[2])
    gy = np.maximum(a[1] - b[:, 3], b[:, 1] - a[3])
    separated = (gx > 0) | (gy > 0)
    dist = np.hypot(np.maximum(gx, 0.0), np.maximum(gy, 0.0))
    return np.where(separated, dist, np.maximum(gx, gy))


def generate_scene(config: SceneConfig) -> Scene:
    """Build a scene; identical configs give bit-identical grids."""
    n = config.grid_size
    cs = config.cell_size_m
    rng = np.random.default_rng(int(config.seed))

    roads = road_rectangles(config.category, config.extent_m, config.street_width_m)
    road_mask = np.zeros((n, n), dtype=bool)
    for r in roads:
        road_mask |= rasterize_rect(r, n, cs)
    road_arr = np.array(roads, dtype=float).reshape(-1, 4)
    road_clear = max(config.min_clearance_m, cs)

    occupancy = np.zeros((n, n), dtype=bool)
    heights = np.zeros((n, n), dtype=float)
    placed: list[np.ndarray] = []
    flo, fhi = config.footprint_range_m
    hlo, hhi = config.height_range_m

    for b in range(config.n_buildings):
        for _attempt in range(MAX_ATTEMPTS_PER_BUILDING):
            w, l = rng.uniform(flo, fhi, size=2)
            if w > config.extent_m or l > config.extent_m:
                continue
            x0 = rng.uniform(0.0, config.extent_m - w)
            y0 = rng.uniform(0.0, config.extent_m - l)
            rect = np.array([x0, y0, x0 + w, y0 + l])
            if road_arr.size and np.any(rect_gap(rect, road_arr) < road_clear):
                continue
            if placed and np.any(rect_gap(rect, np.array(placed)[:, :4]) < config.min_clearance_m):
                continue
            cells = rasterize_rect(rect, n, cs)
            if not cells.any():
                continue
            h = rng.uniform(hlo, hhi)
            occupancy |= cells
            heights[cells] = h
            placed.append(np.append(rect, h))
            break
        else:
            raise SceneGenerationError(
                f"could not place building {b + 1}/{config.n_buildings} after "
                f"{MAX_ATTEMPTS_PER_BUILDING} attempts; density infeasible for {config.category}"
            )

    if config.category not in ROAD_CATEGORIES:
        road_mask = ~occupancy
    buildings = np.array(placed, dtype=float).reshape(-1, 5)
    return Scene(occupancy, heights, road_mask, cs, config, buildings)


def _normalize_modes(count: int, modes) -> list[str]:
    if isinstance(modes, str):
        if modes == "mixed":
            return ["roadside" if k % 2 == 0 else "rooftop" for k in range(count)]
        modes = [modes] * count
    modes = list(modes)
    if len(modes) != count:
        raise ValueError(f"expected {count} modes, got {len(modes)}")
    for m in modes:
        if m not in ("roadside", "rooftop"):
            raise ValueError(f"unknown deployment mode {m!r}")
    return modes


def place_base_stations(
    scene: Scene,
    count: int,
    modes: str | Sequence[str] = "mixed",
    seed: int = 0,
) -> list[BsDeployment]:
    """Draw ``count`` deployments at distinct cell centers.

    Roadside stations use road cells (any accessible cell if the layout has no
    roads) at a fixed mast height; rooftop stations sit on a building with a
    fixed antenna offset above the roof.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    modes = _normalize_modes(count, modes)
    rng = np.random.default_rng(int(seed))

    roadside_cells = np.flatnonzero(scene.road_mask & ~scene.occupancy)
    if roadside_cells.size == 0:
        roadside_cells = np.flatnonzero(~scene.occupancy)
    rooftop_cells = np.flatnonzero(scene.occupancy)
    pools = {"roadside": roadside_cells, "rooftop": rooftop_cells}
    for m in set(modes):
        if pools[m].size == 0:
            raise SceneGenerationError(f"no valid cell for {m} base station")

    used: set[int] = set()
    out = []
    w = scene.shape[1]
    for k, m in enumerate(modes):
        pool = pools[m]
        free = pool[~np.isin(pool, list(used))] if used else pool
        if free.size == 0:
            raise SceneGenerationError(f"ran out of distinct {m} cells")
        flat = int(free[rng.integers(free.size)])
        used.add(flat)
        i, j = divmod(flat, w)
        x, y = scene.cell_center(i, j)
        if m == "rooftop":
            z = float(scene.heights[i, j]) + ROOFTOP_ANTENNA_OFFSET_M
        else:
            z = ROADSIDE_HEIGHT_M
        out.append(BsDeployment((float(x), float(y), z), m, k))
    return out


def with_seed(config: SceneConfig, seed: int) -> SceneConfig:
    return replace(config, seed=seed)


def scene_categories(names: Iterable[str] | str) -> list[str]:
    """Parse a comma list of category names (``all`` expands to every category)."""
    if isinstance(names, str):
        names = [s.strip() for s in names.split(",") if s.strip()]
    names = list(names)
    if names == ["all"]:
        return list(CATEGORIES)
    for n in names:
        if n not in CATEGORIES:
            raise ValueError(f"unknown scene category {n!r}")
    return names
