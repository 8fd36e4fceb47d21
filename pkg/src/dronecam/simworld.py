"""Procedural simulation worlds: heightfield terrain, box obstacles, pinhole
depth rendering, patch-feature synthesis, and swept-segment collision queries.

World frame: z is up; heights are terrain elevation over the xy plane.
Rendering follows the package camera convention (+z forward, +x right, +y down).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraPose, look_at_pose

WORLD_KINDS = ("terrain", "canyon", "city-blocks")
DEFAULT_CLEARANCE = 0.2
COLLISION_STEP = 0.05
PATCH_ROWS, PATCH_COLS = 5, 9
DEFAULT_FEATURE_DIM = 32
FEATURE_CHANNELS = 6  # mean/min/max inverse depth, v/h gradients, sky fraction


# --- seeded value noise ------------------------------------------------------


def _hash_lattice(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic pseudo-random value in [-1, 1) per integer lattice point."""
    with np.errstate(over="ignore"):  # uint64 wraparound is the point of the mix
        h = (
            ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
            ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
            ^ np.uint64(seed) * np.uint64(0xD6E8FEB86659FD93)
        )
        h ^= h >> np.uint64(33)
        h *= np.uint64(0xFF51AFD7ED558CCD)
        h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53) * 2.0 - 1.0


def value_noise(x, y, seed: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [-1, 1], vectorized over x/y."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    n00 = _hash_lattice(ix, iy, seed)
    n10 = _hash_lattice(ix + 1, iy, seed)
    n01 = _hash_lattice(ix, iy + 1, seed)
    n11 = _hash_lattice(ix + 1, iy + 1, seed)
    sx = fx * fx * (3.0 - 2.0 * fx)
    sy = fy * fy * (3.0 - 2.0 * fy)
    nx0 = n00 + sx * (n10 - n00)
    nx1 = n01 + sx * (n11 - n01)
    return nx0 + sy * (nx1 - nx0)


def fbm_noise(x, y, seed: int, octaves: int = 4, lacunarity: float = 2.0, gain: float = 0.5):
    """Fractal sum of value-noise octaves, normalized to [-1, 1]."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    total = np.zeros(np.broadcast(x, y).shape)
    amplitude = 1.0
    frequency = 1.0
    norm = 0.0
    for octave in range(octaves):
        total += amplitude * value_noise(x * frequency, y * frequency, seed + octave)
        norm += amplitude
        amplitude *= gain
        frequency *= lacunarity
    return total / norm


# --- worlds -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class World:
    """Immutable heightfield + axis-aligned box obstacles."""

    seed: int
    kind: str
    heights: np.ndarray  # (ny, nx) terrain elevation at grid nodes
    origin: np.ndarray  # (2,) world xy of grid node (0, 0)
    spacing: float
    obstacles: np.ndarray  # (k, 2, 3): per box, (min corner, max corner)

    def __post_init__(self):
        self.heights.setflags(write=False)
        self.origin.setflags(write=False)
        self.obstacles.setflags(write=False)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """(min_xy, max_xy) of the heightfield footprint."""
        ny, nx = self.heights.shape
        max_xy = self.origin + np.array([(nx - 1) * self.spacing, (ny - 1) * self.spacing])
        return self.origin.copy(), max_xy

    @property
    def is_flat(self) -> bool:
        return bool(np.all(self.heights == self.heights.flat[0]))

    def height_at(self, x, y) -> np.ndarray:
        """Bilinear terrain height; coordinates are clamped to the grid footprint."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ny, nx = self.heights.shape
        gx = np.clip((x - self.origin[0]) / self.spacing, 0.0, nx - 1.0)
        gy = np.clip((y - self.origin[1]) / self.spacing, 0.0, ny - 1.0)
        ix = np.minimum(gx.astype(np.int64), nx - 2)
        iy = np.minimum(gy.astype(np.int64), ny - 2)
        fx = gx - ix
        fy = gy - iy
        h00 = self.heights[iy, ix]
        h10 = self.heights[iy, ix + 1]
        h01 = self.heights[iy + 1, ix]
        h11 = self.heights[iy + 1, ix + 1]
        return (
            h00 * (1 - fx) * (1 - fy)
            + h10 * fx * (1 - fy)
            + h01 * (1 - fx) * fy
            + h11 * fx * fy
        )

    @property
    def max_height(self) -> float:
        top = float(self.heights.max())
        if len(self.obstacles):
            top = max(top, float(self.obstacles[:, 1, 2].max()))
        return top


def generate_world(
    seed: int,
    kind: str = "terrain",
    size: float = 240.0,
    spacing: float = 2.0,
    obstacle_count: int = 24,
) -> World:
    """Deterministic world per (seed, kind)."""
    if kind not in WORLD_KINDS:
        raise ValueError(f"unknown world kind {kind!r}; expected one of {WORLD_KINDS}")
    n = int(round(size / spacing)) + 1
    half = size / 2.0
    origin = np.array([-half, -half])
    xs = origin[0] + spacing * np.arange(n)
    ys = origin[1] + spacing * np.arange(n)
    gx, gy = np.meshgrid(xs, ys)

    obstacles = np.zeros((0, 2, 3))
    if kind == "terrain":
        heights = 9.0 * fbm_noise(gx / 55.0, gy / 55.0, seed) + 2.5 * fbm_noise(
            gx / 16.0, gy / 16.0, seed + 101
        )
    elif kind == "canyon":
        # valley corridor along the x axis with tall noisy walls on both sides
        wall = np.clip((np.abs(gy) - 14.0) / 22.0, 0.0, 1.0)
        wall = wall * wall * (3.0 - 2.0 * wall)
        heights = 26.0 * wall + 2.0 * fbm_noise(gx / 18.0, gy / 18.0, seed) * (0.3 + wall)
    else:  # city-blocks: flat ground with box buildings resting on z = 0
        heights = np.zeros_like(gx)
        rng = np.random.default_rng(seed)
        boxes = []
        attempts = 0
        while len(boxes) < obstacle_count and attempts < obstacle_count * 20:
            attempts += 1
            cx, cy = rng.uniform(-half + 20.0, half - 20.0, size=2)
            if math.hypot(cx, cy) < 25.0:
                continue  # keep a clear spawn area near the origin
            wx, wy = rng.uniform(5.0, 11.0, size=2)
            hz = rng.uniform(8.0, 24.0)
            boxes.append([[cx - wx, cy - wy, 0.0], [cx + wx, cy + wy, hz]])
        obstacles = np.array(boxes) if boxes else np.zeros((0, 2, 3))

    return World(
        seed=seed,
        kind=kind,
        heights=heights,
        origin=origin,
        spacing=spacing,
        obstacles=obstacles,
    )


def load_world_spec(path: Path) -> World:
    """World spec file: JSON {seed, kind, size, obstacle_count}."""
    spec = json.loads(Path(path).read_text())
    return generate_world(
        seed=int(spec["seed"]),
        kind=spec.get("kind", "terrain"),
        size=float(spec.get("size", 240.0)),
        obstacle_count=int(spec.get("obstacle_count", 24)),
    )


def write_world_spec(path: Path, seed: int, kind: str, size: float = 240.0, obstacle_count: int = 24):
    Path(path).write_text(
        json.dumps(
            {"seed": seed, "kind": kind, "size": size, "obstacle_count": obstacle_count},
            sort_keys=True,
        )
        + "\n"
    )


# --- depth rendering -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel hit distance along the ray, +inf for sky."""

    depths: np.ndarray  # (height, width)
    hfov_deg: float
    max_range: float

    def __post_init__(self):
        self.depths.setflags(write=False)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.depths.shape


def _ray_directions(pose: CameraPose, width: int, height: int, hfov_deg: float) -> np.ndarray:
    tan_half = math.tan(math.radians(hfov_deg) / 2.0)
    xs = (np.arange(width) + 0.5 - width / 2.0) / (width / 2.0) * tan_half
    ys = (np.arange(height) + 0.5 - height / 2.0) / (width / 2.0) * tan_half
    px, py = np.meshgrid(xs, ys)
    dirs = np.stack([px, py, np.ones_like(px)], axis=-1)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs.reshape(-1, 3) @ pose.rotation_matrix().T


def _box_hits(origin: np.ndarray, dirs: np.ndarray, obstacles: np.ndarray) -> np.ndarray:
    """Nearest positive slab-test hit distance per ray, +inf where no box is hit."""
    best = np.full(dirs.shape[0], np.inf)
    inv = 1.0 / np.where(np.abs(dirs) < 1e-300, 1e-300, dirs)
    for bmin, bmax in obstacles:
        t1 = (bmin - origin) * inv
        t2 = (bmax - origin) * inv
        t_near = np.max(np.minimum(t1, t2), axis=1)
        t_far = np.min(np.maximum(t1, t2), axis=1)
        hit = (t_near <= t_far) & (t_far > 1e-9)
        t_hit = np.where(t_near > 1e-9, t_near, t_far)
        best = np.where(hit & (t_hit < best), t_hit, best)
    return best


def _terrain_hits(
    world: World, origin: np.ndarray, dirs: np.ndarray, max_range: float
) -> np.ndarray:
    """Ray-marched heightfield hit distance per ray with bisection refinement."""
    if world.is_flat:
        ground = float(world.heights.flat[0])
        dz = dirs[:, 2]
        t = np.where(dz < -1e-12, (ground - origin[2]) / np.where(dz == 0, -1.0, dz), np.inf)
        return np.where((t > 1e-9) & (t <= max_range), t, np.inf)

    n_rays = dirs.shape[0]
    step = 0.25
    t_lo = np.zeros(n_rays)
    hit_lo = np.full(n_rays, np.inf)
    hit_hi = np.full(n_rays, np.inf)
    active = np.ones(n_rays, dtype=bool)
    top = float(world.heights.max()) + 1e-6
    t = np.full(n_rays, step)
    while np.any(active):
        idx = np.nonzero(active)[0]
        pts = origin + dirs[idx] * t[idx, None]
        below = pts[:, 2] <= world.height_at(pts[:, 0], pts[:, 1])
        newly = idx[below]
        hit_lo[newly] = t[newly] - step
        hit_hi[newly] = t[newly]
        active[newly] = False
        # rays that climbed above the highest terrain while still rising never hit
        escaped = idx[~below]
        rising = (origin[2] + dirs[escaped, 2] * t[escaped] > top) & (dirs[escaped, 2] >= 0.0)
        active[escaped[rising]] = False
        t[idx] += step
        active &= t <= max_range

    bracketed = np.isfinite(hit_hi)
    if np.any(bracketed):
        lo = hit_lo[bracketed]
        hi = hit_hi[bracketed]
        sub = dirs[bracketed]
        for _ in range(45):
            mid = 0.5 * (lo + hi)
            pts = origin + sub * mid[:, None]
            below = pts[:, 2] <= world.height_at(pts[:, 0], pts[:, 1])
            hi = np.where(below, mid, hi)
            lo = np.where(below, lo, mid)
        hit_hi[bracketed] = hi
    return np.where(np.isfinite(hit_hi) & (hit_hi <= max_range), hit_hi, np.inf)


def render_depth(
    world: World,
    pose: CameraPose,
    width: int = 80,
    height: int = 45,
    hfov_deg: float = 70.0,
    max_range: float = 80.0,
) -> DepthMap:
    """Cast one ray per pixel against the heightfield and obstacle boxes."""
    dirs = _ray_directions(pose, width, height, hfov_deg)
    origin = pose.position
    terrain_t = _terrain_hits(world, origin, dirs, max_range)
    depth = terrain_t
    if len(world.obstacles):
        box_t = _box_hits(origin, dirs, world.obstacles)
        depth = np.minimum(depth, np.where(box_t <= max_range, box_t, np.inf))
    return DepthMap(depths=depth.reshape(height, width), hfov_deg=hfov_deg, max_range=max_range)


# --- patch features -------------------------------------------------------------


def _tile_index(count: int, tiles: int) -> np.ndarray:
    """Tile id per pixel by pixel-center membership (handles non-divisible sizes)."""
    return np.minimum(((np.arange(count) + 0.5) * tiles / count).astype(np.int64), tiles - 1)


def patch_features(depth_map: DepthMap, feature_dim: int = DEFAULT_FEATURE_DIM):
    """Per-tile depth statistics on a 5x9 grid.

    Returns (features, depth_patches): features is (5, 9, feature_dim) holding
    mean/min/max inverse depth, vertical and horizontal inverse-depth gradients,
    and sky fraction, zero-padded to feature_dim; depth_patches is the (5, 9)
    mean depth per tile with sky clamped to the render's max range.
    """
    if feature_dim < FEATURE_CHANNELS:
        raise ValueError(f"feature_dim must be >= {FEATURE_CHANNELS}")
    depths = depth_map.depths
    h, w = depths.shape
    sky = ~np.isfinite(depths)
    inv = np.where(sky, 0.0, 1.0 / np.where(sky, 1.0, depths))
    clamped = np.where(sky, depth_map.max_range, depths)
    grad_v, grad_h = np.gradient(inv)

    row_id = _tile_index(h, PATCH_ROWS)
    col_id = _tile_index(w, PATCH_COLS)
    features = np.zeros((PATCH_ROWS, PATCH_COLS, feature_dim))
    depth_patches = np.zeros((PATCH_ROWS, PATCH_COLS))
    for r in range(PATCH_ROWS):
        rows = row_id == r
        for c in range(PATCH_COLS):
            cols = col_id == c
            tile_inv = inv[np.ix_(rows, cols)]
            features[r, c, 0] = tile_inv.mean()
            features[r, c, 1] = tile_inv.min()
            features[r, c, 2] = tile_inv.max()
            features[r, c, 3] = grad_v[np.ix_(rows, cols)].mean()
            features[r, c, 4] = grad_h[np.ix_(rows, cols)].mean()
            features[r, c, 5] = sky[np.ix_(rows, cols)].mean()
            depth_patches[r, c] = clamped[np.ix_(rows, cols)].mean()
    return features, depth_patches


# --- collision -------------------------------------------------------------------


def collision(
    world: World,
    p_start,
    p_end,
    clearance: float = DEFAULT_CLEARANCE,
    step: float = COLLISION_STEP,
) -> bool:
    """True if the swept segment comes within `clearance` of terrain or a box.

    The segment is sampled at most `step` apart and the clearance is inflated
    by half the actual sample spacing, so the check errs on the side of
    reporting a collision (the distance field is 1-Lipschitz along the segment).
    """
    a = np.asarray(p_start, dtype=float)
    b = np.asarray(p_end, dtype=float)
    length = float(np.linalg.norm(b - a))
    n = max(int(math.ceil(length / step)), 1)
    spacing = length / n
    ts = np.linspace(0.0, 1.0, n + 1)
    pts = a + (b - a) * ts[:, None]
    inflated = clearance + 0.5 * spacing

    ground = world.height_at(pts[:, 0], pts[:, 1])
    if np.any(pts[:, 2] - ground <= inflated):
        return True
    for bmin, bmax in world.obstacles:
        gap = np.maximum(np.maximum(bmin - pts, pts - bmax), 0.0)
        if np.any(np.linalg.norm(gap, axis=1) <= inflated):
            return True
    return False


def spawn_pose(
    world: World,
    rng: np.random.Generator,
    altitude: tuple[float, float] = (6.0, 12.0),
    runway: float = 15.0,
) -> CameraPose:
    """Collision-free pose with a clear corridor ahead, looking roughly level.

    The `runway` probe rejects spawns that face straight into nearby geometry,
    which would doom any policy within the first prediction step.
    """
    for _ in range(300):
        lo, hi = world.bounds
        xy = rng.uniform(lo + 30.0, hi - 30.0)
        z = float(world.height_at(xy[0], xy[1])) + rng.uniform(*altitude)
        position = np.array([xy[0], xy[1], z])
        heading = rng.uniform(0.0, 2.0 * math.pi)
        forward = np.array([math.cos(heading), math.sin(heading), rng.uniform(-0.1, 0.05)])
        forward /= np.linalg.norm(forward)
        pose = look_at_pose(position, forward)
        if not collision(world, position, position + forward * runway, clearance=1.5):
            return pose
    raise RuntimeError(f"could not find a collision-free spawn in world seed={world.seed}")


def write_pgm(path: Path, depth_map: DepthMap):
    """Portable graymap of inverse depth for quick visual inspection."""
    inv = np.where(np.isfinite(depth_map.depths), 1.0 / np.maximum(depth_map.depths, 1e-6), 0.0)
    top = inv.max()
    gray = (inv / top * 255.0).astype(np.uint8) if top > 0 else np.zeros_like(inv, dtype=np.uint8)
    h, w = gray.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P5 {w} {h} 255\n".encode())
        fh.write(gray.tobytes())
