"""Occupancy-grid audio-goal navigation world.

Coordinates are in cells: cell (x, y) occupies [x, x+1) x [y, y+1) and the
agent stands at its centre.  Headings are 0:+x, 1:+y, 2:-x, 3:-y and a left
turn is counter-clockwise (heading + 1), so bearings are positive to the left.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .autodiff import ContractViolation
from .sdld import BinGrid

MOVE_FORWARD, TURN_LEFT, TURN_RIGHT, STOP = 0, 1, 2, 3
ACTIONS = ("MoveForward", "TurnLeft", "TurnRight", "Stop")
HEADINGS = ((1, 0), (0, 1), (-1, 0), (0, -1))


class SimFault(RuntimeError):
    """The generator or sampler could not satisfy its constraints."""


def seed_stream(master: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for a named consumer of the master seed."""
    return np.random.default_rng([int(master) & 0xFFFFFFFF, zlib.crc32(name.encode()), *map(int, index)])


# ---------------------------------------------------------------- world


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: int

    @property
    def cell(self) -> tuple[int, int]:
        return (self.x, self.y)


@dataclass(eq=False)
class OccupancyGrid:
    blocked: np.ndarray  # bool, indexed [y, x]
    cell_size: float = 1.5
    seed: int = -1
    _depth_cache: dict = field(default_factory=dict, repr=False)
    _field_cache: dict = field(default_factory=dict, repr=False)

    @property
    def width(self) -> int:
        return self.blocked.shape[1]

    @property
    def height(self) -> int:
        return self.blocked.shape[0]

    def is_free(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height and not self.blocked[y, x]

    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(~self.blocked)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def free_fraction(self) -> float:
        return float((~self.blocked).mean())

    def distance_field(self, cell) -> np.ndarray:
        """BFS hop counts from ``cell`` over 4-connected free cells (-1 where unreachable)."""
        cell = tuple(cell)
        if not self.is_free(cell):
            raise ContractViolation(f"distance_field: cell {cell} is blocked")
        table = self._field_cache.get("all-pairs")
        if table is None:
            table = self._field_cache["all-pairs"] = self._all_pairs()
        index, fields = table
        return fields[index[cell[1], cell[0]]]

    def _all_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Hop-count fields from every free cell at once, by a synchronous BFS wavefront."""
        free = ~self.blocked
        ys, xs = np.nonzero(free)
        n = len(ys)
        index = np.full(self.blocked.shape, -1, dtype=np.int64)
        index[ys, xs] = np.arange(n)
        dist = np.full((n,) + self.blocked.shape, -1, dtype=np.int16)
        frontier = np.zeros((n,) + self.blocked.shape, dtype=bool)
        frontier[np.arange(n), ys, xs] = True
        dist[frontier] = 0
        d = 0
        while frontier.any():
            d += 1
            grown = np.zeros_like(frontier)
            grown[:, 1:, :] |= frontier[:, :-1, :]
            grown[:, :-1, :] |= frontier[:, 1:, :]
            grown[:, :, 1:] |= frontier[:, :, :-1]
            grown[:, :, :-1] |= frontier[:, :, 1:]
            frontier = grown & free & (dist < 0)
            dist[frontier] = d
        dist.setflags(write=False)
        return index, dist

    def is_connected(self) -> bool:
        free = ~self.blocked
        ys, xs = np.nonzero(free)
        if len(ys) == 0:
            return False
        seen = np.zeros_like(free)
        seen[ys[0], xs[0]] = True
        while True:
            grown = seen.copy()
            grown[1:, :] |= seen[:-1, :]
            grown[:-1, :] |= seen[1:, :]
            grown[:, 1:] |= seen[:, :-1]
            grown[:, :-1] |= seen[:, 1:]
            grown &= free
            if np.array_equal(grown, seen):
                return bool(np.array_equal(seen, free))
            seen = grown

    def mirrored_rows(self) -> "OccupancyGrid":
        return OccupancyGrid(self.blocked[::-1].copy(), self.cell_size, self.seed)


def geodesic_distance(grid: OccupancyGrid, a, b) -> float:
    """Shortest 4-connected path length in metres (inf if disconnected)."""
    for c in (a, b):
        if not grid.is_free(c):
            raise ContractViolation(f"geodesic_distance: cell {tuple(c)} is blocked")
    hops = grid.distance_field(b)[a[1], a[0]]
    return math.inf if hops < 0 else float(hops) * grid.cell_size


def _split_room(blocked: np.ndarray, x0: int, y0: int, x1: int, y1: int, depth: int, rng: np.random.Generator,
                min_room: int, door_width: int) -> None:
    """Recursively divide the free rectangle [x0, x1] x [y0, y1] with walls that keep doorways open."""
    w, h = x1 - x0 + 1, y1 - y0 + 1
    if depth <= 0:
        return
    can_v = w >= 2 * min_room + 1
    can_h = h >= 2 * min_room + 1
    if not (can_v or can_h):
        return
    vertical = can_v and (not can_h or (w > h) or (w == h and rng.random() < 0.5))
    if vertical:
        wx = int(rng.integers(x0 + min_room, x1 - min_room + 1))
        blocked[y0 : y1 + 1, wx] = True
        start = int(rng.integers(y0, y1 - door_width + 2))
        blocked[start : start + door_width, wx] = False
        _split_room(blocked, x0, y0, wx - 1, y1, depth - 1, rng, min_room, door_width)
        _split_room(blocked, wx + 1, y0, x1, y1, depth - 1, rng, min_room, door_width)
    else:
        wy = int(rng.integers(y0 + min_room, y1 - min_room + 1))
        blocked[wy, x0 : x1 + 1] = True
        start = int(rng.integers(x0, x1 - door_width + 2))
        blocked[wy, start : start + door_width] = False
        _split_room(blocked, x0, y0, x1, wy - 1, depth - 1, rng, min_room, door_width)
        _split_room(blocked, x0, wy + 1, x1, y1, depth - 1, rng, min_room, door_width)


@lru_cache(maxsize=256)
def generate_grid(seed: int, width: int = 20, height: int = 20, split_depth: int = 2, door_width: int = 2,
                  obstacles: int = 6, cell_size: float = 1.5, max_tries: int = 50) -> OccupancyGrid:
    """Rooms separated by walls with doorways, plus scattered single-cell obstacles.

    Deterministic per argument tuple; connectivity is verified by flood fill.
    """
    if width < 5 or height < 5:
        raise ContractViolation("generate_grid: grid must be at least 5x5")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x6A1D])
    min_room = max(2, min(width, height) // 5)
    for _ in range(max_tries):
        blocked = np.zeros((height, width), dtype=bool)
        blocked[0, :] = blocked[-1, :] = True
        blocked[:, 0] = blocked[:, -1] = True
        _split_room(blocked, 1, 1, width - 2, height - 2, split_depth, rng, min_room, door_width)
        for _ in range(obstacles):
            x = int(rng.integers(1, width - 1))
            y = int(rng.integers(1, height - 1))
            if blocked[y, x]:
                continue
            blocked[y, x] = True
            trial = OccupancyGrid(blocked, cell_size, seed)
            if not trial.is_connected():
                blocked[y, x] = False
        grid = OccupancyGrid(blocked, cell_size, int(seed))
        if grid.is_connected() and grid.free_fraction() >= 0.4:
            return grid
    raise SimFault(f"generate_grid: no valid layout for seed {seed} after {max_tries} tries")


# ---------------------------------------------------------------- sensing


@lru_cache(maxsize=16)
def ray_offsets(rays: int, fov_deg: float = 90.0) -> np.ndarray:
    """Ray angles relative to the heading, right (negative) to left, exactly symmetric."""
    step = math.radians(fov_deg) / rays
    half = (np.arange(rays // 2, rays) - rays / 2 + 0.5) * step
    if rays % 2:
        half = np.arange(rays // 2 + 1) * step
        return np.concatenate([-half[:0:-1], half])
    return np.concatenate([-half[::-1], half])


def _rotate(dx: np.ndarray, dy: np.ndarray, heading: int) -> tuple[np.ndarray, np.ndarray]:
    for _ in range(heading % 4):
        dx, dy = -dy, dx
    return dx, dy


def raycast_depth(grid: OccupancyGrid, pose: Pose, rays: int = 32, max_range: float = 30.0,
                  fov_deg: float = 90.0) -> np.ndarray:
    """Normalised depth per ray in [0, 1].

    Depth is the distance from the cell centre to the first blocked cell along
    the ray plus half a cell, so a wall directly ahead reads one cell.
    """
    key = (pose.x, pose.y, pose.heading, rays, max_range, fov_deg)
    hit = grid._depth_cache.get(key)
    if hit is not None:
        return hit
    phi = ray_offsets(rays, fov_deg)
    dx, dy = _rotate(np.cos(phi), np.sin(phi), pose.heading)
    ox, oy = pose.x + 0.5, pose.y + 0.5
    max_cells = max_range / grid.cell_size
    n = int(math.ceil(max_cells)) + 2
    k = np.arange(1, n + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        # vertical grid lines
        sx = np.sign(dx)[:, None]
        lx = np.where(sx > 0, np.floor(ox) + k[None, :], np.floor(ox) + 1 - k[None, :])
        tx = (lx - ox) / dx[:, None]
        cx_x = np.where(sx > 0, lx, lx - 1)
        cy_x = np.floor(oy + tx * dy[:, None])
        # horizontal grid lines
        sy = np.sign(dy)[:, None]
        ly = np.where(sy > 0, np.floor(oy) + k[None, :], np.floor(oy) + 1 - k[None, :])
        ty = (ly - oy) / dy[:, None]
        cy_y = np.where(sy > 0, ly, ly - 1)
        cx_y = np.floor(ox + ty * dx[:, None])
    t = np.concatenate([tx, ty], axis=1)
    cx = np.concatenate([cx_x, cx_y], axis=1)
    cy = np.concatenate([cy_x, cy_y], axis=1)
    valid = np.isfinite(t) & (t > 0)
    cxi = np.where(valid, cx, 0).astype(np.int64)
    cyi = np.where(valid, cy, 0).astype(np.int64)
    inside = (cxi >= 0) & (cxi < grid.width) & (cyi >= 0) & (cyi < grid.height)
    solid = np.where(inside, grid.blocked[np.clip(cyi, 0, grid.height - 1), np.clip(cxi, 0, grid.width - 1)], True)
    t_hit = np.where(valid & solid, t, np.inf).min(axis=1)
    depth = np.minimum(t_hit + 0.5, max_cells) * grid.cell_size / max_range
    depth.setflags(write=False)
    grid._depth_cache[key] = depth
    return depth


def segment_cells(a, b) -> set[tuple[int, int]]:
    """Cells touched by the segment between the centres of cells a and b (supercover), endpoints excluded."""
    ax, ay = a[0] + 0.5, a[1] + 0.5
    bx, by = b[0] + 0.5, b[1] + 0.5
    dx, dy = bx - ax, by - ay
    ts = [0.0, 1.0]
    corners = []
    if dx != 0:
        lo, hi = sorted((ax, bx))
        for k in range(math.floor(lo) + 1, math.ceil(hi)):
            ts.append((k - ax) / dx)
    if dy != 0:
        lo, hi = sorted((ay, by))
        for k in range(math.floor(lo) + 1, math.ceil(hi)):
            ts.append((k - ay) / dy)
    ts.sort()
    cells = set()
    for t0, t1 in zip(ts[:-1], ts[1:]):
        if t1 - t0 < 1e-12:
            corners.append(t0)
            continue
        tm = 0.5 * (t0 + t1)
        cells.add((math.floor(ax + tm * dx), math.floor(ay + tm * dy)))
    for t in corners:
        px, py = round(ax + t * dx), round(ay + t * dy)
        cells.update({(px - 1, py - 1), (px, py - 1), (px - 1, py), (px, py)})
    cells.discard(tuple(a))
    cells.discard(tuple(b))
    return cells


def relative_geometry(pose: Pose, source, cell_size: float) -> tuple[float, float]:
    """Euclidean distance (m) and bearing (rad, +left, in (-pi, pi]) of ``source`` from the agent."""
    vx, vy = (source[0] - pose.x) * cell_size, (source[1] - pose.y) * cell_size
    hx, hy = HEADINGS[pose.heading]
    d = math.hypot(vx, vy)
    if d == 0:
        return 0.0, 0.0
    theta = math.atan2(hx * vy - hy * vx, hx * vx + hy * vy)
    if theta == -math.pi:
        theta = math.pi
    return d, theta


@dataclass(frozen=True)
class SoundSpec:
    id: int
    spectrum: np.ndarray
    split: str


def make_sound_bank(seed: int = 0, bands: int = 8, n_heard: int = 8, n_unheard: int = 4) -> list[SoundSpec]:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x50D])
    bank = []
    for i in range(n_heard + n_unheard):
        s = rng.uniform(0.05, 1.0, size=bands)
        s = s / np.linalg.norm(s)
        s.setflags(write=False)
        bank.append(SoundSpec(i, s, "heard" if i < n_heard else "unheard"))
    return bank


def audio_clean(grid: OccupancyGrid, pose: Pose, source, spectrum: np.ndarray, kappa: float = 0.7,
                occlusion: float = 0.5) -> np.ndarray:
    """Noise-free 2 x B (left, right) band intensities."""
    d, theta = relative_geometry(pose, source, grid.cell_size)
    walls = sum(1 for c in segment_cells(pose.cell, source) if not grid.is_free(c))
    base = np.asarray(spectrum, dtype=np.float64) / (1.0 + d) * occlusion**walls
    s = kappa * math.sin(theta)
    return np.stack([base * (1 + s), base * (1 - s)])


def render_audio(grid: OccupancyGrid, pose: Pose, source, sound: SoundSpec, rng: np.random.Generator,
                 noise: float = 0.01, kappa: float = 0.7) -> np.ndarray:
    clean = audio_clean(grid, pose, source, sound.spectrum, kappa)
    return np.maximum(clean + rng.normal(0.0, noise, size=clean.shape), 0.0)


# ---------------------------------------------------------------- episodes


@dataclass
class SimConfig:
    width: int = 20
    height: int = 20
    cell_size: float = 1.5
    rays: int = 32
    max_range: float = 30.0
    bands: int = 8
    kappa: float = 0.7
    audio_noise: float = 0.01
    max_steps: int = 200
    success_radius: int = 1
    min_hops: int = 4
    max_hops: int = 16
    n_heard: int = 8
    n_unheard: int = 4
    sound_seed: int = 0
    train_layouts: int = 200
    test_layouts: int = 50
    split_depth: int = 2
    door_width: int = 2
    obstacles: int = 6
    step_penalty: float = 0.01
    collision_penalty: float = 0.05
    success_bonus: float = 10.0
    shaping: float = 1.0


@dataclass(frozen=True)
class EpisodeSpec:
    grid: OccupancyGrid
    start: Pose
    source: tuple[int, int]
    sound_id: int
    split: str
    max_steps: int = 200
    success_radius: int = 1


def layout_seed(cfg: SimConfig, layouts: str, index: int) -> int:
    """Training and held-out layouts come from disjoint seed ranges."""
    return index if layouts == "train" else 1_000_000 + index


def sample_episode(seed: int, split: str, cfg: SimConfig, layouts: str = "train",
                   difficulty: tuple[int, int] | None = None, max_tries: int = 100) -> EpisodeSpec:
    if split not in ("heard", "unheard"):
        raise ContractViolation(f"sample_episode: unknown split {split!r}")
    lo, hi = difficulty or (cfg.min_hops, cfg.max_hops)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(split.encode()), zlib.crc32(layouts.encode())])
    pool = cfg.train_layouts if layouts == "train" else cfg.test_layouts
    ids = range(cfg.n_heard) if split == "heard" else range(cfg.n_heard, cfg.n_heard + cfg.n_unheard)
    ids = list(ids)
    if not ids:
        raise ContractViolation(f"sample_episode: empty {split} sound pool")
    for _ in range(max_tries):
        grid = generate_grid(layout_seed(cfg, layouts, int(rng.integers(pool))), cfg.width, cfg.height,
                             cfg.split_depth, cfg.door_width, cfg.obstacles, cfg.cell_size)
        free = grid.free_cells()
        source = free[int(rng.integers(len(free)))]
        dist = grid.distance_field(source)
        cands = [c for c in free if lo <= dist[c[1], c[0]] <= hi]
        if not cands:
            continue
        start = cands[int(rng.integers(len(cands)))]
        pose = Pose(start[0], start[1], int(rng.integers(4)))
        return EpisodeSpec(grid, pose, source, ids[int(rng.integers(len(ids)))], split, cfg.max_steps,
                           cfg.success_radius)
    raise SimFault(f"sample_episode: no placement within {lo}-{hi} hops for seed {seed}")


@dataclass
class Truth:
    distance_bin: int
    angle_bin: int
    reached: bool
    geodesic: float
    distance: float
    bearing: float


@dataclass
class StepResult:
    depth: np.ndarray
    audio: np.ndarray
    reward: float
    done: bool
    truth: Truth
    success: bool = False
    collided: bool = False


class NavEnv:
    """One episode at a time; owned by a single rollout slot."""

    def __init__(self, cfg: SimConfig, sounds: list[SoundSpec], rng: np.random.Generator, bins: BinGrid | None = None):
        self.cfg = cfg
        self.sounds = sounds
        self.rng = rng
        self.bins = bins or BinGrid()
        self.spec: EpisodeSpec | None = None
        self.done = True

    def reset(self, spec: EpisodeSpec) -> StepResult:
        self.spec = spec
        self.pose = spec.start
        self.steps = 0
        self.done = False
        self.success = False
        self.forward_moves = 0
        self.actions = 0
        self.trajectory = [spec.start]
        self._field = spec.grid.distance_field(spec.source)
        self._audio_cache: dict[Pose, tuple[np.ndarray, float, float]] = {}
        return self._observe(0.0, False)

    def geodesic_hops(self, pose: Pose | None = None) -> int:
        p = pose or self.pose
        return int(self._field[p.y, p.x])

    def _geometry(self, pose: Pose):
        hit = self._audio_cache.get(pose)
        if hit is None:
            spec = self.spec
            clean = audio_clean(spec.grid, pose, spec.source, self.sounds[spec.sound_id].spectrum, self.cfg.kappa)
            d, theta = relative_geometry(pose, spec.source, spec.grid.cell_size)
            hit = self._audio_cache[pose] = (clean, d, theta)
        return hit

    def truth(self, pose: Pose | None = None) -> Truth:
        pose = pose or self.pose
        _, d, theta = self._geometry(pose)
        hops = self.geodesic_hops(pose)
        return Truth(int(self.bins.distance_bin(d)), int(self.bins.angle_bin(theta)),
                     hops <= self.spec.success_radius, hops * self.spec.grid.cell_size, d, theta)

    def _observe(self, reward: float, collided: bool) -> StepResult:
        cfg, grid = self.cfg, self.spec.grid
        depth = raycast_depth(grid, self.pose, cfg.rays, cfg.max_range)
        clean, _, _ = self._geometry(self.pose)
        audio = np.maximum(clean + self.rng.normal(0.0, cfg.audio_noise, size=clean.shape), 0.0)
        return StepResult(depth, audio, reward, self.done, self.truth(), self.success, collided)

    def step(self, action: int) -> StepResult:
        if self.done:
            raise ContractViolation("step: episode already finished")
        cfg, spec = self.cfg, self.spec
        before = self.geodesic_hops()
        reward = -cfg.step_penalty
        collided = False
        p = self.pose
        if action == MOVE_FORWARD:
            dx, dy = HEADINGS[p.heading]
            nxt = (p.x + dx, p.y + dy)
            if spec.grid.is_free(nxt):
                self.pose = Pose(nxt[0], nxt[1], p.heading)
                self.forward_moves += 1
            else:
                collided = True
                reward -= cfg.collision_penalty
        elif action == TURN_LEFT:
            self.pose = Pose(p.x, p.y, (p.heading + 1) % 4)
        elif action == TURN_RIGHT:
            self.pose = Pose(p.x, p.y, (p.heading - 1) % 4)
        elif action == STOP:
            self.done = True
            self.success = before <= spec.success_radius
            if self.success:
                reward += cfg.success_bonus
        else:
            raise ContractViolation(f"step: unknown action {action}")
        self.steps += 1
        self.actions += 1
        self.trajectory.append(self.pose)
        after = self.geodesic_hops()
        reward += cfg.shaping * (before - after) * spec.grid.cell_size
        if self.steps >= spec.max_steps:
            self.done = True
        return self._observe(reward, collided)


# ---------------------------------------------------------------- text dumps


def dump_grid(grid: OccupancyGrid, start=None, goal=None) -> str:
    """Header ``grid <w> <h> <seed>`` then one line per row (y = 0 first)."""
    lines = [f"grid {grid.width} {grid.height} {grid.seed}"]
    for y in range(grid.height):
        row = ["#" if grid.blocked[y, x] else "." for x in range(grid.width)]
        if start is not None and start[1] == y:
            row[start[0]] = "S"
        if goal is not None and goal[1] == y:
            row[goal[0]] = "G"
        lines.append("".join(row))
    return "\n".join(lines) + "\n"


def parse_grid(text: str, cell_size: float = 1.5):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if len(head) != 4 or head[0] != "grid":
        raise ContractViolation(f"parse_grid: bad header {lines[0]!r}")
    w, h, seed = int(head[1]), int(head[2]), int(head[3])
    rows = lines[1 : 1 + h]
    if len(rows) != h or any(len(r) != w for r in rows):
        raise ContractViolation("parse_grid: row count or width does not match header")
    blocked = np.zeros((h, w), dtype=bool)
    start = goal = None
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch == "#":
                blocked[y, x] = True
            elif ch == "S":
                start = (x, y)
            elif ch == "G":
                goal = (x, y)
            elif ch != ".":
                raise ContractViolation(f"parse_grid: unknown symbol {ch!r} at ({x}, {y})")
    return OccupancyGrid(blocked, cell_size, seed), start, goal


def dump_episode(spec: EpisodeSpec) -> str:
    return dump_grid(spec.grid, spec.start.cell, spec.source)
