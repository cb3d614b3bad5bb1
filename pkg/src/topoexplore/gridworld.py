"""Deterministic 2-D metric gridworld.

Occupancy/texture grid, point-agent kinematics with sliding collisions,
panoramic ray casting, 4-connected geodesic distances and coverage
accounting.  ``x`` grows with the column index and ``y`` with the row index;
headings are integer degrees measured counter-clockwise from +x.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

FREE = -1
N_TEXTURES = 8
MISS_TEXTURE = 8
N_RAYS = 72
RAY_SPACING = 5
MAX_RANGE = 5.0
COVERAGE_RADIUS = 3.2

FORWARD, LEFT, RIGHT, STOP = 0, 1, 2, 3
ACTION_NAMES = ("forward", "left", "right", "stop")

_EPS = 1e-9


class WorldParseError(ValueError):
    pass


@dataclass(frozen=True)
class Locomotion:
    step_size: float = 0.25
    turn_angle: int = 10

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.turn_angle <= 0 or 360 % self.turn_angle:
            raise ValueError("360 must be divisible by the turn angle")
        if self.turn_angle % RAY_SPACING:
            raise ValueError(f"turn angle must be a multiple of {RAY_SPACING} degrees")

    @classmethod
    def parse(cls, text: str) -> "Locomotion":
        step, turn = text.split(":")
        return cls(float(step), int(turn))

    def __str__(self):
        return f"{self.step_size:g}:{self.turn_angle}"


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: int = 0

    @property
    def position(self):
        return (self.x, self.y)


@dataclass(frozen=True, eq=False)
class Observation:
    """Panoramic scan with rays indexed by absolute bearing (ray i at 5*i deg)."""

    depths: np.ndarray
    textures: np.ndarray
    heading: int = 0

    def __eq__(self, other):
        return (
            isinstance(other, Observation)
            and self.heading == other.heading
            and np.array_equal(self.depths, other.depths)
            and np.array_equal(self.textures, other.textures)
        )

    def egocentric(self):
        """Rays re-indexed so that ray 0 points along the agent heading."""
        idx = (self.heading // RAY_SPACING + np.arange(N_RAYS)) % N_RAYS
        return self.depths[idx], self.textures[idx]

    def forward_depth(self) -> float:
        return float(self.depths[(self.heading // RAY_SPACING) % N_RAYS])


@dataclass(frozen=True, eq=False)
class World:
    cells: np.ndarray  # (rows, cols) int8; FREE or texture id
    cell_size: float = 0.25
    start: tuple | None = None  # (col, row)
    world_id: str = "world"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.int8)
        cells[0, :] = np.where(cells[0, :] == FREE, 0, cells[0, :])
        cells[-1, :] = np.where(cells[-1, :] == FREE, 0, cells[-1, :])
        cells[:, 0] = np.where(cells[:, 0] == FREE, 0, cells[:, 0])
        cells[:, -1] = np.where(cells[:, -1] == FREE, 0, cells[:, -1])
        if np.any((cells != FREE) & ((cells < 0) | (cells >= N_TEXTURES))):
            raise ValueError("texture ids must lie in [0, 8)")
        if not np.any(cells == FREE):
            raise ValueError("world has no free cell")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    def __eq__(self, other):
        return (
            isinstance(other, World)
            and np.array_equal(self.cells, other.cells)
            and self.cell_size == other.cell_size
            and self.start == other.start
            and self.world_id == other.world_id
        )

    __hash__ = object.__hash__

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def free(self) -> np.ndarray:
        f = self._cache.get("free")
        if f is None:
            f = self.cells == FREE
            self._cache["free"] = f
        return f

    def cell_of(self, x: float, y: float):
        return int(math.floor(x / self.cell_size)), int(math.floor(y / self.cell_size))

    def cell_center(self, col: int, row: int):
        return ((col + 0.5) * self.cell_size, (row + 0.5) * self.cell_size)

    def is_free_cell(self, col: int, row: int) -> bool:
        return 0 <= row < self.cells.shape[0] and 0 <= col < self.cells.shape[1] and bool(self.free[row, col])

    def is_free_point(self, x: float, y: float) -> bool:
        for sx in (-_EPS, _EPS):
            for sy in (-_EPS, _EPS):
                if not self.is_free_cell(*self.cell_of(x + sx, y + sy)):
                    return False
        return True

    def free_cells(self):
        rows, cols = np.nonzero(self.free)
        return list(zip(cols.tolist(), rows.tolist()))

    def start_cell(self):
        if self.start is not None:
            return self.start
        # Largest component, lowest (row, col) cell in it.
        labels, n = ndimage.label(self.free)
        sizes = ndimage.sum(self.free, labels, range(1, n + 1))
        best = int(np.argmax(sizes)) + 1
        rows, cols = np.nonzero(labels == best)
        return int(cols[0]), int(rows[0])

    def total_free_area(self) -> float:
        return float(self.free.sum()) * self.cell_size**2


# ------------------------------------------------------------------ text I/O


def load_world(text: str, world_id: str = "world", cell_size: float | None = None) -> World:
    """Parse an ASCII grid: ``.`` free, ``0``-``7`` textured wall, ``S`` start."""
    rows = []
    start = None
    size = 0.25
    lines = text.splitlines()
    k = 0
    while k < len(lines) and lines[k].startswith("#"):
        meta = lines[k][1:].strip()
        if meta.startswith("cell_size="):
            size = float(meta.split("=", 1)[1])
        elif meta.startswith("id="):
            world_id = meta.split("=", 1)[1]
        k += 1
    body = [ln for ln in lines[k:] if ln.strip() != ""]
    if not body:
        raise WorldParseError("empty grid")
    width = len(body[0])
    for r, line in enumerate(body):
        lineno = k + r + 1
        if len(line) != width:
            raise WorldParseError(f"line {lineno}: ragged row (width {len(line)}, expected {width})")
        row = []
        for c, ch in enumerate(line):
            if ch == ".":
                row.append(FREE)
            elif ch == "S":
                if start is not None:
                    raise WorldParseError(f"line {lineno}, column {c + 1}: second start marker")
                start = (c, r)
                row.append(FREE)
            elif ch in "01234567":
                row.append(int(ch))
            else:
                raise WorldParseError(f"line {lineno}, column {c + 1}: unknown character {ch!r}")
        rows.append(row)
    cells = np.array(rows, dtype=np.int8)
    if start is not None:
        c, r = start
        if r in (0, cells.shape[0] - 1) or c in (0, cells.shape[1] - 1):
            raise WorldParseError("start marker on the boundary")
    if cell_size is not None:
        size = cell_size
    return World(cells, size, start, world_id)


def dump_world(world: World, header=()) -> str:
    """ASCII grid with ``# key=value`` comment lines; ``header`` adds more of them."""
    lines = [f"# id={world.world_id}", f"# cell_size={world.cell_size!r}"]
    lines += [f"# {h}" for h in header]
    for r in range(world.rows):
        chars = []
        for c in range(world.cols):
            v = world.cells[r, c]
            if v == FREE:
                chars.append("S" if world.start == (c, r) else ".")
            else:
                chars.append(str(int(v)))
        lines.append("".join(chars))
    return "\n".join(lines) + "\n"


def save_world(world: World, path, header=()):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_world(world, header))


def read_world(path, world_id: str | None = None) -> World:
    with open(path, encoding="utf-8") as fh:
        return load_world(fh.read(), world_id=world_id or "world")


# ---------------------------------------------------------------- kinematics


def _segment_hits_wall(world: World, x0, y0, x1, y1) -> bool:
    # Scalar twin of segments_blocked for the single short segments of a move.
    cs = world.cell_size
    ts = [0.0, 1.0]
    for a0, a1 in ((x0, x1), (y0, y1)):
        da = a1 - a0
        if da == 0.0:
            continue
        k0, k1 = math.floor(a0 / cs), math.floor(a1 / cs)
        lo, hi = (k0 + 1, k1) if da > 0 else (k1 + 1, k0)
        for k in range(lo, hi + 1):
            t = (k * cs - a0) / da
            if 0.0 < t < 1.0:
                ts.append(t)
    ts.sort()
    free = world.free
    for ta, tb in zip(ts[:-1], ts[1:]):
        if tb - ta <= 1e-12:
            continue
        tm = 0.5 * (ta + tb)
        c = math.floor((x0 + tm * (x1 - x0)) / cs)
        r = math.floor((y0 + tm * (y1 - y0)) / cs)
        if not (0 <= r < world.rows and 0 <= c < world.cols) or not free[r, c]:
            return True
    return False


def _try_move(world, x, y, dx, dy):
    if abs(dx) < 1e-12 and abs(dy) < 1e-12:
        return None
    nx_, ny_ = x + dx, y + dy
    if not world.is_free_point(nx_, ny_):
        return None
    if _segment_hits_wall(world, x, y, nx_, ny_):
        return None
    return nx_, ny_


def step_pose(world: World, pose: Pose, action: int, loco: Locomotion) -> Pose:
    """Apply one action; blocked forward moves slide along the x then y axis."""
    if action == LEFT:
        return Pose(pose.x, pose.y, (pose.heading + loco.turn_angle) % 360)
    if action == RIGHT:
        return Pose(pose.x, pose.y, (pose.heading - loco.turn_angle) % 360)
    if action == STOP:
        return pose
    if action != FORWARD:
        raise ValueError(f"unknown action {action}")
    rad = math.radians(pose.heading)
    dx = loco.step_size * math.cos(rad)
    dy = loco.step_size * math.sin(rad)
    for mx, my in ((dx, dy), (dx, 0.0), (0.0, dy)):
        moved = _try_move(world, pose.x, pose.y, mx, my)
        if moved is not None:
            return Pose(moved[0], moved[1], pose.heading)
    return pose


# ---------------------------------------------------------------- ray casting

_BEARINGS = np.radians(np.arange(N_RAYS) * RAY_SPACING)
_COS = np.cos(_BEARINGS)
_SIN = np.sin(_BEARINGS)


def raycast_observe(world: World, x: float, y: float, heading: int = 0) -> Observation:
    """Cast 72 world-aligned rays by grid traversal (Amanatides-Woo)."""
    cs = world.cell_size
    n = N_RAYS
    ix = np.full(n, int(math.floor(x / cs)))
    iy = np.full(n, int(math.floor(y / cs)))
    step_x = np.where(_COS > 0, 1, -1)
    step_y = np.where(_SIN > 0, 1, -1)
    with np.errstate(divide="ignore"):
        inv_x = np.where(_COS != 0, 1.0 / np.abs(_COS), np.inf)
        inv_y = np.where(_SIN != 0, 1.0 / np.abs(_SIN), np.inf)
    next_bx = np.where(step_x > 0, (ix + 1) * cs, ix * cs)
    next_by = np.where(step_y > 0, (iy + 1) * cs, iy * cs)
    t_max_x = np.where(np.isfinite(inv_x), np.abs(next_bx - x) * np.where(np.isfinite(inv_x), inv_x, 0), np.inf)
    t_max_y = np.where(np.isfinite(inv_y), np.abs(next_by - y) * np.where(np.isfinite(inv_y), inv_y, 0), np.inf)
    t_delta_x = cs * inv_x
    t_delta_y = cs * inv_y
    depths = np.full(n, MAX_RANGE)
    textures = np.full(n, MISS_TEXTURE, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    cells = world.cells
    while active.any():
        use_x = t_max_x <= t_max_y
        t_entry = np.where(use_x, t_max_x, t_max_y)
        ix = np.where(active & use_x, ix + step_x, ix)
        iy = np.where(active & ~use_x, iy + step_y, iy)
        t_max_x = np.where(active & use_x, t_max_x + t_delta_x, t_max_x)
        t_max_y = np.where(active & ~use_x, t_max_y + t_delta_y, t_max_y)
        out_range = active & (t_entry >= MAX_RANGE)
        active &= ~out_range
        rows = np.clip(iy, 0, world.rows - 1)
        cols = np.clip(ix, 0, world.cols - 1)
        hit_tex = cells[rows, cols]
        hit = active & (hit_tex != FREE)
        depths[hit] = t_entry[hit]
        textures[hit] = hit_tex[hit]
        active &= ~hit
    depths = np.minimum(depths, MAX_RANGE)
    depths.setflags(write=False)
    textures.setflags(write=False)
    return Observation(depths, textures, int(heading) % 360)


def observe(world: World, pose: Pose) -> Observation:
    return raycast_observe(world, pose.x, pose.y, pose.heading)


# ------------------------------------------------------------------ coverage


class CoverageTracker:
    """Covered free cells: centre within 3.2 m and in unobstructed line of sight."""

    def __init__(self, world: World, radius: float = COVERAGE_RADIUS):
        self.world = world
        self.radius = radius
        self.covered = np.zeros_like(world.free)
        self.total_free_area = world.total_free_area()
        self.curve: list[float] = []
        self._area = 0.0
        self._last = None

    @property
    def covered_area(self) -> float:
        return self._area

    def ratio(self) -> float:
        return self._area / self.total_free_area

    def update(self, x: float, y: float) -> float:
        gain = 0.0
        if self._last != (x, y):
            newly = visible_cells(self.world, x, y, self.radius) & ~self.covered
            n_new = int(newly.sum())
            if n_new:
                self.covered |= newly
                gain = n_new * self.world.cell_size**2
                self._area += gain
            self._last = (x, y)
        self.curve.append(self._area)
        return gain


def coverage_update(tracker: CoverageTracker, position, world: World | None = None) -> float:
    return tracker.update(*position)


def segments_blocked(world: World, p0, p1) -> np.ndarray:
    """True where the open segment p0 -> p1 passes through the interior of a wall cell.

    The segment is cut at every grid-line crossing; the midpoint of each
    piece identifies one traversed cell exactly.  Pieces of zero length
    (grazing a cell corner) are ignored.
    """
    cs = world.cell_size
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    d = p1 - p0
    span = int(math.ceil(np.abs(d).max() / cs)) + 2 if d.size else 2
    k = np.arange(1, span + 1)
    ts = [np.zeros((len(p0), 1)), np.ones((len(p0), 1))]
    for axis in (0, 1):
        step = np.where(d[:, axis] > 0, 1, -1)[:, None]
        base = np.floor(p0[:, axis] / cs)[:, None] + (step > 0)
        lines = (base + step * (k[None, :] - 1)) * cs
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (lines - p0[:, axis : axis + 1]) / d[:, axis : axis + 1]
        t = np.where(np.isfinite(t) & (t > 0) & (t < 1), t, 1.0)
        ts.append(t)
    t = np.sort(np.concatenate(ts, axis=1), axis=1)
    mid = 0.5 * (t[:, :-1] + t[:, 1:])
    piece = (t[:, 1:] - t[:, :-1]) > 1e-12
    px = p0[:, 0:1] + mid * d[:, 0:1]
    py = p0[:, 1:2] + mid * d[:, 1:2]
    cols = np.clip(np.floor(px / cs).astype(np.int64), 0, world.cols - 1)
    rows = np.clip(np.floor(py / cs).astype(np.int64), 0, world.rows - 1)
    wall = ~world.free[rows, cols]
    return np.any(wall & piece, axis=1)


def visible_cells(world: World, x: float, y: float, radius: float = COVERAGE_RADIUS) -> np.ndarray:
    cs = world.cell_size
    span = int(math.ceil(radius / cs)) + 1
    c0, r0 = world.cell_of(x, y)
    c_lo, c_hi = max(c0 - span, 0), min(c0 + span, world.cols - 1)
    r_lo, r_hi = max(r0 - span, 0), min(r0 + span, world.rows - 1)
    block = world.cells[r_lo : r_hi + 1, c_lo : c_hi + 1]
    rr, cc = np.nonzero(block == FREE)
    centers = np.stack([(cc + c_lo + 0.5) * cs, (rr + r_lo + 0.5) * cs], axis=1)
    close = np.hypot(centers[:, 0] - x, centers[:, 1] - y) < radius
    rr, cc, centers = rr[close], cc[close], centers[close]
    out = np.zeros_like(world.free)
    if centers.shape[0] == 0:
        return out
    origin = np.repeat(np.array([[x, y]]), centers.shape[0], axis=0)
    vis = ~segments_blocked(world, origin, centers)
    out[rr[vis] + r_lo, cc[vis] + c_lo] = True
    return out


# ------------------------------------------------------------------ geodesics


def bfs_cells(world: World, start_cell) -> np.ndarray:
    """4-connected BFS hop counts from ``start_cell`` (col, row); -1 if unreachable."""
    key = ("bfs", tuple(start_cell))
    cached = world._cache.get(key)
    if cached is not None:
        return cached
    free = world.free
    dist = np.full(free.shape, -1, dtype=np.int64)
    c, r = start_cell
    if not free[r, c]:
        raise ValueError(f"cell {start_cell} is not free")
    dist[r, c] = 0
    queue = deque([(r, c)])
    rows, cols = free.shape
    while queue:
        r, c = queue.popleft()
        d = dist[r, c] + 1
        for nr, nc in ((r, c + 1), (r, c - 1), (r + 1, c), (r - 1, c)):
            if 0 <= nr < rows and 0 <= nc < cols and free[nr, nc] and dist[nr, nc] < 0:
                dist[nr, nc] = d
                queue.append((nr, nc))
    dist.setflags(write=False)
    world._cache[key] = dist
    return dist


def geodesic_distance(world: World, a, b) -> float:
    """Shortest 4-connected path length in metres between the cells of two points.

    Returns ``math.inf`` when ``b`` is unreachable from ``a``.
    """
    ca = world.cell_of(*a)
    cb = world.cell_of(*b)
    if ca == cb:
        return 0.0
    hops = bfs_cells(world, ca)[cb[1], cb[0]]
    return math.inf if hops < 0 else float(hops) * world.cell_size


def reachable_mask(world: World, cell) -> np.ndarray:
    return bfs_cells(world, cell) >= 0


# ------------------------------------------------------------ world generator


def generate_world(
    seed: int,
    size=(64, 64),
    cell_size: float = 0.25,
    min_room: int = 14,
    door=(4, 7),
    furniture: int = 2,
    world_id: str | None = None,
) -> World:
    """Rooms separated by doored walls (binary space partition), plus furniture blocks."""
    rng = np.random.default_rng(seed)
    rows, cols = size
    wall = np.zeros((rows, cols), dtype=bool)
    wall[0, :] = wall[-1, :] = wall[:, 0] = wall[:, -1] = True
    leaves = []

    def split(r0, c0, r1, c1):
        h, w = r1 - r0 + 1, c1 - c0 + 1
        can_h = h >= 2 * min_room + 1
        can_w = w >= 2 * min_room + 1
        if not (can_h or can_w):
            leaves.append((r0, c0, r1, c1))
            return
        horizontal = can_h and (not can_w or h > w or (h == w and rng.random() < 0.5))
        if horizontal:
            line = int(rng.integers(r0 + min_room, r1 - min_room + 1))
            wall[line, c0 : c1 + 1] = True
            dw = int(rng.integers(door[0], door[1] + 1))
            start = int(rng.integers(c0, max(c0, c1 - dw + 1) + 1))
            wall[line, start : start + dw] = False
            split(r0, c0, line - 1, c1)
            split(line + 1, c0, r1, c1)
        else:
            line = int(rng.integers(c0 + min_room, c1 - min_room + 1))
            wall[r0 : r1 + 1, line] = True
            dw = int(rng.integers(door[0], door[1] + 1))
            start = int(rng.integers(r0, max(r0, r1 - dw + 1) + 1))
            wall[start : start + dw, line] = False
            split(r0, c0, r1, line - 1)
            split(r0, line + 1, r1, c1)

    split(1, 1, rows - 2, cols - 2)
    for r0, c0, r1, c1 in leaves:
        for _ in range(furniture):
            fh = int(rng.integers(2, 5))
            fw = int(rng.integers(2, 5))
            if r1 - r0 - fh < 6 or c1 - c0 - fw < 6:
                continue
            fr = int(rng.integers(r0 + 3, r1 - fh - 2 + 1))
            fc = int(rng.integers(c0 + 3, c1 - fw - 2 + 1))
            trial = wall.copy()
            trial[fr : fr + fh, fc : fc + fw] = True
            labels, n = ndimage.label(~trial)
            if n == 1:
                wall = trial
    labels, n = ndimage.label(~wall)
    if n > 1:
        sizes = ndimage.sum(~wall, labels, range(1, n + 1))
        keep = int(np.argmax(sizes)) + 1
        wall |= labels != keep
    cells = np.full((rows, cols), FREE, dtype=np.int8)
    cells[wall] = paint_textures(wall, rng)[wall]
    free_r, free_c = np.nonzero(~wall)
    k = int(rng.integers(len(free_r)))
    return World(cells, cell_size, (int(free_c[k]), int(free_r[k])), world_id or f"gen{seed}")


def loop_corridor(cols: int = 48, rows: int = 32, width: int = 4, seed: int = 0, cell_size: float = 0.25) -> World:
    """A rectangular ring corridor ``width`` cells wide around one solid block.

    Any agent that keeps moving along it must come back to where it began,
    which makes it the standard fixture for loop closing.
    """
    if min(cols, rows) < 2 * width + 3:
        raise ValueError("ring too small for its corridor width")
    wall = np.ones((rows, cols), dtype=bool)
    wall[1:-1, 1:-1] = False
    wall[1 + width : -1 - width, 1 + width : -1 - width] = True
    cells = np.full((rows, cols), FREE, dtype=np.int8)
    cells[wall] = paint_textures(wall, np.random.default_rng(seed))[wall]
    return World(cells, cell_size, (1 + width // 2, 1 + width // 2), f"loop-corridor{seed}")


def paint_textures(wall: np.ndarray, rng, tile: int = 6) -> np.ndarray:
    """One random texture per contiguous wall run inside each tile x tile block."""
    labels, n = ndimage.label(wall)
    rows, cols = wall.shape
    tr = np.arange(rows)[:, None] // tile
    tc = np.arange(cols)[None, :] // tile
    key = (labels.astype(np.int64) * 10_000 + tr * 100 + tc)[wall]
    uniq, inv = np.unique(key, return_inverse=True)
    tex = rng.integers(0, N_TEXTURES, size=uniq.size)
    out = np.full(wall.shape, FREE, dtype=np.int8)
    out[wall] = tex[inv]
    return out


# ------------------------------------------------------------ trajectory CSV


def write_trajectory_rows(fh, poses, actions, coverage):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["step", "x", "y", "heading", "action", "coverage_m2"])
    for k, (p, a, cov) in enumerate(zip(poses, actions, coverage)):
        w.writerow([k, repr(p.x), repr(p.y), p.heading, ACTION_NAMES[a], repr(cov)])


def read_trajectory_rows(lines):
    poses, actions, coverage = [], [], []
    for row in csv.DictReader(lines):
        poses.append(Pose(float(row["x"]), float(row["y"]), int(row["heading"])))
        actions.append(ACTION_NAMES.index(row["action"]))
        coverage.append(float(row["coverage_m2"]))
    return poses, actions, coverage


def write_trajectory_csv(path, poses, actions, coverage):
    with open(path, "w", newline="") as fh:
        write_trajectory_rows(fh, poses, actions, coverage)


def read_trajectory_csv(path):
    with open(path, newline="") as fh:
        return read_trajectory_rows(fh)
