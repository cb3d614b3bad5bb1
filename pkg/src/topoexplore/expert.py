"""Expert exploration demonstrations.

Anchors are sampled over the navigable space, then the expert repeatedly
walks to the geodesically closest unvisited anchor with a minimum-length
action sequence, recording the panorama seen before every action.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .gridworld import (
    ACTION_NAMES,
    FORWARD,
    LEFT,
    N_RAYS,
    RIGHT,
    Locomotion,
    Observation,
    Pose,
    World,
    bfs_cells,
    observe,
    step_pose,
)


class NoPathError(RuntimeError):
    pass


@dataclass
class AnchorSet:
    positions: list
    spacing: float

    def __len__(self):
        return len(self.positions)


@dataclass
class Demonstration:
    """Observation k is seen before action k; the last observation has no action."""

    start_pose: Pose
    actions: list
    observations: list
    world_id: str = "world"
    seed: int = 0
    locomotion: Locomotion = field(default_factory=Locomotion)
    poses: list = field(default_factory=list)  # debug only
    anchor_order: list = field(default_factory=list)  # debug only

    def __len__(self):
        return len(self.observations)

    @property
    def transitions(self) -> int:
        return len(self.actions)


# ------------------------------------------------------------------- anchors


def sample_anchors(world: World, spacing: float = 1.5, seed: int = 0) -> AnchorSet:
    """Jittered grid candidates in the start component, greedily merged.

    Two anchors are never closer than ``spacing / 2`` in geodesic distance.
    """
    free_cells = world.free_cells()
    if not free_cells:
        raise ValueError("world has no free space")
    rng = np.random.default_rng(seed)
    start = world.start_cell()
    reach = bfs_cells(world, start) >= 0
    cs = world.cell_size
    width, height = world.cols * cs, world.rows * cs
    xs = np.arange(spacing / 2, width, spacing)
    ys = np.arange(spacing / 2, height, spacing)
    candidates = []
    for y in ys:
        for x in xs:
            jx, jy = rng.uniform(-spacing / 4, spacing / 4, size=2)
            px, py = float(x + jx), float(y + jy)
            c, r = world.cell_of(px, py)
            if 0 <= r < world.rows and 0 <= c < world.cols and reach[r, c]:
                candidates.append((px, py))
    merge = spacing / 2
    accepted, cells = [], []
    for p in candidates:
        cell = world.cell_of(*p)
        dmap = bfs_cells(world, cell)
        if all(dmap[r, c] * cs >= merge for c, r in cells):
            accepted.append(p)
            cells.append(cell)
    if not accepted:
        accepted.append(world.cell_center(*start))
    return AnchorSet(accepted, spacing)


# ------------------------------------------------------------------ planning


def plan_to_cell(world: World, start: Pose, target, loco: Locomotion, max_states: int = 2_000_000):
    """Minimum-length action sequence that brings the agent into the cell of ``target``.

    Breadth-first search over (cell, heading) states.  Each state keeps the
    exact continuous pose it was first reached with, so the returned actions
    replay exactly.  Successors are tried forward, left, right; actions
    that leave the pose unchanged are skipped.
    """
    goal = world.cell_of(*target)
    here = world.cell_of(start.x, start.y)
    if here == goal:
        return []
    if bfs_cells(world, goal)[here[::-1]] < 0:
        raise NoPathError(f"cell {goal} unreachable")

    def key(p: Pose):
        return world.cell_of(p.x, p.y), p.heading

    parent = {key(start): None}
    queue = deque([start])
    while queue and len(parent) < max_states:
        pose = queue.popleft()
        pk = key(pose)
        for a in (FORWARD, LEFT, RIGHT):
            nxt = step_pose(world, pose, a, loco)
            nk = key(nxt)
            if nxt == pose or nk in parent:
                continue
            parent[nk] = (pk, a)
            if nk[0] == goal:
                actions = []
                while parent[nk] is not None:
                    nk, a = parent[nk]
                    actions.append(a)
                return actions[::-1]
            queue.append(nxt)
    raise NoPathError(f"no action path to cell {goal}")


# ------------------------------------------------------------- demonstrations


def generate_demonstration(
    world: World, anchors: AnchorSet, seed: int = 0, loco: Locomotion | None = None
) -> Demonstration:
    loco = loco or Locomotion()
    if len(anchors) == 0:
        raise ValueError("at least one anchor required")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(len(anchors)))
    heading = int(rng.integers(360 // loco.turn_angle)) * loco.turn_angle
    sx, sy = world.cell_center(*world.cell_of(*anchors.positions[first]))
    pose = Pose(sx, sy, heading)
    start = pose
    anchor_cells = [world.cell_of(*p) for p in anchors.positions]
    visited = {first}
    order = [anchors.positions[first]]
    observations = [observe(world, pose)]
    poses = [pose]
    actions = []
    cs = world.cell_size
    while len(visited) < len(anchors):
        dmap = bfs_cells(world, world.cell_of(pose.x, pose.y))
        best, best_d = None, math.inf
        for k, (c, r) in enumerate(anchor_cells):
            if k in visited:
                continue
            d = dmap[r, c]
            d = math.inf if d < 0 else d * cs
            if d < best_d:
                best, best_d = k, d
        if best is None:
            raise NoPathError("remaining anchors unreachable")
        for a in plan_to_cell(world, pose, anchors.positions[best], loco):
            pose = step_pose(world, pose, a, loco)
            actions.append(a)
            observations.append(observe(world, pose))
            poses.append(pose)
        visited.add(best)
        order.append(anchors.positions[best])
    return Demonstration(start, actions, observations, world.world_id, seed, loco, poses, order)


def replay(world: World, demo: Demonstration):
    """Re-execute a demonstration; returns (observations, poses)."""
    pose = demo.start_pose
    obs = [observe(world, pose)]
    poses = [pose]
    for a in demo.actions:
        pose = step_pose(world, pose, a, demo.locomotion)
        obs.append(observe(world, pose))
        poses.append(pose)
    return obs, poses


# ----------------------------------------------------------------------- I/O


def save_demonstration(demo: Demonstration, path, extra: dict | None = None):
    sp = demo.start_pose
    lines = [
        "# topoexplore-demo v1",
        f"# world_id={demo.world_id}",
        f"# seed={demo.seed}",
        f"# locomotion={demo.locomotion}",
        f"# start={sp.x!r},{sp.y!r},{sp.heading}",
    ]
    lines += [f"# {k}={v}" for k, v in (extra or {}).items()]
    lines.append("step,action")
    for k in range(len(demo.observations)):
        a = ACTION_NAMES[demo.actions[k]] if k < len(demo.actions) else ""
        lines.append(f"{k},{a}")
    lines.append("observations")
    for k, o in enumerate(demo.observations):
        vals = " ".join("%.17g" % d for d in o.depths)
        tex = " ".join(str(int(t)) for t in o.textures)
        lines.append(f"{k} {o.heading} {vals} {tex}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_demonstration(path) -> Demonstration:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "# topoexplore-demo v1":
        raise ValueError(f"{path}: not a demonstration file")
    meta = {}
    k = 1
    while lines[k].startswith("# "):
        key, val = lines[k][2:].split("=", 1)
        meta[key] = val
        k += 1
    k += 1  # csv header
    actions = []
    while lines[k] != "observations":
        name = lines[k].split(",", 1)[1]
        if name:
            actions.append(ACTION_NAMES.index(name))
        k += 1
    observations = []
    for line in lines[k + 1 :]:
        parts = line.split()
        heading = int(parts[1])
        depths = np.array([float(v) for v in parts[2 : 2 + N_RAYS]])
        tex = np.array([int(v) for v in parts[2 + N_RAYS : 2 + 2 * N_RAYS]], dtype=np.int64)
        depths.setflags(write=False)
        tex.setflags(write=False)
        observations.append(Observation(depths, tex, heading))
    x, y, hd = meta["start"].split(",")
    return Demonstration(
        Pose(float(x), float(y), int(hd)),
        actions,
        observations,
        meta["world_id"],
        int(meta["seed"]),
        Locomotion.parse(meta["locomotion"]),
    )


def demo_lower_bound(world: World, demo_anchor_order, loco: Locomotion) -> float:
    """Sum over consecutive anchors of geodesic distance / step size."""
    total = 0.0
    for a, b in zip(demo_anchor_order[:-1], demo_anchor_order[1:]):
        dmap = bfs_cells(world, world.cell_of(*a))
        c, r = world.cell_of(*b)
        total += dmap[r, c] * world.cell_size / loco.step_size
    return total


__all__ = [
    "AnchorSet",
    "Demonstration",
    "NoPathError",
    "sample_anchors",
    "plan_to_cell",
    "generate_demonstration",
    "replay",
    "save_demonstration",
    "load_demonstration",
    "demo_lower_bound",
]
