"""Exploration episodes: learned explorer and random-walk baseline.

Both agents start from the same seeded pose, so episodes with equal
(world, seed) form matched pairs.  Every recorded step k stores the pose and
observation *before* action k and the covered area *after* it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import models
from .gridworld import (
    FORWARD,
    LEFT,
    RIGHT,
    CoverageTracker,
    Locomotion,
    Observation,
    Pose,
    World,
    bfs_cells,
    raycast_observe,
    read_trajectory_rows,
    step_pose,
    write_trajectory_rows,
)


@dataclass
class EpisodeLog:
    seed: int
    world_id: str
    locomotion: Locomotion
    mode: str
    poses: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    coverage: list = field(default_factory=list)
    total_free_area: float = 1.0
    final_pose: Pose | None = None

    def __len__(self):
        return len(self.actions)

    @property
    def final_ratio(self) -> float:
        return self.coverage[-1] / self.total_free_area if self.coverage else 0.0


class _Sensor:
    """Observation cache keyed by position; turning does not re-cast rays."""

    def __init__(self, world: World):
        self.world = world
        self._cache = {}

    def __call__(self, pose: Pose) -> Observation:
        key = (pose.x, pose.y)
        scan = self._cache.get(key)
        if scan is None:
            scan = raycast_observe(self.world, pose.x, pose.y, 0)
            self._cache[key] = scan
        return Observation(scan.depths, scan.textures, pose.heading)


def episode_start(world: World, seed: int, loco: Locomotion | None = None) -> Pose:
    """Seeded start pose: a random cell of the start component, random heading."""
    loco = loco or Locomotion()
    rng = np.random.default_rng([seed, 1])
    reach = np.argwhere(bfs_cells(world, world.start_cell()) >= 0)
    r, c = reach[int(rng.integers(len(reach)))]
    x, y = world.cell_center(int(c), int(r))
    heading = int(rng.integers(360 // loco.turn_angle)) * loco.turn_angle
    return Pose(x, y, heading)


class _Episode:
    def __init__(self, world, seed, loco, mode, start):
        self.world = world
        self.loco = loco or Locomotion()
        self.rng = np.random.default_rng([seed, 2])
        self.sense = _Sensor(world)
        self.pose = start if start is not None else episode_start(world, seed, self.loco)
        self.tracker = CoverageTracker(world)
        self.tracker.update(self.pose.x, self.pose.y)
        self.log = EpisodeLog(seed, world.world_id, self.loco, mode, total_free_area=self.tracker.total_free_area)
        self.obs = self.sense(self.pose)

    def act(self, action: int) -> Pose:
        log = self.log
        log.poses.append(self.pose)
        log.observations.append(self.obs)
        log.actions.append(action)
        prev = self.pose
        self.pose = step_pose(self.world, self.pose, action, self.loco)
        self.tracker.update(self.pose.x, self.pose.y)
        log.coverage.append(self.tracker.covered_area)
        log.final_pose = self.pose
        self.obs = self.sense(self.pose)
        return prev

    def random_turn(self) -> int:
        return LEFT if self.rng.random() < 0.5 else RIGHT


def bootstrap(world: World, start: Pose | None = None, m: int = 10, seed: int = 0, loco=None, _ep=None):
    """Move forward, turning once (seeded coin) right after any blocked forward."""
    ep = _ep or _Episode(world, seed, loco, "bootstrap", start)
    blocked = False
    for _ in range(m):
        if blocked:
            ep.act(ep.random_turn())
            blocked = False
        else:
            prev = ep.act(FORWARD)
            moved = math.hypot(ep.pose.x - prev.x, ep.pose.y - prev.y)
            blocked = moved < ep.loco.step_size - 1e-9
    return ep.log if _ep is None else ep


def run_exploration(
    world: World,
    bundle: models.ModelBundle,
    budget: int = 1000,
    seed: int = 0,
    loco: Locomotion | None = None,
    start: Pose | None = None,
) -> EpisodeLog:
    m = bundle.m
    if budget <= m:
        raise ValueError(f"budget must exceed the {m} bootstrap steps")
    ep = _Episode(world, seed, loco, bundle.mode.value, start)
    bootstrap(world, m=m, _ep=ep)
    feats = [models.encode_observation(bundle, o) for o in ep.log.observations]
    feats.append(models.encode_observation(bundle, ep.obs))
    window = m + 1
    while len(ep.log.actions) < budget:
        arr = np.asarray(feats)
        history = None
        if bundle.mode is models.Mode.WITH_HISTORY and len(arr) > window:
            history = models.sample_history(arr[:-window])
        logits = models.policy_logits(bundle, arr[-window:], history)
        action = models.argmax_action(logits)
        if action == FORWARD and ep.obs.forward_depth() < 2 * ep.loco.step_size:
            action = ep.random_turn()
        ep.act(action)
        feats.append(models.encode_observation(bundle, ep.obs))
    return ep.log


def run_random_walk(
    world: World, budget: int = 1000, seed: int = 0, loco: Locomotion | None = None, start: Pose | None = None
) -> EpisodeLog:
    if budget < 1:
        raise ValueError("budget must be positive")
    ep = _Episode(world, seed, loco, "random-walk", start)
    draws = ep.rng.integers(3, size=budget)
    for a in draws:
        ep.act(int(a))
    return ep.log


def replay_actions(
    world: World, start: Pose, actions, loco: Locomotion | None = None, seed: int = 0, mode: str = "scripted"
) -> EpisodeLog:
    """Log a fixed action sequence exactly as an agent's episode would be logged."""
    ep = _Episode(world, seed, loco, mode, start)
    for a in actions:
        ep.act(int(a))
    return ep.log


def reobserve(world: World, log: EpisodeLog) -> EpisodeLog:
    """Fill in observations of a log read back from disk."""
    sense = _Sensor(world)
    log.observations = [sense(p) for p in log.poses]
    return log


# ----------------------------------------------------------------------- I/O


def save_episode(log: EpisodeLog, path, extra: dict | None = None):
    """Header comments, then the trajectory CSV (coverage is its last column)."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={log.seed}\n# world_id={log.world_id}\n")
        fh.write(f"# locomotion={log.locomotion}\n# mode={log.mode}\n")
        fh.write(f"# total_free_area={log.total_free_area!r}\n")
        if log.final_pose is not None:
            fp = log.final_pose
            fh.write(f"# final_pose={fp.x!r},{fp.y!r},{fp.heading}\n")
        for k, v in (extra or {}).items():
            fh.write(f"# {k}={v}\n")
        write_trajectory_rows(fh, log.poses, log.actions, log.coverage)


def load_episode(path, world: World | None = None) -> EpisodeLog:
    meta, body = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("# "):
                k, v = line[2:].rstrip("\n").split("=", 1)
                meta[k] = v
            else:
                body.append(line)
    poses, actions, coverage = read_trajectory_rows(body)
    log = EpisodeLog(
        int(meta["seed"]),
        meta["world_id"],
        Locomotion.parse(meta["locomotion"]),
        meta["mode"],
        poses,
        actions,
        [],
        coverage,
        float(meta["total_free_area"]),
    )
    if "final_pose" in meta:
        x, y, h = meta["final_pose"].split(",")
        log.final_pose = Pose(float(x), float(y), int(h))
    if world is not None:
        reobserve(world, log)
    return log


__all__ = [
    "EpisodeLog",
    "episode_start",
    "bootstrap",
    "run_exploration",
    "run_random_walk",
    "replay_actions",
    "reobserve",
    "save_episode",
    "load_episode",
]
