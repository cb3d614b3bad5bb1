"""Image-goal navigation over a completed topological map.

Execution is open loop.  The agent tracks its compass heading (world-aligned
panoramas imply one) by counting its own turns; after a loop edge it turns on
the spot to the heading the destination node was recorded with, so the
chain's stored actions replay from the right orientation.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import vpr
from .gridworld import FORWARD, LEFT, RIGHT, STOP, Locomotion, Pose, World, bfs_cells, step_pose
from .topomap import LOOP, TEMPORAL, TopoGraph


class NoRouteError(RuntimeError):
    pass


@dataclass(frozen=True)
class RouteStep:
    src: int
    dst: int
    kind: str
    reverse: bool
    actions: tuple


def localize(graph: TopoGraph, obs, centroids=None) -> int:
    """Node whose VLAD is nearest to that of ``obs`` (ties by lower id)."""
    if len(graph) == 0:
        raise vpr.StructureError("empty graph")
    c = graph.centroids if centroids is None else centroids
    q = vpr.observation_vlad(obs, c)
    return graph.tree().query(q, 1)[0][0]


def _adjacency(graph: TopoGraph, uniform: bool = False):
    adj = {n.id: [] for n in graph.nodes}
    for e in graph.edges.values():
        w = 1 if uniform else max(1, len(e.actions))
        adj[e.src].append((e.dst, w, RouteStep(e.src, e.dst, e.kind, False, tuple(e.actions))))
        if e.kind == TEMPORAL:
            adj[e.dst].append((e.src, w, RouteStep(e.dst, e.src, e.kind, True, tuple(e.actions))))
    for lst in adj.values():
        lst.sort(key=lambda t: (t[0], t[2].reverse))
    return adj


def plan_route(graph: TopoGraph, src: int, dst: int, uniform: bool = False):
    """Dijkstra over the map; returns (route steps, total weight)."""
    if src == dst:
        return [], 0
    adj = _adjacency(graph, uniform)
    dist = {src: 0}
    back = {}
    heap = [(0, src)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == dst:
            break
        for v, w, step in adj[u]:
            nd = d + w
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                back[v] = step
                heapq.heappush(heap, (nd, v))
    if dst not in done:
        raise NoRouteError(f"node {dst} unreachable from {src}")
    route = []
    v = dst
    while v != src:
        route.append(back[v])
        v = back[v].src
    return route[::-1], dist[dst]


def route_weight(route, uniform: bool = False) -> int:
    return sum(1 if uniform else max(1, len(s.actions)) for s in route)


def _turns_to(current: int, target: int, loco: Locomotion):
    delta = (target - current) % 360
    n_left = delta // loco.turn_angle
    n_right = ((360 - delta) % 360) // loco.turn_angle
    return [LEFT] * n_left if n_left <= n_right else [RIGHT] * n_right


def route_actions(graph: TopoGraph, route, start_heading: int | None = None) -> list:
    """Flatten a route into executable actions.

    The agent first turns to the start node's heading.  Reverse temporal
    steps invert turns; a reverse forward becomes turn-around, forward,
    turn-around.  After a loop edge the agent turns in place to the
    destination node's recorded heading.
    """
    loco = graph.locomotion
    half = [LEFT] * (180 // loco.turn_angle)
    out = []
    if not route:
        return out
    heading = graph.nodes[route[0].src].heading if start_heading is None else start_heading

    def emit(acts):
        nonlocal heading
        for a in acts:
            if a == LEFT:
                heading = (heading + loco.turn_angle) % 360
            elif a == RIGHT:
                heading = (heading - loco.turn_angle) % 360
            out.append(a)

    emit(_turns_to(heading, graph.nodes[route[0].src].heading, loco))
    for step in route:
        if step.kind == TEMPORAL and not step.reverse:
            emit(step.actions)
        elif step.kind == TEMPORAL:
            for a in reversed(step.actions):
                if a == LEFT:
                    emit([RIGHT])
                elif a == RIGHT:
                    emit([LEFT])
                elif a == FORWARD:
                    emit(half + [FORWARD] + half)
        else:
            emit([a for a in step.actions if a != STOP])
            emit(_turns_to(heading, graph.nodes[step.dst].heading, loco))
    return out


@dataclass
class Trace:
    poses: list
    actions: list
    path_length: float

    @property
    def terminal(self) -> Pose:
        return self.poses[-1]


def execute_route(world: World, start: Pose, route, graph: TopoGraph) -> Trace:
    # the compass reading is the only part of the true pose the agent uses
    actions = route_actions(graph, route, start.heading)
    pose = start
    poses = [pose]
    length = 0.0
    for a in actions:
        nxt = step_pose(world, pose, a, graph.locomotion)
        length += math.hypot(nxt.x - pose.x, nxt.y - pose.y)
        pose = nxt
        poses.append(pose)
    return Trace(poses, actions, length)


# ----------------------------------------------------------------- evaluation


@dataclass
class NavResult:
    success_rate: float
    spl: float
    episodes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {"success_rate": self.success_rate, "spl": self.spl, "episodes": self.episodes}, sort_keys=True
        )


def spl(successes, shortest, taken) -> float:
    s = np.asarray(successes, dtype=float)
    l = np.asarray(shortest, dtype=float)
    p = np.asarray(taken, dtype=float)
    if s.size == 0:
        return 0.0
    return float(np.mean(s * l / np.maximum(p, l)))


def evaluate_navigation(
    world: World,
    graph: TopoGraph,
    n_episodes: int = 50,
    seed: int = 0,
    node_poses=None,
    localization: str = "vpr",
    success_radius: float = 0.5,
    min_geodesic: float = 2.0,
    uniform: bool = False,
) -> NavResult:
    """Start/goal pairs are drawn among map nodes; ``node_poses`` are their true poses.

    True poses serve only the harness: placing the agent, scoring the
    terminal position and measuring geodesics.  With ``localization="exact"``
    start and goal nodes are known (self-retrieval); otherwise they are
    found by VPR from the node observations.
    """
    if node_poses is None:
        raise ValueError("true node poses are required to score episodes")
    rng = np.random.default_rng([seed, 3])
    cs = world.cell_size
    episodes = []
    attempts = 0
    while len(episodes) < n_episodes:
        attempts += 1
        if attempts > 1000 * n_episodes:
            raise RuntimeError("could not sample enough start/goal pairs")
        a, b = (int(v) for v in rng.integers(len(graph), size=2))
        pa, pb = node_poses[a], node_poses[b]
        hops = bfs_cells(world, world.cell_of(pa.x, pa.y))[world.cell_of(pb.x, pb.y)[::-1]]
        if hops < 0 or hops * cs < min_geodesic:
            continue
        geo = float(hops * cs)
        if localization == "exact":
            src, dst = a, b
        else:
            src = localize(graph, graph.nodes[a].observation)
            dst = localize(graph, graph.nodes[b].observation)
        try:
            route, _ = plan_route(graph, src, dst, uniform)
            trace = execute_route(world, pa, route, graph)
            end = trace.terminal
            ok = math.hypot(end.x - pb.x, end.y - pb.y) < success_radius
            taken = trace.path_length
        except NoRouteError:
            ok, taken = False, 0.0
        episodes.append({"l": geo, "p": taken, "success": bool(ok)})
    s = [e["success"] for e in episodes]
    return NavResult(
        float(np.mean(s)), spl(s, [e["l"] for e in episodes], [e["p"] for e in episodes]), episodes
    )


def save_metrics(result: NavResult, path):
    with open(path, "w") as fh:
        fh.write(result.to_json() + "\n")


__all__ = [
    "NoRouteError",
    "RouteStep",
    "localize",
    "plan_route",
    "route_weight",
    "route_actions",
    "execute_route",
    "Trace",
    "NavResult",
    "spl",
    "evaluate_navigation",
    "save_metrics",
]
