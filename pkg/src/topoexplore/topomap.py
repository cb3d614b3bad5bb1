"""Topological maps: temporal chain, VPR loop closing and loop-edge action labels.

Nodes keep a debug position for test oracles only.  Nothing on the
planning or execution path reads it.  Node headings are compass readings
carried by the world-aligned observations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import models, vpr
from .gridworld import LEFT, RIGHT, Locomotion, Observation

TEMPORAL = "temporal"
LOOP = "loop"


@dataclass
class Node:
    id: int
    step: int
    heading: int  # compass heading of the node's observation
    feature: np.ndarray | None = None
    vlad: np.ndarray | None = None
    observation: Observation | None = None
    debug_position: tuple | None = None


@dataclass
class Edge:
    src: int
    dst: int
    kind: str
    actions: list = field(default_factory=list)


@dataclass
class TopoGraph:
    nodes: list = field(default_factory=list)
    edges: dict = field(default_factory=dict)  # (src, dst) -> Edge
    locomotion: Locomotion = field(default_factory=Locomotion)
    centroids: np.ndarray | None = None
    params: dict = field(default_factory=dict)
    _tree: vpr.BallTree | None = None

    def __len__(self):
        return len(self.nodes)

    def add_edge(self, edge: Edge) -> bool:
        key = (edge.src, edge.dst)
        if key in self.edges:
            return False
        self.edges[key] = edge
        return True

    def loop_edges(self):
        return [e for e in self.edges.values() if e.kind == LOOP]

    def temporal_edges(self):
        return [e for e in self.edges.values() if e.kind == TEMPORAL]

    def tree(self) -> vpr.BallTree:
        if self._tree is None:
            self._tree = vpr.ball_tree_build(np.stack([n.vlad for n in self.nodes]), self.params.get("leaf", 60))
        return self._tree


def chain_headings(actions, loco: Locomotion, start: int = 0) -> list:
    """Map-frame heading before each action and after the last one."""
    out = [start % 360]
    for a in actions:
        h = out[-1]
        if a == LEFT:
            h += loco.turn_angle
        elif a == RIGHT:
            h -= loco.turn_angle
        out.append(h % 360)
    return out


def build_chain_graph(episode, bundle: models.ModelBundle | None = None, centroids=None) -> TopoGraph:
    """One node per recorded step, temporal edge i -> i+1 carrying action i."""
    n = len(episode.poses)
    if n == 0:
        raise vpr.StructureError("episode is empty")
    # World-aligned panoramas imply a compass; without observations fall back
    # to headings accumulated from the turn actions.
    headings = chain_headings(episode.actions, episode.locomotion)
    if episode.observations:
        headings = [o.heading for o in episode.observations]
    g = TopoGraph(locomotion=episode.locomotion)
    for i in range(n):
        obs = episode.observations[i] if episode.observations else None
        p = episode.poses[i]
        g.nodes.append(Node(i, i, headings[i], observation=obs, debug_position=(p.x, p.y)))
    for i in range(n - 1):
        g.add_edge(Edge(i, i + 1, TEMPORAL, [int(episode.actions[i])]))
    if bundle is not None or centroids is not None:
        attach_descriptors(g, bundle, centroids)
    return g


def fit_codebook(observations, k: int = 16, iters: int = 25, seed: int = 0) -> np.ndarray:
    descs = np.concatenate([vpr.sector_descriptors(o) for o in observations])
    return vpr.kmeans_fit(descs, k, iters, seed).centroids


def attach_descriptors(graph: TopoGraph, bundle=None, centroids=None):
    obs = [n.observation for n in graph.nodes]
    if centroids is not None:
        graph.centroids = np.asarray(centroids)
        cache = {}
        for node, o in zip(graph.nodes, obs):
            key = o.depths.tobytes() + o.textures.tobytes()
            if key not in cache:
                cache[key] = vpr.observation_vlad(o, graph.centroids)
            node.vlad = cache[key]
        graph._tree = None
    if bundle is not None:
        x = models.observation_inputs(obs)
        feats = models.encode_inputs(bundle.params, x)
        for node, f in zip(graph.nodes, feats):
            node.feature = f
    return graph


def loop_candidates(graph: TopoGraph, gap: int = 50, top_n: int = 5):
    """(distance, i, j) for every retrieved pair with i < j and j - i >= gap."""
    tree = graph.tree()
    n = min(top_n, len(graph))
    out = {}
    for node in graph.nodes:
        for j, d in tree.query(node.vlad, n):
            other = graph.nodes[j]
            if abs(other.step - node.step) < gap:
                continue
            key = (min(node.id, j), max(node.id, j))
            out[key] = min(d, out.get(key, np.inf))
    return sorted((d, i, j) for (i, j), d in out.items())


def close_loops(graph: TopoGraph, threshold: float = 1.15, gap: int = 50, top_n: int = 5) -> TopoGraph:
    """Add undirected loop edges (stored as both directions) between retrieved neighbours."""
    graph.params.update({"threshold": threshold, "gap": gap, "top_n": top_n})
    for d, i, j in loop_candidates(graph, gap, top_n):
        if d < threshold and (i, j) not in graph.edges and (j, i) not in graph.edges:
            graph.add_edge(Edge(i, j, LOOP, []))
            graph.add_edge(Edge(j, i, LOOP, []))
    return graph


def calibrate_threshold(graphs, far: float = 3.0, gap: int = 50, top_n: int = 5, margin: float = 0.9, cap=None):
    """Largest loop threshold that keeps every retrieved far pair out, scaled by ``margin``.

    Works on maps of training worlds, where debug positions may be read;
    the resulting number is then used unchanged on any other map.
    """
    worst = np.inf
    for g in graphs:
        for d, i, j in loop_candidates(g, gap, top_n):
            pi, pj = g.nodes[i].debug_position, g.nodes[j].debug_position
            if np.hypot(pi[0] - pj[0], pi[1] - pj[1]) > far:
                worst = min(worst, d)
    thr = margin * worst
    return thr if cap is None else min(thr, cap)


def assign_loop_actions(graph: TopoGraph, bundle: models.ModelBundle) -> TopoGraph:
    for e in graph.loop_edges():
        f_from = graph.nodes[e.src].feature
        f_to = graph.nodes[e.dst].feature
        e.actions = models.strip_stops(models.assigner_predict(bundle, f_from, f_to))
    return graph


# ----------------------------------------------------------------------- JSON


def graph_to_json(graph: TopoGraph) -> str:
    doc = {
        "format": "topoexplore-graph",
        "version": 1,
        "params": graph.params,
        "locomotion": str(graph.locomotion),
        "centroids": None if graph.centroids is None else graph.centroids.tolist(),
        "nodes": [
            {
                "id": n.id,
                "step": n.step,
                "heading": n.heading,
                "vlad": None if n.vlad is None else n.vlad.tolist(),
                "feature": None if n.feature is None else n.feature.tolist(),
                "debug_position": None if n.debug_position is None else list(n.debug_position),
            }
            for n in graph.nodes
        ],
        "edges": [
            {"from": e.src, "to": e.dst, "kind": e.kind, "actions": list(e.actions)}
            for e in sorted(graph.edges.values(), key=lambda e: (e.kind != TEMPORAL, e.src, e.dst))
        ],
    }
    return json.dumps(doc, sort_keys=True)


def graph_from_json(text: str, observations=None) -> TopoGraph:
    doc = json.loads(text)
    if doc.get("format") != "topoexplore-graph":
        raise vpr.StructureError("not a graph document")
    g = TopoGraph(locomotion=Locomotion.parse(doc["locomotion"]), params=doc["params"])
    if doc["centroids"] is not None:
        g.centroids = np.array(doc["centroids"], dtype=np.float64)
    for k, n in enumerate(doc["nodes"]):
        g.nodes.append(
            Node(
                n["id"],
                n["step"],
                n["heading"],
                None if n["feature"] is None else np.array(n["feature"]),
                None if n["vlad"] is None else np.array(n["vlad"]),
                None if observations is None else observations[k],
                None if n["debug_position"] is None else tuple(n["debug_position"]),
            )
        )
    for e in doc["edges"]:
        g.add_edge(Edge(e["from"], e["to"], e["kind"], list(e["actions"])))
    return g


def save_graph(graph: TopoGraph, path):
    with open(path, "w") as fh:
        fh.write(graph_to_json(graph) + "\n")


def load_graph(path, observations=None) -> TopoGraph:
    with open(path) as fh:
        return graph_from_json(fh.read(), observations)


__all__ = [
    "Node",
    "Edge",
    "TopoGraph",
    "TEMPORAL",
    "LOOP",
    "chain_headings",
    "build_chain_graph",
    "fit_codebook",
    "attach_descriptors",
    "loop_candidates",
    "close_loops",
    "calibrate_threshold",
    "assign_loop_actions",
    "graph_to_json",
    "graph_from_json",
    "save_graph",
    "load_graph",
]
