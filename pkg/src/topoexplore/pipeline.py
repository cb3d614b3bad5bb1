"""Configuration, stage orchestration, artifact persistence and the seed registry.

Every stage writes plain-text artifacts under the run directory and stamps
them with a stage hash: a digest of the config keys the stage reads plus
the hashes of the stages upstream of it.  Loading an artifact whose stamp
differs from the current config's hash is refused, so stale files cannot
mix silently with fresh ones.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from . import explorer, models, navigator, render, topomap, vpr
from .expert import generate_demonstration, load_demonstration, sample_anchors, save_demonstration
from .gridworld import Locomotion, generate_world, read_world, save_world


class ConfigError(ValueError):
    pass


class DependencyError(RuntimeError):
    pass


DEFAULTS = {
    "out": "run",
    "seed": 0,
    "mode": "full",
    "locomotion": "0.25:10",
    "budget": 1000,
    "worlds.train": 12,
    "worlds.heldout": 5,
    "worlds.size": 40,
    "worlds.train_seed": 100,
    "worlds.heldout_seed": 900,
    "demos.per_world": 3,
    "demos.anchor_spacing": 1.5,
    "train.epochs": 70,
    "train.lr": 5e-4,
    "train.decay_every": 40,
    "train.decay_factor": 0.5,
    "train.batch": 32,
    "train.d": 64,
    "train.hidden": 64,
    "train.clip": 5.0,
    "assigner.epochs": 70,
    "assigner.rotation_pairs": 2,
    "explore.seeds": 10,
    "map.budget": 2000,
    "map.world": 0,
    "map.calibration_worlds": 2,
    "vpr.k": 16,
    "vpr.iters": 25,
    "vpr.leaf": 60,
    "vpr.threshold": "auto",
    "vpr.top_n": 5,
    "vpr.gap": 50,
    "nav.episodes": 50,
    "nav.localization": "vpr",
    "nav.uniform_weights": False,
    "bench.nodes": 5000,
}

MODES = [m.value for m in models.Mode]

STAGES = ["gen-worlds", "gen-demos", "train", "explore", "map", "navigate", "eval"]
UPSTREAM = {
    "gen-worlds": [],
    "gen-demos": ["gen-worlds"],
    "train": ["gen-demos"],
    "explore": ["train"],
    "map": ["train"],
    "navigate": ["map"],
    "eval": ["explore", "navigate"],
    "baseline": ["gen-worlds"],  # random-walk episodes, written by explore
}
STAGE_KEYS = {
    "gen-worlds": ["worlds."],
    "gen-demos": ["demos.", "locomotion", "seed"],
    "train": ["train.", "assigner.", "mode"],
    "explore": ["budget", "explore."],
    "map": ["map.", "vpr."],
    "navigate": ["nav."],
    "eval": [],
    "baseline": ["budget", "explore.", "locomotion"],
}


# --------------------------------------------------------------------- config


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def out(self) -> Path:
        return Path(self.values["out"])

    @property
    def locomotion(self) -> Locomotion:
        return Locomotion.parse(self.values["locomotion"])

    @property
    def mode(self) -> str:
        return self.values["mode"]

    def text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(self.values.items()))

    def stage_hash(self, stage: str) -> str:
        h = hashlib.sha256()
        for up in UPSTREAM[stage]:
            h.update(self.stage_hash(up).encode())
        for k in sorted(self.values):
            if k != "out" and any(k == p or (p.endswith(".") and k.startswith(p)) for p in STAGE_KEYS[stage]):
                h.update(f"{k}={_fmt(self.values[k])}\n".encode())
        return h.hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        raw = _fmt(raw)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if key == "vpr.threshold" and raw != "auto":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw


def _validate(values: dict):
    if values["mode"] not in MODES:
        raise ConfigError(f"mode: unknown supervision mode {values['mode']!r}")
    try:
        Locomotion.parse(values["locomotion"])
    except ValueError as exc:
        raise ConfigError(f"locomotion: {exc}") from None
    if values["nav.localization"] not in ("vpr", "exact"):
        raise ConfigError("nav.localization: expected 'vpr' or 'exact'")
    positive = ["budget", "map.budget", "worlds.train", "worlds.heldout", "explore.seeds", "train.epochs", "vpr.k"]
    for key in positive:
        if values[key] < 1:
            raise ConfigError(f"{key}: must be positive")
    if values["budget"] <= 10:
        raise ConfigError("budget: must exceed the 10 bootstrap steps")
    if not 0 <= values["map.world"] < values["worlds.train"]:
        raise ConfigError("map.world: must index a training world")


def parse_config(text: str = "", overrides: dict | None = None) -> RunConfig:
    """key=value lines (``#`` comments allowed); ``overrides`` win over the text."""
    values = dict(DEFAULTS)
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{key}: unknown config key")
        values[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"{key}: unknown config key")
        values[key] = _coerce(key, raw)
    _validate(values)
    return RunConfig(values)


def load_config(path=None, overrides=None) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"config file: {exc}") from None
    return parse_config(text, overrides)


# --------------------------------------------------------------- seed registry


class SeedRegistry:
    """Append-only TSV of (stage, world, seed, artifact sha256); exact repeats are skipped."""

    def __init__(self, path):
        self.path = Path(path)

    def list(self) -> list:
        if not self.path.exists():
            return []
        rows = []
        for line in self.path.read_text().splitlines():
            stage, world, seed, digest = line.split("\t")
            rows.append({"stage": stage, "world": world, "seed": int(seed), "sha256": digest})
        return rows

    def append(self, stage: str, world: str, seed: int, artifact) -> dict:
        digest = file_digest(artifact)
        rec = {"stage": stage, "world": world, "seed": int(seed), "sha256": digest}
        if rec not in self.list():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(f"{stage}\t{world}\t{int(seed)}\t{digest}\n")
        return rec


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------------ pipeline


class Pipeline:
    def __init__(self, config: RunConfig, log=print):
        self.cfg = config
        self.out = config.out
        self.log = log
        self.registry = SeedRegistry(self.out / "seeds.tsv")

    # paths ------------------------------------------------------------------

    def world_path(self, split, i):
        return self.out / "worlds" / f"{split}_{i:02d}.txt"

    def demo_path(self, i, j):
        return self.out / "demos" / f"train_{i:02d}_{j}.demo"

    def ckpt_path(self, mode=None):
        return self.out / "models" / f"{mode or self.cfg.mode}.ckpt"

    def episode_path(self, agent, i, seed):
        return self.out / "episodes" / agent / f"heldout_{i:02d}_seed{seed:03d}.csv"

    def _stamp_ok(self, stage, found, what):
        want = self.cfg.stage_hash(stage)
        if found != want:
            rerun = "explore" if stage == "baseline" else stage
            raise DependencyError(
                f"{what} was produced by a different {rerun} config ({found} != {want}); rerun stage {rerun}"
            )

    def _require(self, path: Path, stage: str):
        if not path.exists():
            raise DependencyError(f"missing {path} (run stage {stage} first)")

    # worlds -------------------------------------------------------------------

    def world_seed(self, split, i):
        key = "worlds.train_seed" if split == "train" else "worlds.heldout_seed"
        return self.cfg[key] + i

    def gen_worlds(self):
        n = self.cfg["worlds.size"]
        stamp = self.cfg.stage_hash("gen-worlds")
        for split, count in (("train", self.cfg["worlds.train"]), ("heldout", self.cfg["worlds.heldout"])):
            for i in range(count):
                seed = self.world_seed(split, i)
                w = generate_world(seed, size=(n, n), world_id=f"{split}_{i:02d}")
                path = self.world_path(split, i)
                path.parent.mkdir(parents=True, exist_ok=True)
                save_world(w, path, header=[f"stage=gen-worlds", f"config={stamp}", f"seed={seed}"])
                self.registry.append("gen-worlds", w.world_id, seed, path)
        self.log(f"gen-worlds: {self.cfg['worlds.train']} train + {self.cfg['worlds.heldout']} held-out")

    def load_world(self, split, i):
        path = self.world_path(split, i)
        self._require(path, "gen-worlds")
        header = _comment_header(path)
        self._stamp_ok("gen-worlds", header.get("config"), path)
        return read_world(path, world_id=f"{split}_{i:02d}")

    # demonstrations ---------------------------------------------------------------

    def demo_seed(self, i, j):
        return self.cfg["seed"] * 10_000 + i * 100 + j

    def gen_demos(self):
        loco = self.cfg.locomotion
        stamp = self.cfg.stage_hash("gen-demos")
        total = 0
        for i in range(self.cfg["worlds.train"]):
            w = self.load_world("train", i)
            for j in range(self.cfg["demos.per_world"]):
                seed = self.demo_seed(i, j)
                anchors = sample_anchors(w, self.cfg["demos.anchor_spacing"], seed)
                demo = generate_demonstration(w, anchors, seed, loco)
                path = self.demo_path(i, j)
                path.parent.mkdir(parents=True, exist_ok=True)
                save_demonstration(demo, path, extra={"config": stamp})
                self.registry.append("gen-demos", w.world_id, seed, path)
                total += demo.transitions
        self.log(f"gen-demos: {total} transitions")

    def load_demos(self):
        demos = []
        for i in range(self.cfg["worlds.train"]):
            for j in range(self.cfg["demos.per_world"]):
                path = self.demo_path(i, j)
                self._require(path, "gen-demos")
                self._stamp_ok("gen-demos", _comment_header(path).get("config"), path)
                demos.append(load_demonstration(path))
        return demos

    # training -----------------------------------------------------------------

    def train_config(self):
        c = self.cfg
        return models.TrainConfig(
            mode=c.mode,
            epochs=c["train.epochs"],
            lr=c["train.lr"],
            decay_every=c["train.decay_every"],
            decay_factor=c["train.decay_factor"],
            batch=c["train.batch"],
            seed=c["seed"],
            d=c["train.d"],
            hidden=c["train.hidden"],
            clip=c["train.clip"],
        )

    def train(self):
        c = self.cfg
        demos = self.load_demos()
        bundle = models.train(demos, self.train_config())
        acfg = models.AssignerConfig(
            epochs=c["assigner.epochs"],
            lr=c["train.lr"],
            decay_every=c["train.decay_every"],
            decay_factor=c["train.decay_factor"],
            batch=c["train.batch"],
            seed=c["seed"],
            rotation_pairs=c["assigner.rotation_pairs"],
        )
        models.train_assigner(demos, bundle, acfg)
        path = self.ckpt_path()
        path.parent.mkdir(parents=True, exist_ok=True)
        models.save_bundle(bundle, path, {"config": c.stage_hash("train")})
        models.write_training_log(bundle.training_log, path.with_name(f"{c.mode}_train_log.csv"))
        self.registry.append("train", "train_*", c["seed"], path)
        last = bundle.training_log[-1]
        self.log(f"train[{c.mode}]: L_T={last['L_T']:.4f} L_M={last['L_M']:.4f}")

    def load_bundle(self):
        path = self.ckpt_path()
        self._require(path, "train")
        from .nn import load_checkpoint

        params, header, _ = load_checkpoint(path)
        self._stamp_ok("train", header.get("config"), path)
        return models.ModelBundle(
            params, models.Mode(header["mode"]), header["d"], header["hidden"], header["m"], header["seed"]
        )

    # exploration ----------------------------------------------------------------

    def explore(self):
        c = self.cfg
        bundle = self.load_bundle()
        # the random walk ignores the checkpoint, so its episodes are shared by every mode
        stamps = {c.mode: c.stage_hash("explore"), "random-walk": c.stage_hash("baseline")}
        for i in range(c["worlds.heldout"]):
            w = self.load_world("heldout", i)
            for s in range(c["explore.seeds"]):
                for agent in (c.mode, "random-walk"):
                    if agent == "random-walk":
                        ep = explorer.run_random_walk(w, c["budget"], s, c.locomotion)
                    else:
                        ep = explorer.run_exploration(w, bundle, c["budget"], s, c.locomotion)
                    path = self.episode_path(agent, i, s)
                    path.parent.mkdir(parents=True, exist_ok=True)
                    explorer.save_episode(ep, path, extra={"config": stamps[agent]})
                    self.registry.append(f"explore:{agent}", w.world_id, s, path)
        self.log(f"explore: {c['worlds.heldout']} worlds x {c['explore.seeds']} seeds")

    def load_episodes(self, agent):
        c = self.cfg
        out = []
        for i in range(c["worlds.heldout"]):
            for s in range(c["explore.seeds"]):
                path = self.episode_path(agent, i, s)
                self._require(path, "explore")
                stage = "baseline" if agent == "random-walk" else "explore"
                self._stamp_ok(stage, _comment_header(path).get("config"), path)
                out.append(explorer.load_episode(path))
        return out

    # mapping --------------------------------------------------------------------

    def _map_episode(self, bundle, i):
        w = self.load_world("train", i)
        return w, explorer.run_exploration(w, bundle, self.cfg["map.budget"], self.cfg["seed"], self.cfg.locomotion)

    def _graph(self, bundle, episode):
        c = self.cfg
        centroids = topomap.fit_codebook(episode.observations, c["vpr.k"], c["vpr.iters"], c["seed"])
        g = topomap.build_chain_graph(episode, bundle, centroids)
        g.params["leaf"] = c["vpr.leaf"]
        return g

    def calibrate(self, bundle) -> float:
        c = self.cfg
        graphs = []
        picked = [i for i in range(c["worlds.train"]) if i != c["map.world"]][: c["map.calibration_worlds"]]
        for i in picked:
            _, ep = self._map_episode(bundle, i)
            graphs.append(self._graph(bundle, ep))
        thr = topomap.calibrate_threshold(graphs, gap=c["vpr.gap"], top_n=c["vpr.top_n"], cap=1.15)
        return thr if math.isfinite(thr) else 1.15

    def map(self):
        c = self.cfg
        bundle = self.load_bundle()
        thr = c["vpr.threshold"]
        if thr == "auto":
            thr = self.calibrate(bundle)
        w, ep = self._map_episode(bundle, c["map.world"])
        g = self._graph(bundle, ep)
        topomap.close_loops(g, thr, c["vpr.gap"], c["vpr.top_n"])
        topomap.assign_loop_actions(g, bundle)
        g.params["config"] = c.stage_hash("map")
        mdir = self.out / "map"
        mdir.mkdir(parents=True, exist_ok=True)
        explorer.save_episode(ep, mdir / "episode.csv", extra={"config": c.stage_hash("map")})
        topomap.save_graph(g, mdir / "graph.json")
        self.registry.append("map", w.world_id, c["seed"], mdir / "graph.json")
        self.log(f"map: {len(g)} nodes, {len(g.loop_edges()) // 2} loop edges at threshold {thr:.4f}")

    def load_map(self):
        mdir = self.out / "map"
        self._require(mdir / "graph.json", "map")
        w = self.load_world("train", self.cfg["map.world"])
        ep = explorer.load_episode(mdir / "episode.csv", w)
        g = topomap.load_graph(mdir / "graph.json", ep.observations)
        self._stamp_ok("map", g.params.get("config"), mdir / "graph.json")
        return w, ep, g

    # navigation -------------------------------------------------------------------

    def navigate(self):
        c = self.cfg
        w, ep, g = self.load_map()
        res = navigator.evaluate_navigation(
            w,
            g,
            c["nav.episodes"],
            c["seed"],
            node_poses=ep.poses,
            localization=c["nav.localization"],
            uniform=c["nav.uniform_weights"],
        )
        path = self.out / "navigation.json"
        doc = json.loads(res.to_json())
        doc["config"] = c.stage_hash("navigate")
        path.write_text(json.dumps(doc, sort_keys=True) + "\n")
        self.registry.append("navigate", w.world_id, c["seed"], path)
        self.log(f"navigate: success {res.success_rate:.3f}, SPL {res.spl:.3f}")

    # evaluation -------------------------------------------------------------------

    def evaluate(self):
        c = self.cfg
        agents = {c.mode: self.load_episodes(c.mode), "random-walk": self.load_episodes("random-walk")}
        nav_path = self.out / "navigation.json"
        self._require(nav_path, "navigate")
        nav = json.loads(nav_path.read_text())
        self._stamp_ok("navigate", nav.get("config"), nav_path)
        report = {"config": c.stage_hash("eval"), "coverage": {}, "navigation": nav}
        for agent, eps in agents.items():
            report["coverage"][agent] = coverage_summary(eps)
        mine = [e.final_ratio for e in agents[c.mode]]
        base = [e.final_ratio for e in agents["random-walk"]]
        report["comparison"] = paired_sign_test(mine, base)
        path = self.out / "metrics.json"
        path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
        self.log(
            f"eval: median {report['coverage'][c.mode]['median']:.3f} vs random walk "
            f"{report['coverage']['random-walk']['median']:.3f} (sign test p={report['comparison']['p_value']:.3g})"
        )
        return report

    # rendering and benchmarks -----------------------------------------------------

    def render(self):
        rdir = self.out / "render"
        rdir.mkdir(parents=True, exist_ok=True)
        n = 0
        for agent in (self.cfg.mode, "random-walk"):
            for i in range(self.cfg["worlds.heldout"]):
                path = self.episode_path(agent, i, 0)
                if path.exists():
                    w = self.load_world("heldout", i)
                    render.render_episode(w, explorer.load_episode(path), rdir / f"{agent}_heldout_{i:02d}.svg")
                    n += 1
        if (self.out / "map" / "graph.json").exists():
            w, _, g = self.load_map()
            render.render_graph(w, g, rdir / "map.svg", title="map with loop edges")
            n += 1
        if n == 0:
            raise DependencyError("nothing to render (run explore or map first)")
        self.log(f"render: {n} SVG files in {rdir}")

    def bench_vpr(self):
        bundle = self.load_bundle()
        c = self.cfg
        w = self.load_world("train", c["map.world"])
        ep = explorer.run_exploration(w, bundle, c["bench.nodes"], c["seed"], c.locomotion)
        g = self._graph(bundle, ep)
        result = bench_loop_detection(np.stack([n.vlad for n in g.nodes]), c["vpr.top_n"], c["vpr.leaf"])
        (self.out / "bench_vpr.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n")
        self.log(
            f"bench-vpr: {result['nodes']} nodes, ball tree {result['ball_tree_s']:.2f} s, "
            f"exhaustive {result['exhaustive_s']:.2f} s"
        )
        return result

    def run(self, stages):
        actions = {
            "gen-worlds": self.gen_worlds,
            "gen-demos": self.gen_demos,
            "train": self.train,
            "explore": self.explore,
            "map": self.map,
            "navigate": self.navigate,
            "eval": self.evaluate,
            "render": self.render,
            "bench-vpr": self.bench_vpr,
        }
        result = None
        for stage in stages:
            if stage not in actions:
                raise ConfigError(f"unknown stage {stage!r}")
            result = actions[stage]()
        return result


def run_pipeline(config: RunConfig, stages=None, log=print):
    return Pipeline(config, log).run(stages or STAGES)


# ------------------------------------------------------------------- helpers


def _comment_header(path) -> dict:
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
    return meta


def coverage_summary(episodes, every: int = 50) -> dict:
    ratios = [e.final_ratio for e in episodes]
    curves = np.array([np.asarray(e.coverage) / e.total_free_area for e in episodes])
    idx = list(range(every - 1, curves.shape[1], every))
    return {
        "median": float(np.median(ratios)),
        "mean": float(np.mean(ratios)),
        "final_ratios": ratios,
        "curve_steps": [i + 1 for i in idx],
        "mean_curve": [float(v) for v in curves[:, idx].mean(axis=0)],
    }


def paired_sign_test(a, b) -> dict:
    """One-sided sign test that ``a`` exceeds ``b`` pairwise; ties are dropped."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    wins = int(np.sum(a > b))
    losses = int(np.sum(a < b))
    n = wins + losses
    p = 1.0 if n == 0 else float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue)
    return {"wins": wins, "losses": losses, "ties": int(len(a) - n), "p_value": p}


def bench_loop_detection(vlads, top_n: int = 5, leaf: int = 60) -> dict:
    """Wall-clock of ball-tree retrieval against checking every pair, same outputs."""
    x = np.asarray(vlads, dtype=np.float64)
    n = len(x)
    t0 = time.perf_counter()
    tree = vpr.ball_tree_build(x, leaf)
    tree_hits = [tuple(i for i, _ in tree.query(v, top_n)) for v in x]
    t_tree = time.perf_counter() - t0
    t0 = time.perf_counter()
    brute_hits = [tuple(i for i, _ in vpr.linear_scan(x, v, top_n)) for v in x]
    t_brute = time.perf_counter() - t0
    return {
        "nodes": n,
        "top_n": top_n,
        "ball_tree_s": t_tree,
        "exhaustive_s": t_brute,
        "speedup": t_brute / t_tree if t_tree > 0 else math.inf,
        "identical": tree_hits == brute_hits,
    }


__all__ = [
    "ConfigError",
    "DependencyError",
    "DEFAULTS",
    "STAGES",
    "RunConfig",
    "parse_config",
    "load_config",
    "SeedRegistry",
    "Pipeline",
    "run_pipeline",
    "coverage_summary",
    "paired_sign_test",
    "bench_loop_detection",
]
