"""Top-down SVG rendering of worlds, trajectories and map loop edges."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .gridworld import World

PX = 12.0  # pixels per metre


def _ramp(t: float) -> str:
    """Cold-to-warm colour for t in [0, 1]: blue through magenta to yellow."""
    stops = np.array([[40, 60, 200], [200, 60, 160], [250, 220, 40]], dtype=float)
    t = min(max(t, 0.0), 1.0) * (len(stops) - 1)
    k = min(int(t), len(stops) - 2)
    rgb = stops[k] + (stops[k + 1] - stops[k]) * (t - k)
    return "#%02x%02x%02x" % tuple(int(round(v)) for v in rgb)


def _xy(x, y, world):
    # y grows with rows, which matches SVG's downward axis
    return f"{x * PX:.2f},{y * PX:.2f}"


def render_svg(world: World, positions=None, loop_pairs=(), title: str = "") -> str:
    """SVG text with walls, a step-coloured trajectory and optional loop edges.

    ``positions`` is a sequence of (x, y); ``loop_pairs`` holds index pairs
    into it.  Each trajectory vertex is one ``circle.vertex`` element and
    each loop edge one ``line.loop`` element.
    """
    cs = world.cell_size
    w, h = world.cols * cs * PX, world.rows * cs * PX
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" viewBox="0 0 {w:.2f} {h:.2f}">',
        f"<title>{escape(title)}</title>",
        f'<rect width="{w:.2f}" height="{h:.2f}" fill="#ffffff"/>',
        '<g class="walls" fill="#444444">',
    ]
    for r, c in np.argwhere(~world.free):
        out.append(f'<rect x="{c * cs * PX:.2f}" y="{r * cs * PX:.2f}" width="{cs * PX:.2f}" height="{cs * PX:.2f}"/>')
    out.append("</g>")
    positions = list(positions or [])
    n = len(positions)
    if n:
        out.append('<g class="trajectory" stroke-width="1.5" fill="none">')
        for k in range(n - 1):
            (x0, y0), (x1, y1) = positions[k], positions[k + 1]
            col = _ramp(k / max(n - 1, 1))
            out.append(f'<line x1="{x0 * PX:.2f}" y1="{y0 * PX:.2f}" x2="{x1 * PX:.2f}" y2="{y1 * PX:.2f}" stroke="{col}"/>')
        for k, (x, y) in enumerate(positions):
            col = _ramp(k / max(n - 1, 1))
            out.append(f'<circle class="vertex" cx="{x * PX:.2f}" cy="{y * PX:.2f}" r="1.2" fill="{col}"/>')
        out.append("</g>")
    if loop_pairs:
        out.append('<g class="loops" stroke="#8a2be2" stroke-width="1" stroke-opacity="0.6">')
        for i, j in loop_pairs:
            (x0, y0), (x1, y1) = positions[i], positions[j]
            out.append(f'<line class="loop" x1="{x0 * PX:.2f}" y1="{y0 * PX:.2f}" x2="{x1 * PX:.2f}" y2="{y1 * PX:.2f}"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_episode(world: World, episode, path, title: str = ""):
    pts = [(p.x, p.y) for p in episode.poses]
    with open(path, "w") as fh:
        fh.write(render_svg(world, pts, title=title or f"{episode.world_id} seed {episode.seed}"))


def render_graph(world: World, graph, path, title: str = ""):
    """Trajectory from the nodes' debug positions with every undirected loop edge drawn once."""
    pts = [n.debug_position for n in graph.nodes]
    pairs = sorted({(min(e.src, e.dst), max(e.src, e.dst)) for e in graph.loop_edges()})
    with open(path, "w") as fh:
        fh.write(render_svg(world, pts, pairs, title=title))


__all__ = ["render_svg", "render_episode", "render_graph"]
