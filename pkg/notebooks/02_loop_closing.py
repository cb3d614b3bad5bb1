# %% [markdown]
# # Loop closing on a ring corridor
# Drive once around a ring, encode every panorama as a VLAD vector and see
# which temporally distant pairs the ball tree brings back.

# %%
import math
import tempfile
from pathlib import Path

import numpy as np

from topoexplore import expert, explorer, gridworld as gw, render, topomap

world = gw.loop_corridor()
loco = gw.Locomotion()
m = 3
corners = [(world.cols - 1 - m, m), (world.cols - 1 - m, world.rows - 1 - m), (m, world.rows - 1 - m), (m, m), (m + 20, m)]
pose = start = gw.Pose(*world.cell_center(m, m), 0)
actions = []
for c in corners:
    for a in expert.plan_to_cell(world, pose, world.cell_center(*c), loco):
        actions.append(a)
        pose = gw.step_pose(world, pose, a, loco)
ep = explorer.replay_actions(world, start, actions)
print(len(ep), "steps around the ring")

# %% codebook, VLADs and retrieved candidate pairs
g = topomap.build_chain_graph(ep, None, topomap.fit_codebook(ep.observations))
near, far = [], []
for d, i, j in topomap.loop_candidates(g):
    metres = math.dist(g.nodes[i].debug_position, g.nodes[j].debug_position)
    if metres < 1.0:
        near.append(d)
    elif metres > 3.0:
        far.append(d)
print("near pairs:", len(near), "smallest VLAD distance", round(min(near), 3))
print("far pairs: ", len(far), "smallest VLAD distance", round(min(far), 3))

# %% the threshold decides which pairs become edges
for thr in (0.5, 0.8, 1.15):
    h = topomap.build_chain_graph(ep, None, g.centroids)
    topomap.close_loops(h, thr)
    print(f"threshold {thr}: {len(h.loop_edges()) // 2} undirected loop edges")

# %% picture
topomap.close_loops(g, 0.9 * min(far))
out = Path(tempfile.gettempdir()) / "ring_loops.svg"
render.render_graph(world, g, out, title="ring corridor")
print(f"wrote {out}")
