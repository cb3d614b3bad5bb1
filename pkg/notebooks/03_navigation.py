# %% [markdown]
# # Routing and open-loop replay
# Sweep a textured room, close loops, then route between two nodes and
# replay the stored actions without looking at the true pose.

# %%
import math

import numpy as np

from topoexplore import explorer, gridworld as gw, navigator, topomap

wall = np.zeros((22, 22), dtype=bool)
wall[0, :] = wall[-1, :] = wall[:, 0] = wall[:, -1] = True
world = gw.World(gw.paint_textures(wall, np.random.default_rng(0)), 0.25, (1, 1), "room")

acts = []
for k in range(4):
    turn = gw.LEFT if k % 2 == 0 else gw.RIGHT
    acts += [gw.FORWARD] * 19 + [turn] * 9 + [gw.FORWARD] * 4 + [turn] * 9
ep = explorer.replay_actions(world, gw.Pose(*world.cell_center(1, 1), 0), acts)
codebook = topomap.fit_codebook(ep.observations)
chain = topomap.build_chain_graph(ep, None, codebook)
looped = topomap.build_chain_graph(ep, None, codebook)
topomap.close_loops(looped, 1.15)

# %% route weights: loop edges shortcut the sweep
src, dst = 0, len(chain) - 1
print("route weight chain/looped:", navigator.plan_route(chain, src, dst)[1], navigator.plan_route(looped, src, dst)[1])


def replay(g):
    route, _ = navigator.plan_route(g, src, dst)
    trace = navigator.execute_route(world, ep.poses[src], route, g)
    miss = math.dist((trace.terminal.x, trace.terminal.y), g.nodes[dst].debug_position)
    return len(trace.actions), miss


# %% replay without looking at the true pose. Chain edges carry their recorded
# actions; these loop edges were never labelled, so crossing one only re-heads
for name, g in (("chain", chain), ("looped", looped)):
    n, miss = replay(g)
    print(f"{name}: {n} actions, terminal {miss:.2f} m from goal")

# %% a small evaluation with exact localisation on each graph
for name, g in (("chain", chain), ("looped", looped)):
    res = navigator.evaluate_navigation(world, g, 20, seed=0, node_poses=ep.poses, localization="exact")
    print(name, "success", res.success_rate, "SPL", round(res.spl, 3))
