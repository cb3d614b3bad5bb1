# %% [markdown]
# # Worlds, panoramas and coverage
# A generated floor plan, one ray-cast panorama and the coverage curve of a
# random walk.  Run with `python notebooks/01_world_and_sensor.py`.

# %%
import numpy as np

from topoexplore import explorer, gridworld as gw

world = gw.generate_world(101, size=(40, 40))
print(gw.dump_world(world))
print("free area m^2:", world.total_free_area())

# %% one panorama from the start cell
x, y = world.cell_center(*world.start_cell())
obs = gw.observe(world, gw.Pose(x, y, 0))
print("depth min/median/max:", obs.depths.min(), np.median(obs.depths), obs.depths.max())
print("misses (texture 8):", int((obs.textures == gw.MISS_TEXTURE).sum()), "of", obs.depths.size)

# %% a random walk and its coverage progression
ep = explorer.run_random_walk(world, budget=1000, seed=0)
curve = np.asarray(ep.coverage) / ep.total_free_area
for step in (1, 100, 250, 500, 1000):
    print(f"step {step:5d}: coverage ratio {curve[step - 1]:.3f}")

# %% geodesic versus straight-line distance between two far cells
a, b = world.free_cells()[0], world.free_cells()[-1]
pa, pb = world.cell_center(*a), world.cell_center(*b)
print("euclid", np.hypot(pa[0] - pb[0], pa[1] - pb[1]), "geodesic", gw.geodesic_distance(world, pa, pb))
