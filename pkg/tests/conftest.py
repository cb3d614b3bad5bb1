import numpy as np
import pytest

from topoexplore import expert, explorer, models
from topoexplore import gridworld as gw
from topoexplore.gridworld import load_world


def box_text(cols, rows, wall="0", start=None):
    lines = []
    for r in range(rows):
        line = []
        for c in range(cols):
            if r in (0, rows - 1) or c in (0, cols - 1):
                line.append(wall)
            elif start == (c, r):
                line.append("S")
            else:
                line.append(".")
        lines.append("".join(line))
    return "\n".join(lines) + "\n"


def box(cols, rows, wall="0", **kw):
    return load_world(box_text(cols, rows, wall), **kw)


@pytest.fixture
def open_room():
    # 10 x 10 interior cells = 2.5 m square
    return box(12, 12)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_world():
    return gw.generate_world(5, size=(20, 20))


@pytest.fixture(scope="session")
def toy_demos(toy_world):
    return [expert.generate_demonstration(toy_world, expert.sample_anchors(toy_world, 1.5, s), s) for s in range(3)]


@pytest.fixture(scope="session")
def overfit_bundle(toy_demos):
    return models.train(toy_demos[:1], models.TrainConfig(epochs=400, seed=0))


@pytest.fixture(scope="session")
def assigner_bundle(overfit_bundle, toy_demos):
    b = models.ModelBundle(dict(overfit_bundle.params), overfit_bundle.mode)
    models.train_assigner(toy_demos, b, models.AssignerConfig(epochs=70, seed=0))
    return b


def textured_room(n, seed=0):
    """Empty n x n room whose walls carry painted textures (no symmetric aliasing)."""
    wall = np.zeros((n, n), dtype=bool)
    wall[0, :] = wall[-1, :] = wall[:, 0] = wall[:, -1] = True
    cells = gw.paint_textures(wall, np.random.default_rng(seed))
    return gw.World(cells, 0.25, (1, 1), f"room{seed}")


def lawnmower(world, lane_gap=4):
    """Boustrophedon sweep of an empty room, starting east from cell (1, 1)."""
    n = world.cols
    acts = []
    for k in range((n - 3) // lane_gap):
        turn = gw.LEFT if k % 2 == 0 else gw.RIGHT
        acts += [gw.FORWARD] * (n - 3) + [turn] * 9 + [gw.FORWARD] * lane_gap + [turn] * 9
    return explorer.replay_actions(world, gw.Pose(*world.cell_center(1, 1), 0), acts)


ACCEPTANCE = {}


def record_criterion(n, ok, detail):
    """Log one acceptance verdict; the terminal summary prints them in order."""
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
