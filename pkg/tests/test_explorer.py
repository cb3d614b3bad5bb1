import math

import numpy as np
import pytest

from conftest import box
from topoexplore import explorer, expert, gridworld as gw, models
from topoexplore.gridworld import FORWARD, LEFT, RIGHT, Locomotion, Pose


@pytest.fixture(scope="module")
def world():
    return gw.generate_world(8, size=(32, 32))


@pytest.fixture(scope="module")
def bundle():
    return models.init_bundle(0)


@pytest.fixture(scope="module")
def episode(world, bundle):
    return explorer.run_exploration(world, bundle, budget=120, seed=3)


def test_bootstrap_open_corridor():
    w = gw.load_world("0" * 60 + "\n0" + "." * 58 + "0\n" + "0" * 60 + "\n")
    log = explorer.bootstrap(w, Pose(*w.cell_center(1, 1), 0), m=10, seed=0)
    assert log.actions == [FORWARD] * 10


def test_bootstrap_turns_after_hitting_wall():
    w = gw.load_world("00000\n0...0\n0...0\n0...0\n00000\n")
    start = Pose(*w.cell_center(3, 2), 0)  # the east wall is one step ahead
    log = explorer.bootstrap(w, start, m=10, seed=4)
    assert log.actions[0] == FORWARD
    assert log.actions[1] in (LEFT, RIGHT)
    assert len(log.actions) == 10


def test_bootstrap_trace_oracle():
    # Replays the rule by hand: forward, and after any forward that moved
    # less than a full step, one turn drawn from the episode's coin.
    w = gw.load_world("0000000\n0.....0\n0.....0\n0000000\n")
    start = Pose(*w.cell_center(4, 1), 0)
    log = explorer.bootstrap(w, start, m=10, seed=11)
    coin = np.random.default_rng([11, 2])
    pose, blocked, expected = start, False, []
    for _ in range(10):
        if blocked:
            a = LEFT if coin.random() < 0.5 else RIGHT
            blocked = False
        else:
            a = FORWARD
        nxt = gw.step_pose(w, pose, a, Locomotion())
        if a == FORWARD:
            blocked = math.hypot(nxt.x - pose.x, nxt.y - pose.y) < 0.25 - 1e-9
        expected.append(a)
        pose = nxt
    assert log.actions == expected
    first_turn = min(k for k, a in enumerate(expected) if a != FORWARD)
    assert first_turn == 2  # moves once, is blocked once, then turns


def test_bootstrap_deterministic(world):
    a = explorer.bootstrap(world, None, seed=5)
    b = explorer.bootstrap(world, None, seed=5)
    assert a.actions == b.actions and a.poses == b.poses


def test_budget_accounting(episode):
    assert len(episode.actions) == 120
    assert len(episode.poses) == len(episode.observations) == len(episode.coverage) == 120


def test_exploration_deterministic(world, bundle, episode):
    again = explorer.run_exploration(world, bundle, budget=120, seed=3)
    assert again.actions == episode.actions and again.poses == episode.poses
    assert again.coverage == episode.coverage


def test_episode_invariants(world, episode):
    assert np.all(np.diff(episode.coverage) >= 0)
    assert 0.0 <= episode.final_ratio <= 1.0
    assert episode.final_ratio == episode.coverage[-1] / world.total_free_area()
    assert all(world.is_free_point(p.x, p.y) for p in episode.poses)


def test_override_only_replaces_blocked_forwards(world, bundle, episode):
    feats = [models.encode_observation(bundle, o) for o in episode.observations]
    feats.append(models.encode_observation(bundle, gw.observe(world, episode.final_pose)))
    fired = 0
    for k in range(10, len(episode.actions)):
        predicted = models.argmax_action(models.policy_logits(bundle, np.array(feats[k - 10 : k + 1])))
        taken = episode.actions[k]
        if predicted != taken:
            fired += 1
            assert predicted == FORWARD
            assert taken in (LEFT, RIGHT)
            assert episode.observations[k].forward_depth() < 0.5
        elif predicted == FORWARD:
            assert episode.observations[k].forward_depth() >= 0.5
    assert fired >= 0


def test_budget_must_exceed_bootstrap(world, bundle):
    with pytest.raises(ValueError):
        explorer.run_exploration(world, bundle, budget=10, seed=0)


def test_random_walk_action_frequencies():
    w = gw.load_world("0000\n0..0\n0000\n")
    n = 100_000
    log = explorer.run_random_walk(w, budget=n, seed=0)
    freq = np.bincount(log.actions, minlength=3) / n
    sigma = math.sqrt((1 / 3) * (2 / 3) / n)
    assert np.all(np.abs(freq - 1 / 3) < 3 * sigma)


def test_random_walk_basics(world):
    a = explorer.run_random_walk(world, budget=200, seed=7)
    b = explorer.run_random_walk(world, budget=200, seed=7)
    assert a.poses == b.poses and a.actions == b.actions
    assert np.all(np.diff(a.coverage) >= 0)
    assert len(a.actions) == 200


def test_agents_share_start_pose(world, bundle):
    r = explorer.run_random_walk(world, budget=20, seed=13)
    e = explorer.run_exploration(world, bundle, budget=20, seed=13)
    assert r.poses[0] == e.poses[0]


def test_episode_file_round_trip(world, episode, tmp_path):
    path = tmp_path / "ep.csv"
    explorer.save_episode(episode, path, extra={"config": "abc"})
    text = path.read_text().splitlines()
    assert text[0] == "# seed=3"
    assert "step,x,y,heading,action,coverage_m2" in text
    back = explorer.load_episode(path, world)
    assert back.poses == episode.poses and back.actions == episode.actions
    assert back.coverage == episode.coverage
    assert back.final_pose == episode.final_pose
    assert all(a == b for a, b in zip(back.observations, episode.observations))


def test_long_run_reaches_expert_coverage():
    w = box(22, 22)
    w = gw.World(w.cells, 0.25, (10, 10))
    demos = [expert.generate_demonstration(w, expert.sample_anchors(w, 1.5, s), s) for s in range(3)]
    tracker = gw.CoverageTracker(w)
    for p in demos[0].poses:
        tracker.update(p.x, p.y)
    b = models.train(demos, models.TrainConfig(epochs=60, seed=0))
    log = explorer.run_exploration(w, b, budget=5000, seed=1)
    assert abs(log.final_ratio - tracker.ratio()) < 0.05
