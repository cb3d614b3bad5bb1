import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from topoexplore import expert, gridworld as gw, models, nn
from topoexplore.gridworld import FORWARD, LEFT, STOP, Locomotion
from topoexplore.models import Batch, Mode

TINY = dict(d=8, hidden=8, enc_hidden=16, mp_hidden=8)


def tiny_batch(rng, mode, steps=3, B=2):
    x = rng.uniform(0, 1, size=(B, steps + 1, 144))
    acts = rng.integers(3, size=(B, steps))
    batch = Batch(x, acts)
    if mode is Mode.WITH_HISTORY:
        batch.history = rng.uniform(0, 1, size=(B, 10, 144))
        batch.history_mask = np.array([True, False][:B])
    return batch


def loss_closure(bundle, batch, mode):
    names = sorted(bundle.params)

    def closure(vec):
        p = nn.unflatten(vec, bundle.params, names)
        lt, lm, g = models.window_loss(p, batch, mode)
        return lt + lm, nn.flatten(g, names)[0]

    return closure, nn.flatten(bundle.params, names)[0]


# -- encoder -----------------------------------------------------------------


def test_encoder_deterministic_and_unit_norm(toy_demos):
    b = models.init_bundle(0)
    o = toy_demos[0].observations[0]
    f1, f2 = models.encode_observation(b, o), models.encode_observation(b, o)
    assert np.array_equal(f1, f2)
    assert abs(np.linalg.norm(f1) - 1) < 1e-9


def test_encoder_unit_norm_fuzz():
    b = models.init_bundle(3)
    x = np.random.default_rng(0).uniform(0, 1, size=(10_000, 144))
    f = models.encode_inputs(b.params, x)
    assert np.all(np.abs(np.linalg.norm(f, axis=1) - 1) < 1e-9)


def test_encoder_input_layout(toy_demos):
    o = toy_demos[0].observations[3]
    x = models.observation_input(o)
    d, t = o.egocentric()
    assert x.shape == (144,)
    assert np.array_equal(x[:72], d / 5.0) and np.array_equal(x[72:], t / 8.0)


def test_encoder_lipschitz_under_submillimetre_change(overfit_bundle, toy_demos):
    p = overfit_bundle.params
    o = toy_demos[0].observations[5]
    x = models.observation_input(o)
    y = x.copy()
    y[7] += 0.0009 / 5.0
    z, _ = nn.mlp_forward(p, "enc", x)
    # tanh is 1-Lipschitz; normalisation contributes at most 2 / |z|
    lip = np.linalg.norm(p["enc.W0"], 2) * np.linalg.norm(p["enc.W1"], 2) * 2.0 / (np.linalg.norm(z) - 1e-6)
    bound = lip * 0.0009 / 5.0
    dist = np.linalg.norm(models.encode_inputs(p, x) - models.encode_inputs(p, y))
    assert dist <= bound + 1e-12
    assert dist < 0.05


# -- task and motion planners ------------------------------------------------


def test_zero_task_planner_hallucinates_zero():
    b = models.init_bundle(1)
    for k in list(b.params):
        if k.startswith("tp."):
            b.params[k] = np.zeros_like(b.params[k])
    feats = np.random.default_rng(0).normal(size=(10, 64))
    out = models.hallucinate(b, feats)
    assert out.shape == (10, 64)
    assert not np.any(out)


def test_zero_motion_planner_picks_forward():
    b = models.init_bundle(1)
    for k in list(b.params):
        if k.startswith("mp."):
            b.params[k] = np.zeros_like(b.params[k])
    logits = models.classify_action(b, np.ones(64), np.ones(64))
    assert np.array_equal(logits, np.zeros(3))
    assert models.argmax_action(logits) == FORWARD


def test_motion_planner_is_order_sensitive():
    b = models.init_bundle(2)
    rng = np.random.default_rng(1)
    f, g = rng.normal(size=64), rng.normal(size=64)
    assert not np.allclose(models.classify_action(b, f, g), models.classify_action(b, g, f))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=3), st.integers(-10**6, 10**6))
def test_argmax_shift_invariant(logits, c):
    # integer-valued logits keep the shifted values exact
    x = np.array(logits, dtype=np.float64)
    assert models.argmax_action(x) == models.argmax_action(x + c)


def test_tie_rule_prefers_lower_action():
    assert models.argmax_action([1.0, 1.0, 0.0]) == FORWARD
    assert models.argmax_action([0.0, 2.0, 2.0]) == LEFT


def test_with_history_seeds_first_layer_only():
    b = models.init_bundle(4, Mode.WITH_HISTORY)
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(11, 64))
    hist = rng.normal(size=(10, 64))
    a = models.policy_logits(b, feats, hist)
    c = models.policy_logits(b, feats, None)
    assert not np.allclose(a, c)
    hs_plain, _ = nn.lstm_forward(b.params, "tp.lstm", feats[None])
    hs_hist, _ = nn.lstm_forward(b.params, "tp.lstm", feats[None], hist.mean(axis=0)[None])
    fhat = nn.mlp_forward(b.params, "tp.head", hs_hist[0, -1])[0]
    assert np.allclose(a, models.classify_action(b, feats[-1], fhat))
    assert not np.allclose(hs_plain, hs_hist)


def test_sample_history_even_spacing():
    feats = np.arange(40.0)[:, None]
    idx = models.sample_history(feats)[:, 0]
    assert len(idx) == 10 and idx[0] == 0 and idx[-1] == 39
    assert np.all(np.diff(idx) > 0)


def test_no_feat_hallu_has_no_motion_planner():
    b = models.init_bundle(0, Mode.NO_FEAT_HALLU)
    assert "mp.W0" not in b.params and "tp.act.W0" in b.params
    assert models.policy_logits(b, np.random.default_rng(0).normal(size=(11, 64))).shape == (3,)


# -- losses per mode ---------------------------------------------------------


@pytest.mark.parametrize("mode", list(Mode))
def test_gradients_every_mode(mode):
    rng = np.random.default_rng(10)
    b = models.init_bundle(0, mode, **TINY)
    closure, vec = loss_closure(b, tiny_batch(rng, mode), mode)
    assert nn.gradient_check(closure, vec, eps=1e-5) < 1e-4


def test_planted_weights_give_zero_task_loss():
    b = models.init_bundle(0, **TINY)
    p = b.params
    for k in ("enc.W0", "enc.W1", "tp.head.W0"):
        p[k] = np.zeros_like(p[k])
    e = np.zeros(8)
    e[2] = 1.0
    p["enc.b1"] = e.copy()  # every feature equals e
    p["tp.head.b0"] = e.copy()  # every hallucination equals e
    rng = np.random.default_rng(0)
    batch = Batch(rng.uniform(size=(3, 12, 144)), rng.integers(3, size=(3, 11)))
    lt, lm, _ = models.window_loss(p, batch, Mode.FULL)
    assert lt == 0.0 and lm > 0


def test_supervision_schedule():
    assert models.supervised_steps(Mode.FULL) == (tuple(range(11)), tuple(range(11)), ())
    assert models.supervised_steps(Mode.NO_DEEP_SUP) == ((10,), (10,), ())
    assert models.supervised_steps(Mode.NO_FEAT_DEEP_SUP)[0] == (10,)
    assert models.supervised_steps(Mode.NO_ACT_DEEP_SUP)[1] == (10,)
    assert models.supervised_steps(Mode.LSTM_ACT_REGU) == ((), tuple(range(11)), tuple(range(11)))


def test_mode_changes_loss_graph():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(4, 12, 144))
    acts = rng.integers(3, size=(4, 11))
    other = acts.copy()
    other[:, :10] = (other[:, :10] + 1) % 3  # alter every per-step target but the last
    for mode, changes in ((Mode.FULL, True), (Mode.NO_DEEP_SUP, False), (Mode.NO_ACT_DEEP_SUP, False)):
        b = models.init_bundle(0, mode)
        _, a, _ = models.window_loss(b.params, Batch(x, acts), mode, with_grad=False)
        _, c, _ = models.window_loss(b.params, Batch(x, other), mode, with_grad=False)
        assert (a != c) == changes, mode


def test_lstm_act_regu_action_loss_counts_as_task_loss():
    rng = np.random.default_rng(4)
    b = models.init_bundle(0, Mode.LSTM_ACT_REGU)
    x = rng.uniform(size=(2, 12, 144))
    acts = rng.integers(3, size=(2, 11))
    lt, lm, _ = models.window_loss(b.params, Batch(x, acts), Mode.LSTM_ACT_REGU, with_grad=False)
    b.params["tp.act.W0"] = np.zeros_like(b.params["tp.act.W0"])
    b.params["tp.act.b0"] = np.zeros_like(b.params["tp.act.b0"])
    lt0, lm0, _ = models.window_loss(b.params, Batch(x, acts), Mode.LSTM_ACT_REGU, with_grad=False)
    assert lt0 == pytest.approx(11 * math.log(3))
    assert lm0 == lm and lt != lt0


# -- training windows --------------------------------------------------------


def _short_demo(n_obs):
    obs = [gw.Observation(np.full(72, 1.0), np.zeros(72, dtype=np.int64), 0)] * n_obs
    return expert.Demonstration(gw.Pose(0.5, 0.5, 0), [FORWARD] * (n_obs - 1), obs)


def test_twelve_observation_demo_has_one_window():
    stream = models.make_training_windows([_short_demo(12)], seed=0)
    assert {next(stream) for _ in range(50)} == {(0, 0)}


def test_short_demo_is_skipped(caplog):
    data = models.DemoData([_short_demo(11), _short_demo(15)])
    assert len(data.inputs) == 1
    assert "skipping" in caplog.text


def test_window_indices_in_range_and_uniform():
    demos = [_short_demo(30), _short_demo(20)]
    stream = models.make_training_windows(demos, seed=4)
    draws = np.array([next(stream) for _ in range(100_000)])
    lengths = [30, 20]
    assert np.all(draws[:, 1] >= 0)
    assert all(s + 12 <= lengths[k] for k, s in draws[::97])
    assert np.all(draws[:, 1] + 12 <= np.where(draws[:, 0] == 0, 30, 20))
    counts = np.unique(draws[:, 0] * 100 + draws[:, 1], return_counts=True)[1]
    assert len(counts) == 19 + 9
    assert stats.chisquare(counts).pvalue > 0.01


def test_epoch_draw_count():
    data = models.DemoData([_short_demo(56), _short_demo(23)])
    assert data.transitions == 55 + 22
    assert data.draws_per_epoch() == 77 // 11


# -- training ----------------------------------------------------------------


def test_overfit_hallucination(overfit_bundle, toy_demos):
    F = models.encode_inputs(overfit_bundle.params, models.observation_inputs(toy_demos[0].observations))
    err = [np.linalg.norm(models.hallucinate(overfit_bundle, F[s : s + 10])[-1] - F[s + 10]) for s in range(len(F) - 10)]
    assert np.mean(err) < 0.2


def test_corridor_forward_after_overfit():
    rows = ["0" * 44, "0" + "." * 42 + "0", "0" + "." * 42 + "0", "0" * 44]
    w = gw.load_world("\n".join(rows))
    start = gw.Pose(*w.cell_center(1, 1), 0)
    actions = [FORWARD] * 40
    obs, poses = [gw.observe(w, start)], [start]
    for a in actions:
        poses.append(gw.step_pose(w, poses[-1], a, Locomotion()))
        obs.append(gw.observe(w, poses[-1]))
    demo = expert.Demonstration(start, actions, obs)
    b = models.train([demo] * 4, models.TrainConfig(epochs=150, seed=1))
    F = models.encode_inputs(b.params, models.observation_inputs(obs))
    probs = [nn.softmax(models.classify_action(b, F[t], F[t + 1]))[FORWARD] for t in range(len(F) - 1)]
    assert min(probs) > 0.9


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_training_halves_loss(seed):
    w = gw.generate_world(5, size=(48, 48))
    demos = [expert.generate_demonstration(w, expert.sample_anchors(w, 1.5, s), s) for s in range(3)]
    b = models.train(demos, models.TrainConfig(epochs=70, seed=seed))
    first, last = b.training_log[0], b.training_log[-1]
    assert last["L_T"] + last["L_M"] < 0.5 * (first["L_T"] + first["L_M"])
    assert len(b.training_log) == 70
    assert last["lr"] == 2.5e-4


def test_resume_matches_uninterrupted(toy_demos, tmp_path):
    cfg = models.TrainConfig(epochs=3, seed=5, **TINY)
    a = models.Trainer(toy_demos, cfg)
    for _ in range(4):
        a.step()
    path = tmp_path / "resume.ckpt"
    a.save(path)
    b = models.Trainer.load(path, toy_demos)
    assert b.bundle.header()["mode"] == "full" and b.bundle.header()["seed"] == 5
    la = a.step()
    lb = b.step()
    assert la == lb
    for k in a.bundle.params:
        assert np.array_equal(a.bundle.params[k], b.bundle.params[k])


def test_training_is_bit_reproducible(toy_demos):
    cfg = models.TrainConfig(epochs=2, seed=9, **TINY)
    a, b = models.train(toy_demos, cfg), models.train(toy_demos, cfg)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_nan_loss_aborts_with_checkpoint(toy_demos, tmp_path):
    tr = models.Trainer(toy_demos, models.TrainConfig(epochs=1, seed=0, **TINY))
    tr.bundle.params["tp.head.b0"][0] = np.nan
    diag = tmp_path / "diag.ckpt"
    with pytest.raises(models.TrainingError):
        tr.run(diag)
    assert diag.exists()


def test_bundle_and_log_files(toy_demos, tmp_path):
    b = models.train(toy_demos, models.TrainConfig(epochs=2, seed=0, mode="no-deep-sup", **TINY))
    models.save_bundle(b, tmp_path / "b.ckpt")
    back = models.load_bundle(tmp_path / "b.ckpt")
    assert back.mode is Mode.NO_DEEP_SUP and back.d == 8
    assert all(np.array_equal(back.params[k], b.params[k]) for k in b.params)
    models.write_training_log(b.training_log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,L_T,L_M,lr" and len(lines) == 3


# -- ActionAssigner ----------------------------------------------------------


def test_padding_rule():
    assert models.pad_actions([FORWARD, LEFT]) == [FORWARD, LEFT, STOP, STOP, STOP, STOP]
    assert models.strip_stops([FORWARD, STOP, LEFT, STOP, STOP]) == [FORWARD, STOP, LEFT]


def test_mined_pairs(toy_demos):
    pairs = models.mine_pairs(toy_demos)
    expected = sum(max(0, len(d) - g) for d in toy_demos for g in range(1, 7))
    assert len(pairs) == expected
    for k, i, j, tgt in pairs:
        assert 1 <= j - i <= 6
        assert models.strip_stops(tgt) == toy_demos[k].actions[i:j]
        if j - i == 6:
            assert STOP not in tgt


def test_assigner_output_length():
    b = models.init_bundle(0, **TINY)
    b.params.update(models.init_assigner(np.random.default_rng(0), 8, models.AssignerConfig()))
    rng = np.random.default_rng(1)
    for _ in range(5):
        assert len(models.assigner_predict(b, rng.normal(size=8), rng.normal(size=8))) == 6


def test_assigner_gradients():
    rng = np.random.default_rng(2)
    p = models.init_assigner(rng, 4, models.AssignerConfig(merge=6, head=5, hidden=3))
    fi, fj = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    tgt = rng.integers(4, size=(3, 6))
    names = sorted(p)

    def closure(vec):
        loss, g = models.assigner_loss(nn.unflatten(vec, p, names), fi, fj, tgt)
        return loss, nn.flatten(g, names)[0]

    assert nn.gradient_check(closure, nn.flatten(p, names)[0]) < 1e-4


def test_assigner_beats_uniform(assigner_bundle, toy_demos):
    assert models.assigner_eval(assigner_bundle, toy_demos) < math.log(4)
    assert assigner_bundle.has_assigner()


def test_assigner_identity_probe(assigner_bundle, toy_demos):
    hits = 0
    total = 0
    for d in toy_demos:
        F = models.encode_inputs(assigner_bundle.params, models.observation_inputs(d.observations))
        for f in F[::3]:
            hits += models.assigner_predict(assigner_bundle, f, f) == [STOP] * 6
            total += 1
    assert hits / total > 0.8


def test_rotation_pairs_are_short_turns(toy_demos):
    for k, i, off, tgt in models.rotation_pairs(toy_demos[:1], per_obs=3, seed=0)[:60]:
        turns = models.strip_stops(tgt)
        assert 1 <= len(turns) <= 6
        assert len(set(turns)) == 1
        n = off // 10
        assert turns[0] == (LEFT if n <= 36 - n else 2)
