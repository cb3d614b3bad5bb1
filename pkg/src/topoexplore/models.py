"""Learned planners: encoder, TaskPlanner, MotionPlanner and ActionAssigner.

The encoder maps an egocentric panorama to a unit-norm feature.  The task
planner (two-layer LSTM plus a linear head) hallucinates the feature of the
next observation at every step of a window; the motion planner classifies
the action that leads from the current feature to the hallucinated one.
Training is deeply supervised: per-step hallucinations and per-step actions
all contribute to the loss unless an ablation mode removes them.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .gridworld import LEFT, MAX_RANGE, MISS_TEXTURE, RIGHT, STOP, Observation

log = logging.getLogger(__name__)

WINDOW_OBS = 12  # f_{t-10} .. f_{t+1}
WINDOW_STEPS = 11  # LSTM inputs f_{t-10} .. f_t
HISTORY_SAMPLES = 10
ASSIGNER_LEN = 6
N_ACTIONS = 3


class Mode(str, enum.Enum):
    FULL = "full"
    NO_DEEP_SUP = "no-deep-sup"
    NO_FEAT_DEEP_SUP = "no-feat-deep-sup"
    NO_ACT_DEEP_SUP = "no-act-deep-sup"
    LSTM_ACT_REGU = "lstm-act-regu"
    NO_FEAT_HALLU = "no-feat-hallu"
    WITH_HISTORY = "with-history"

    @property
    def uses_motion_planner(self) -> bool:
        return self is not Mode.NO_FEAT_HALLU

    @property
    def uses_action_head(self) -> bool:
        return self in (Mode.LSTM_ACT_REGU, Mode.NO_FEAT_HALLU)


# (feature-loss, motion-loss, lstm-action-loss) step selection: all, last, none
SUPERVISION = {
    Mode.FULL: ("all", "all", "none"),
    Mode.WITH_HISTORY: ("all", "all", "none"),
    Mode.NO_DEEP_SUP: ("last", "last", "none"),
    Mode.NO_FEAT_DEEP_SUP: ("last", "all", "none"),
    Mode.NO_ACT_DEEP_SUP: ("all", "last", "none"),
    Mode.LSTM_ACT_REGU: ("none", "all", "all"),
    Mode.NO_FEAT_HALLU: ("none", "none", "all"),
}


def supervised_steps(mode, steps: int = WINDOW_STEPS):
    """Indices of supervised steps for each loss term in a window of ``steps`` LSTM inputs."""
    pick = {"all": tuple(range(steps)), "last": (steps - 1,), "none": ()}
    return tuple(pick[s] for s in SUPERVISION[Mode(mode)])


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------------ features


def observation_input(obs: Observation) -> np.ndarray:
    """144-d encoder input from the panorama rolled to the agent heading."""
    depths, textures = obs.egocentric()
    return np.concatenate([np.asarray(depths) / MAX_RANGE, np.asarray(textures) / MISS_TEXTURE])


def observation_inputs(observations) -> np.ndarray:
    return np.stack([observation_input(o) for o in observations])


@dataclass
class ModelBundle:
    params: dict
    mode: Mode = Mode.FULL
    d: int = 64
    hidden: int = 64
    m: int = 10
    seed: int = 0

    def header(self) -> dict:
        return {"d": self.d, "hidden": self.hidden, "m": self.m, "mode": self.mode.value, "seed": self.seed}

    def has_assigner(self) -> bool:
        return "aa.merge.W0" in self.params


def init_bundle(
    seed: int = 0,
    mode: Mode | str = Mode.FULL,
    d: int = 64,
    hidden: int = 64,
    enc_hidden: int = 128,
    mp_hidden: int = 64,
    m: int = 10,
) -> ModelBundle:
    mode = Mode(mode)
    if mode is Mode.WITH_HISTORY and hidden != d:
        raise ValueError("history injection needs hidden width == feature width")
    rng = np.random.default_rng(seed)
    p = {}
    p.update(nn.init_mlp(rng, "enc", [2 * 72, enc_hidden, d]))
    p.update(nn.init_lstm(rng, "tp.lstm", d, hidden, layers=2))
    if mode is not Mode.NO_FEAT_HALLU:
        p.update(nn.init_mlp(rng, "tp.head", [hidden, d]))
        p.update(nn.init_mlp(rng, "mp", [2 * d, mp_hidden, N_ACTIONS]))
    if mode.uses_action_head:
        p.update(nn.init_mlp(rng, "tp.act", [hidden, N_ACTIONS]))
    return ModelBundle(p, mode, d, hidden, m, seed)


def _normalize(z):
    norm = np.sqrt(np.sum(z * z, axis=-1, keepdims=True))
    return z / norm, norm


def _normalize_backward(y, norm, dy):
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / norm


def encode_inputs(params: dict, x: np.ndarray) -> np.ndarray:
    z, _ = nn.mlp_forward(params, "enc", x)
    return _normalize(z)[0]


def encode_observation(bundle: ModelBundle, obs: Observation) -> np.ndarray:
    return encode_inputs(bundle.params, observation_input(obs))


def hallucinate(bundle: ModelBundle, features, h0=None) -> np.ndarray:
    """One hallucinated next feature per input step; the last one is f_hat_{t+1}."""
    feats = np.asarray(features, dtype=np.float64)
    hs, _ = nn.lstm_forward(bundle.params, "tp.lstm", feats[None], h0_first=None if h0 is None else h0[None])
    if "tp.head.W0" not in bundle.params:
        raise ValueError(f"mode {bundle.mode.value} has no feature head")
    out, _ = nn.mlp_forward(bundle.params, "tp.head", hs[0])
    return out


def classify_action(bundle: ModelBundle, f_t, f_next) -> np.ndarray:
    x = np.concatenate([np.asarray(f_t, float), np.asarray(f_next, float)])
    out, _ = nn.mlp_forward(bundle.params, "mp", x)
    return out


def policy_logits(bundle: ModelBundle, features, history=None) -> np.ndarray:
    """Action logits for the last step of a feature window."""
    feats = np.asarray(features, dtype=np.float64)
    h0 = None
    if bundle.mode is Mode.WITH_HISTORY and history is not None and len(history):
        h0 = np.mean(np.asarray(history), axis=0)[None]
    hs, _ = nn.lstm_forward(bundle.params, "tp.lstm", feats[None], h0_first=h0)
    top = hs[0, -1]
    if bundle.mode is Mode.NO_FEAT_HALLU:
        return nn.mlp_forward(bundle.params, "tp.act", top)[0]
    fhat = nn.mlp_forward(bundle.params, "tp.head", top)[0]
    return classify_action(bundle, feats[-1], fhat)


def argmax_action(logits) -> int:
    # np.argmax keeps the first maximum: forward < left < right on ties.
    return int(np.argmax(logits))


def sample_history(features: np.ndarray, n: int = HISTORY_SAMPLES):
    if len(features) == 0:
        return features[:0]
    idx = np.linspace(0, len(features) - 1, n).round().astype(int)
    return features[idx]


# -------------------------------------------------------------- loss graph


@dataclass
class Batch:
    x: np.ndarray  # (B, 12, 144)
    actions: np.ndarray  # (B, 11)
    history: np.ndarray | None = None  # (B, 10, 144)
    history_mask: np.ndarray | None = None  # (B,)


def window_loss(params: dict, batch: Batch, mode: Mode, with_grad: bool = True):
    """Returns (L_T, L_M, grads) for a batch of windows under ``mode``.

    ``batch.x`` holds T+1 encoder inputs per window and ``batch.actions`` the
    T actions between them; training uses T = 11.
    """
    mode = Mode(mode)
    T = batch.x.shape[1] - 1
    if T < 1 or batch.actions.shape[1] != T:
        raise nn.ShapeError("window needs T+1 observations and T actions")
    feat_steps, motion_steps, act_steps = supervised_steps(mode, T)
    z, enc_cache = nn.mlp_forward(params, "enc", batch.x)
    F, norm = _normalize(z)
    h0 = None
    if mode is Mode.WITH_HISTORY:
        zh, hist_cache = nn.mlp_forward(params, "enc", batch.history)
        FH, hnorm = _normalize(zh)
        mask = batch.history_mask.astype(float)[:, None]
        h0 = FH.mean(axis=1) * mask
    hs, lstm_cache = nn.lstm_forward(params, "tp.lstm", F[:, :T], h0_first=h0)

    grads: dict = {}
    dF = np.zeros_like(F)
    dhs = np.zeros_like(hs)
    loss_t = 0.0
    loss_m = 0.0

    if mode is not Mode.NO_FEAT_HALLU:
        fhat, head_cache = nn.mlp_forward(params, "tp.head", hs)
        dfhat = np.zeros_like(fhat)
        for k in feat_steps:
            val, g = nn.l2_loss(fhat[:, k], F[:, k + 1])
            loss_t += val
            dfhat[:, k] += g
            dF[:, k + 1] -= g
        if motion_steps:
            mp_in = np.concatenate([F[:, :T], fhat], axis=-1)
            logits, mp_cache = nn.mlp_forward(params, "mp", mp_in)
            dlogits = np.zeros_like(logits)
            for k in motion_steps:
                val, g = nn.cross_entropy(logits[:, k], batch.actions[:, k])
                loss_m += val
                dlogits[:, k] = g
            if with_grad:
                dmp_in = nn.mlp_backward(params, mp_cache, dlogits, grads)
                dF[:, :T] += dmp_in[..., : F.shape[-1]]
                dfhat += dmp_in[..., F.shape[-1] :]
        if with_grad:
            dhs += nn.mlp_backward(params, head_cache, dfhat, grads)

    if act_steps:
        alog, act_cache = nn.mlp_forward(params, "tp.act", hs)
        dalog = np.zeros_like(alog)
        act_loss = 0.0
        for k in act_steps:
            val, g = nn.cross_entropy(alog[:, k], batch.actions[:, k])
            act_loss += val
            dalog[:, k] = g
        if mode is Mode.LSTM_ACT_REGU:
            loss_t += act_loss
        else:
            loss_m += act_loss
        if with_grad:
            dhs += nn.mlp_backward(params, act_cache, dalog, grads)

    if not with_grad:
        return loss_t, loss_m, None

    dx, dh0 = nn.lstm_backward(params, lstm_cache, dhs, grads)
    dF[:, :T] += dx
    dz = _normalize_backward(F, norm, dF)
    nn.mlp_backward(params, enc_cache, dz, grads)
    if mode is Mode.WITH_HISTORY:
        dFH = np.repeat((dh0 * mask / FH.shape[1])[:, None, :], FH.shape[1], axis=1)
        dzh = _normalize_backward(FH, hnorm, dFH)
        nn.mlp_backward(params, hist_cache, dzh, grads)
    for name in params:
        if name.startswith(("enc.", "tp.", "mp.")) and name not in grads:
            grads[name] = np.zeros_like(params[name])
    return loss_t, loss_m, grads


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    mode: Mode = Mode.FULL
    epochs: int = 70
    lr: float = 5e-4
    decay_every: int = 40
    decay_factor: float = 0.5
    batch: int = 32
    seed: int = 0
    d: int = 64
    hidden: int = 64
    enc_hidden: int = 128
    mp_hidden: int = 64
    clip: float = 5.0

    def __post_init__(self):
        self.mode = Mode(self.mode)


class DemoData:
    """Encoder inputs and actions of a set of demonstrations, ready for sampling."""

    def __init__(self, demos):
        self.inputs = []
        self.actions = []
        for demo in demos:
            if len(demo.observations) < WINDOW_OBS:
                log.warning("skipping demonstration of length %d (< %d)", len(demo.observations), WINDOW_OBS)
                continue
            self.inputs.append(observation_inputs(demo.observations))
            self.actions.append(np.asarray(demo.actions, dtype=np.int64))
        if not self.inputs:
            raise ValueError("no demonstration is long enough for a training window")
        self.windows = np.array(
            [(k, s) for k, x in enumerate(self.inputs) for s in range(len(x) - WINDOW_OBS + 1)],
            dtype=np.int64,
        )
        self.transitions = sum(len(a) for a in self.actions)

    def draws_per_epoch(self) -> int:
        return max(1, self.transitions // WINDOW_STEPS)


def make_training_windows(demos, seed: int = 0):
    """Endless stream of (demo index, window start) drawn uniformly over valid windows."""
    data = demos if isinstance(demos, DemoData) else DemoData(demos)
    rng = np.random.default_rng(seed)
    while True:
        k = int(rng.integers(len(data.windows)))
        yield tuple(int(v) for v in data.windows[k])


def assemble_batch(data: DemoData, picks, with_history: bool) -> Batch:
    xs, acts, hist, mask = [], [], [], []
    for k, s in picks:
        xs.append(data.inputs[k][s : s + WINDOW_OBS])
        acts.append(data.actions[k][s : s + WINDOW_STEPS])
        if with_history:
            past = data.inputs[k][:s]
            mask.append(s > 0)
            hist.append(sample_history(past) if s > 0 else np.zeros((HISTORY_SAMPLES, data.inputs[k].shape[1])) + 1.0)
    batch = Batch(np.stack(xs), np.stack(acts))
    if with_history:
        batch.history = np.stack(hist)
        batch.history_mask = np.array(mask)
    return batch


class Trainer:
    """Stateful deterministic training run; one :meth:`step` is one Adam update."""

    def __init__(self, demos, config: TrainConfig):
        self.config = config
        self.data = demos if isinstance(demos, DemoData) else DemoData(demos)
        self.bundle = init_bundle(
            config.seed, config.mode, config.d, config.hidden, config.enc_hidden, config.mp_hidden
        )
        self.adam = nn.AdamState(config.lr, decay_every=config.decay_every, decay_factor=config.decay_factor)
        self.rng = np.random.default_rng(config.seed + 1)
        self.epoch = 0
        self.batch_in_epoch = 0
        self.history: list[dict] = []
        self._acc = [0.0, 0.0, 0]

    @property
    def batches_per_epoch(self) -> int:
        return max(1, self.data.draws_per_epoch() // self.config.batch)

    def step(self):
        cfg = self.config
        idx = self.rng.integers(len(self.data.windows), size=cfg.batch)
        picks = [tuple(int(v) for v in self.data.windows[k]) for k in idx]
        batch = assemble_batch(self.data, picks, cfg.mode is Mode.WITH_HISTORY)
        lt, lm, grads = window_loss(self.bundle.params, batch, cfg.mode)
        if not (math.isfinite(lt) and math.isfinite(lm)):
            raise TrainingError(f"non-finite loss at epoch {self.epoch} (L_T={lt}, L_M={lm})")
        nn.clip_global_norm(grads, cfg.clip)
        nn.adam_step(self.bundle.params, grads, self.adam, self.epoch)
        self._acc[0] += lt
        self._acc[1] += lm
        self._acc[2] += 1
        self.batch_in_epoch += 1
        if self.batch_in_epoch >= self.batches_per_epoch:
            n = self._acc[2]
            self.history.append(
                {
                    "epoch": self.epoch + 1,
                    "L_T": self._acc[0] / n,
                    "L_M": self._acc[1] / n,
                    "lr": self.adam.effective_lr(self.epoch),
                }
            )
            self._acc = [0.0, 0.0, 0]
            self.epoch += 1
            self.batch_in_epoch = 0
        return lt, lm

    def run(self, diag_path=None) -> ModelBundle:
        try:
            while self.epoch < self.config.epochs:
                self.step()
        except (TrainingError, nn.NumericError):
            if diag_path is not None:
                self.save(diag_path)
            raise
        return self.bundle

    # persistence -----------------------------------------------------------

    def save(self, path):
        header = self.bundle.header()
        header.update(
            {
                "epoch": self.epoch,
                "batch_in_epoch": self.batch_in_epoch,
                "adam_step": self.adam.step,
                "rng": self.rng.bit_generator.state,
                "acc": self._acc,
                "train": _config_dict(self.config),
                "log": self.history,
            }
        )
        extra = {f"m.{k}": v for k, v in self.adam.m.items()}
        extra.update({f"v.{k}": v for k, v in self.adam.v.items()})
        nn.save_checkpoint(path, self.bundle.params, header, extra)

    @classmethod
    def load(cls, path, demos) -> "Trainer":
        params, header, extra = nn.load_checkpoint(path)
        cfg = TrainConfig(**header["train"])
        tr = cls(demos, cfg)
        tr.bundle = ModelBundle(params, Mode(header["mode"]), header["d"], header["hidden"], header["m"], header["seed"])
        tr.epoch = header["epoch"]
        tr.batch_in_epoch = header["batch_in_epoch"]
        tr.adam.step = header["adam_step"]
        tr.adam.m = {k[2:]: v for k, v in extra.items() if k.startswith("m.")}
        tr.adam.v = {k[2:]: v for k, v in extra.items() if k.startswith("v.")}
        tr.rng.bit_generator.state = header["rng"]
        tr._acc = list(header["acc"])
        tr.history = header["log"]
        return tr


def _config_dict(cfg) -> dict:
    out = {}
    for k, v in vars(cfg).items():
        out[k] = v.value if isinstance(v, enum.Enum) else v
    return out


def train(demos, config: TrainConfig | None = None, diag_path=None) -> ModelBundle:
    trainer = Trainer(demos, config or TrainConfig())
    bundle = trainer.run(diag_path)
    bundle.training_log = trainer.history
    return bundle


def write_training_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L_T", "L_M", "lr"])
        for r in rows:
            w.writerow([r["epoch"], repr(r["L_T"]), repr(r["L_M"]), repr(r["lr"])])


def save_bundle(bundle: ModelBundle, path, extra_header: dict | None = None):
    header = bundle.header()
    header.update(extra_header or {})
    nn.save_checkpoint(path, bundle.params, header)


def load_bundle(path) -> ModelBundle:
    params, header, _ = nn.load_checkpoint(path)
    return ModelBundle(params, Mode(header["mode"]), header["d"], header["hidden"], header["m"], header["seed"])


# ------------------------------------------------------------ ActionAssigner


@dataclass
class AssignerConfig:
    epochs: int = 70
    lr: float = 5e-4
    decay_every: int = 40
    decay_factor: float = 0.5
    batch: int = 32
    seed: int = 0
    merge: int = 64
    head: int = 16
    hidden: int = 16
    identity_pairs: bool = True
    identity_repeat: int = 6  # identity pairs weigh as much as all mined gaps together
    rotation_pairs: int = 2  # per observation; 0 disables
    clip: float = 5.0


def init_assigner(rng, d: int, cfg: AssignerConfig) -> dict:
    p = {}
    p.update(nn.init_mlp(rng, "aa.merge", [2 * d, cfg.merge]))
    for k in range(ASSIGNER_LEN):
        p.update(nn.init_mlp(rng, f"aa.head{k}", [cfg.merge, cfg.head]))
    p.update(nn.init_lstm(rng, "aa.fw", cfg.head, cfg.hidden))
    p.update(nn.init_lstm(rng, "aa.bw", cfg.head, cfg.hidden))
    p.update(nn.init_mlp(rng, "aa.cls", [2 * cfg.hidden, 4]))
    return p


def assigner_forward(params: dict, fi: np.ndarray, fj: np.ndarray):
    """Logits (B, 6, 4) for feature pairs of shape (B, d); returns (logits, cache)."""
    x = np.concatenate([fi, fj], axis=-1)
    pre, mcache = nn.mlp_forward(params, "aa.merge", x)
    merged = np.tanh(pre)
    seq, hcaches = [], []
    for k in range(ASSIGNER_LEN):
        h, c = nn.mlp_forward(params, f"aa.head{k}", merged)
        seq.append(np.tanh(h))
        hcaches.append(c)
    seq = np.stack(seq, axis=1)  # (B, 6, head)
    fw, fcache = nn.lstm_forward(params, "aa.fw", seq)
    bw_rev, bcache = nn.lstm_forward(params, "aa.bw", seq[:, ::-1])
    both = np.concatenate([fw, bw_rev[:, ::-1]], axis=-1)
    logits, ccache = nn.mlp_forward(params, "aa.cls", both)
    return logits, (mcache, merged, hcaches, seq, fcache, bcache, ccache, fw.shape[-1])


def assigner_backward(params, cache, dlogits, grads):
    mcache, merged, hcaches, seq, fcache, bcache, ccache, H = cache
    dboth = nn.mlp_backward(params, ccache, dlogits, grads)
    dseq_f, _ = nn.lstm_backward(params, fcache, dboth[..., :H], grads)
    dseq_b, _ = nn.lstm_backward(params, bcache, dboth[..., H:][:, ::-1], grads)
    dseq = dseq_f + dseq_b[:, ::-1]
    dmerged = np.zeros_like(merged)
    for k in range(ASSIGNER_LEN):
        dh = dseq[:, k] * (1.0 - seq[:, k] ** 2)
        dmerged += nn.mlp_backward(params, hcaches[k], dh, grads)
    dpre = dmerged * (1.0 - merged**2)
    return nn.mlp_backward(params, mcache, dpre, grads)


def pad_actions(actions, length: int = ASSIGNER_LEN) -> list:
    actions = list(actions)
    if len(actions) > length:
        raise ValueError(f"action list longer than {length}")
    return actions + [STOP] * (length - len(actions))


def strip_stops(seq) -> list:
    seq = list(seq)
    while seq and seq[-1] == STOP:
        seq.pop()
    return seq


def mine_pairs(demos, max_gap: int = ASSIGNER_LEN, identity: bool = False):
    """(demo index, i, j, padded targets) for every pair with 1 <= j - i <= max_gap."""
    pairs = []
    for k, demo in enumerate(demos):
        n = len(demo.observations)
        if identity:
            for i in range(n):
                pairs.append((k, i, i, pad_actions([])))
        for g in range(1, max_gap + 1):
            for i in range(n - g):
                pairs.append((k, i, i + g, pad_actions(demo.actions[i : i + g])))
    return pairs


def assigner_loss(params, fi, fj, targets, with_grad=True):
    logits, cache = assigner_forward(params, fi, fj)
    total = 0.0
    dlogits = np.zeros_like(logits)
    for k in range(ASSIGNER_LEN):
        val, g = nn.cross_entropy(logits[:, k], targets[:, k])
        total += val
        dlogits[:, k] = g
    if not with_grad:
        return total, None
    grads: dict = {}
    assigner_backward(params, cache, dlogits, grads)
    return total, grads


def rotation_pairs(demos, per_obs: int = 2, seed: int = 0):
    """In-place rotation pairs: (demo, i, heading offset, padded turn targets).

    The target is the shorter turn sequence between the two headings,
    truncated to six actions; longer rotations are finished by the
    navigator, which re-aligns its heading after every loop edge.
    """
    rng = np.random.default_rng([seed, 11])
    out = []
    for k, demo in enumerate(demos):
        turn = demo.locomotion.turn_angle
        steps = 360 // turn
        for i in range(len(demo.observations)):
            for n in rng.integers(1, steps, size=per_obs):
                n = int(n)
                seq = [LEFT] * n if n <= steps - n else [RIGHT] * (steps - n)
                out.append((k, i, n * turn, pad_actions(seq[:ASSIGNER_LEN])))
    return out


def _rotated(obs: Observation, offset: int) -> Observation:
    return Observation(obs.depths, obs.textures, (obs.heading + offset) % 360)


def train_assigner(demos, bundle: ModelBundle, config: AssignerConfig | None = None) -> dict:
    """Fit the ActionAssigner on mined demonstration pairs with the encoder frozen.

    Besides the mined pairs, the training set holds identity pairs (target
    all STOP) and in-place rotation pairs when enabled.  Parameters are
    merged into ``bundle.params`` and also returned.
    """
    cfg = config or AssignerConfig()
    demos = [d for d in demos if len(d.observations) > 1]
    if not demos:
        raise ValueError("demonstrations too short to mine pairs")
    table = [encode_inputs(bundle.params, observation_inputs(d.observations)) for d in demos]
    offsets = np.cumsum([0] + [len(f) for f in table])
    rows_i, rows_j, targets = [], [], []
    for k, i, j, tgt in mine_pairs(demos, identity=cfg.identity_pairs):
        for _ in range(cfg.identity_repeat if i == j else 1):
            rows_i.append(offsets[k] + i)
            rows_j.append(offsets[k] + j)
            targets.append(tgt)
    if cfg.rotation_pairs:
        rot = rotation_pairs(demos, cfg.rotation_pairs, cfg.seed)
        rot_obs = [_rotated(demos[k].observations[i], off) for k, i, off, _ in rot]
        base = offsets[-1]
        table.append(encode_inputs(bundle.params, observation_inputs(rot_obs)))
        for n, (k, i, _, tgt) in enumerate(rot):
            rows_i.append(offsets[k] + i)
            rows_j.append(base + n)
            targets.append(tgt)
    feats = np.concatenate(table)
    rows_i, rows_j = np.array(rows_i), np.array(rows_j)
    targets = np.array(targets, dtype=np.int64)
    rng = np.random.default_rng(cfg.seed + 7)
    params = init_assigner(rng, bundle.d, cfg)
    adam = nn.AdamState(cfg.lr, decay_every=cfg.decay_every, decay_factor=cfg.decay_factor)
    batches = max(1, len(targets) // WINDOW_STEPS // cfg.batch)
    history = []
    for epoch in range(cfg.epochs):
        acc = 0.0
        for _ in range(batches):
            sel = rng.integers(len(targets), size=cfg.batch)
            loss, grads = assigner_loss(params, feats[rows_i[sel]], feats[rows_j[sel]], targets[sel])
            nn.clip_global_norm(grads, cfg.clip)
            nn.adam_step(params, grads, adam, epoch)
            acc += loss
        history.append({"epoch": epoch + 1, "loss": acc / batches / ASSIGNER_LEN})
    bundle.params.update(params)
    bundle.assigner_log = history
    return params


def assigner_predict(bundle: ModelBundle, f_i, f_j) -> list:
    """Six-slot action prediction (0 forward, 1 left, 2 right, 3 STOP)."""
    logits, _ = assigner_forward(bundle.params, np.asarray(f_i, float)[None], np.asarray(f_j, float)[None])
    return [int(np.argmax(row)) for row in logits[0]]


def assigner_eval(bundle: ModelBundle, demos, identity: bool = False) -> float:
    """Mean per-position cross-entropy over all mined pairs."""
    feats = [encode_inputs(bundle.params, observation_inputs(d.observations)) for d in demos]
    pairs = mine_pairs(demos, identity=identity)
    fi = np.stack([feats[k][i] for k, i, _, _ in pairs])
    fj = np.stack([feats[k][j] for k, _, j, _ in pairs])
    targets = np.array([p[3] for p in pairs], dtype=np.int64)
    total, _ = assigner_loss(bundle.params, fi, fj, targets, with_grad=False)
    return total / ASSIGNER_LEN


__all__ = [
    "Mode",
    "ModelBundle",
    "TrainConfig",
    "AssignerConfig",
    "Trainer",
    "TrainingError",
    "init_bundle",
    "observation_input",
    "encode_observation",
    "hallucinate",
    "classify_action",
    "policy_logits",
    "window_loss",
    "make_training_windows",
    "train",
    "write_training_log",
    "save_bundle",
    "load_bundle",
    "train_assigner",
    "mine_pairs",
    "assigner_predict",
    "strip_stops",
]
