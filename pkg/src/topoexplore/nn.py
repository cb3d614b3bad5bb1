"""Small float64 neural-network kernel.

Dense stacks, gated LSTM layers with backpropagation through time, the two
losses used for training, Adam with step decay, finite-difference gradient
checking and a text checkpoint format.  Parameters live in plain dicts that
map names to ``np.ndarray``; every forward function returns a cache that the
matching backward function consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when array shapes do not fit the parameters they meet."""


class NumericError(ValueError):
    """Raised on NaN or infinite values where finite ones are required."""


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- dense stacks


def init_mlp(rng, prefix: str, sizes) -> dict:
    params = {}
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.W{k}"] = uniform_init(rng, n_in, (n_in, n_out))
        params[f"{prefix}.b{k}"] = np.zeros(n_out)
    return params


def mlp_layers(params: dict, prefix: str) -> int:
    n = 0
    while f"{prefix}.W{n}" in params:
        n += 1
    return n


def mlp_forward(params: dict, prefix: str, x: np.ndarray):
    """Dense stack with tanh hidden activations and a linear last layer.

    ``x`` has shape (..., fan_in).  Returns (output, cache).
    """
    n = mlp_layers(params, prefix)
    if n == 0:
        raise ShapeError(f"no layers found under {prefix!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params[f"{prefix}.W0"].shape[0]:
        raise ShapeError(
            f"{prefix}: input width {x.shape[-1]} != fan-in "
            f"{params[f'{prefix}.W0'].shape[0]}"
        )
    lead = x.shape[:-1]
    h = x.reshape(-1, x.shape[-1])
    inputs = []
    for k in range(n):
        inputs.append(h)
        h = h @ params[f"{prefix}.W{k}"] + params[f"{prefix}.b{k}"]
        if k < n - 1:
            h = np.tanh(h)
    cache = (prefix, n, lead, inputs)
    return h.reshape(*lead, h.shape[-1]), cache


def mlp_backward(params: dict, cache, dout: np.ndarray, grads: dict):
    """Accumulate parameter gradients into ``grads``; return d(input)."""
    prefix, n, lead, inputs = cache
    d = dout.reshape(-1, dout.shape[-1])
    for k in reversed(range(n)):
        W = params[f"{prefix}.W{k}"]
        x = inputs[k]
        _accum(grads, f"{prefix}.W{k}", x.T @ d)
        _accum(grads, f"{prefix}.b{k}", d.sum(axis=0))
        d = d @ W.T
        if k > 0:
            # inputs[k] is tanh output of layer k-1
            d = d * (1.0 - x * x)
    return d.reshape(*lead, d.shape[-1])


def _accum(grads: dict, name: str, g: np.ndarray):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


# ------------------------------------------------------------------------ LSTM


def init_lstm(rng, prefix: str, n_in: int, n_hidden: int, layers: int = 1) -> dict:
    """Gate order is input, forget, candidate, output."""
    params = {}
    for layer in range(layers):
        fan_in = n_in if layer == 0 else n_hidden
        p = f"{prefix}.l{layer}"
        params[f"{p}.Wx"] = uniform_init(rng, fan_in, (fan_in, 4 * n_hidden))
        params[f"{p}.Wh"] = uniform_init(rng, n_hidden, (n_hidden, 4 * n_hidden))
        b = np.zeros(4 * n_hidden)
        b[n_hidden : 2 * n_hidden] = 1.0
        params[f"{p}.b"] = b
    return params


def lstm_layer_forward(params, p: str, x: np.ndarray, h0=None, c0=None):
    """One LSTM layer over x of shape (B, T, n_in); returns hs (B, T, H)."""
    Wx, Wh, b = params[f"{p}.Wx"], params[f"{p}.Wh"], params[f"{p}.b"]
    B, T, n_in = x.shape
    if n_in != Wx.shape[0]:
        raise ShapeError(f"{p}: input width {n_in} != {Wx.shape[0]}")
    H = Wh.shape[0]
    h = np.zeros((B, H)) if h0 is None else h0
    c = np.zeros((B, H)) if c0 is None else c0
    hs = np.empty((B, T, H))
    cs = np.empty((B, T, H))
    gates = np.empty((B, T, 4 * H))
    hprev = np.empty((B, T, H))
    cprev = np.empty((B, T, H))
    xw = x @ Wx + b
    for t in range(T):
        hprev[:, t] = h
        cprev[:, t] = c
        a = xw[:, t] + h @ Wh
        i = sigmoid(a[:, :H])
        f = sigmoid(a[:, H : 2 * H])
        g = np.tanh(a[:, 2 * H : 3 * H])
        o = sigmoid(a[:, 3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t, :H] = i
        gates[:, t, H : 2 * H] = f
        gates[:, t, 2 * H : 3 * H] = g
        gates[:, t, 3 * H :] = o
        hs[:, t] = h
        cs[:, t] = c
    cache = (p, x, hprev, cprev, gates, cs)
    return hs, cache


def lstm_layer_backward(params, cache, dhs: np.ndarray, grads: dict):
    """BPTT through one layer.  Returns (dx, dh0, dc0)."""
    p, x, hprev, cprev, gates, cs = cache
    Wx, Wh = params[f"{p}.Wx"], params[f"{p}.Wh"]
    B, T, H = dhs.shape
    da_all = np.empty((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(T)):
        i = gates[:, t, :H]
        f = gates[:, t, H : 2 * H]
        g = gates[:, t, 2 * H : 3 * H]
        o = gates[:, t, 3 * H :]
        tc = np.tanh(cs[:, t])
        dh = dhs[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * cprev[:, t]
        dg = dc * i
        da = da_all[:, t]
        da[:, :H] = di * i * (1.0 - i)
        da[:, H : 2 * H] = df * f * (1.0 - f)
        da[:, 2 * H : 3 * H] = dg * (1.0 - g * g)
        da[:, 3 * H :] = do * o * (1.0 - o)
        dh_next = da @ Wh.T
        dc_next = dc * f
    flat_da = da_all.reshape(B * T, 4 * H)
    _accum(grads, f"{p}.Wx", x.reshape(B * T, -1).T @ flat_da)
    _accum(grads, f"{p}.Wh", hprev.reshape(B * T, H).T @ flat_da)
    _accum(grads, f"{p}.b", flat_da.sum(axis=0))
    dx = da_all @ Wx.T
    return dx, dh_next, dc_next


def lstm_forward(params: dict, prefix: str, x: np.ndarray, h0_first=None):
    """Stacked LSTM; returns top-layer hidden states (B, T, H) and cache.

    ``x`` may be (T, n_in) for a single sequence or (B, T, n_in).
    ``h0_first`` optionally seeds the first layer's initial hidden state.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1] < 1:
        raise ShapeError("LSTM window must hold at least one step")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite LSTM input")
    caches = []
    h = x
    layer = 0
    while f"{prefix}.l{layer}.Wx" in params:
        h, c = lstm_layer_forward(
            params, f"{prefix}.l{layer}", h, h0=h0_first if layer == 0 else None
        )
        caches.append(c)
        layer += 1
    out = h[0] if single else h
    return out, (single, caches)


def lstm_backward(params: dict, cache, dhs: np.ndarray, grads: dict):
    """Returns (dx, dh0_first)."""
    single, caches = cache
    d = dhs[None] if single else dhs
    dh0 = None
    for c in reversed(caches):
        d, dh0, _ = lstm_layer_backward(params, c, d, grads)
    return (d[0] if single else d), (dh0[0] if single else dh0)


# ---------------------------------------------------------------------- losses


def l2_loss(pred, target):
    """Sum of squared differences over the last axis, mean over leading rows."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"l2 shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    if diff.ndim == 1:
        return float(diff @ diff), 2.0 * diff
    n = diff.reshape(-1, diff.shape[-1]).shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, target):
    """Mean of -log softmax(logits)[target] over rows; returns (loss, dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    single = logits.ndim == 1
    lg = logits.reshape(-1, logits.shape[-1])
    tg = target.reshape(-1).astype(np.int64)
    if lg.shape[0] != tg.shape[0]:
        raise ShapeError("one class index per logit row required")
    if np.any(tg < 0) or np.any(tg >= lg.shape[1]):
        raise ShapeError(f"class index out of range [0, {lg.shape[1]})")
    z = lg - lg.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(lg.shape[0])
    n = lg.shape[0]
    loss = float(np.sum(logsum - z[rows, tg]) / n)
    d = softmax(lg)
    d[rows, tg] -= 1.0
    d /= n
    return loss, (d[0] if single else d.reshape(logits.shape))


def loss_eval(kind: str, prediction, target):
    if kind == "l2":
        return l2_loss(prediction, target)
    if kind in ("cross-entropy", "ce"):
        return cross_entropy(prediction, target)
    raise ValueError(f"unknown loss kind {kind!r}")


# ------------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_every: int = 40
    decay_factor: float = 0.5
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def effective_lr(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** (epoch // self.decay_every)


def adam_step(params: dict, grads: dict, state: AdamState, epoch: int = 0) -> dict:
    """Bias-corrected Adam update, in place on ``params`` (also returned)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape mismatch for {name}")
    state.step += 1
    lr = state.effective_lr(epoch)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in sorted(grads):
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def clip_global_norm(grads: dict, cap: float = 5.0) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > cap:
        scale = cap / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ---------------------------------------------------------- gradient checking


def gradient_check(closure, point, eps: float = 1e-5, analytic=None, floor: float = 1e-6):
    """Max per-coordinate relative error between analytic and central-difference gradients.

    ``closure(x)`` returns ``(value, grad)``; ``analytic`` overrides the
    gradient it returns at ``point``.  The error of a coordinate is
    ``|analytic - numeric| / max(|numeric|, floor)``.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    x = np.array(point, dtype=np.float64)
    if analytic is None:
        _, analytic = closure(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    numeric = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = closure(x)[0]
        flat[k] = orig - eps
        fm = closure(x)[0]
        flat[k] = orig
        numeric[k] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(np.abs(numeric), floor)
    return float(err.max()) if err.size else 0.0


def flatten(params: dict, names=None):
    names = sorted(params) if names is None else list(names)
    vec = np.concatenate([params[n].reshape(-1) for n in names])
    return vec, names


def unflatten(vec: np.ndarray, template: dict, names) -> dict:
    out = dict(template)
    k = 0
    for n in names:
        size = template[n].size
        out[n] = vec[k : k + size].reshape(template[n].shape)
        k += size
    return out


# ----------------------------------------------------------------- checkpoints


def _fmt(values: np.ndarray) -> str:
    return " ".join("%.17g" % v for v in values.reshape(-1))


def save_checkpoint(path, params: dict, header: dict, extra: dict | None = None):
    """Write tensors as ``name shape...`` / ``values...`` line pairs.

    ``header`` is serialized into the first line as compact JSON; ``extra``
    tensors (optimizer moments) are stored after the parameters with their
    names prefixed by ``@``.
    """
    head = {"format": "topoexplore-checkpoint", "version": CHECKPOINT_VERSION}
    head.update(header)
    lines = [json.dumps(head, sort_keys=True, separators=(",", ":"))]
    for tag, tensors in (("", params), ("@", extra or {})):
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            shape = " ".join(str(s) for s in arr.shape)
            lines.append(f"{tag}{name} {shape}".rstrip())
            lines.append(_fmt(arr))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (params, header, extra)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty checkpoint")
    header = json.loads(lines[0])
    if header.get("format") != "topoexplore-checkpoint":
        raise ValueError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {header.get('version')}")
    params, extra = {}, {}
    body = lines[1:]
    if len(body) % 2:
        raise ValueError(f"{path}: truncated tensor record")
    for k in range(0, len(body), 2):
        parts = body[k].split()
        name, shape = parts[0], tuple(int(s) for s in parts[1:])
        vals = np.array([float(v) for v in body[k + 1].split()], dtype=np.float64)
        if vals.size != int(np.prod(shape)):
            raise ValueError(f"{path}: tensor {name} has {vals.size} values for shape {shape}")
        arr = vals.reshape(shape)
        if name.startswith("@"):
            extra[name[1:]] = arr
        else:
            params[name] = arr
    return params, header, extra
