"""Fixed-architecture Q-network in numpy with hand-written backprop.

Input is a 3-channel grid (prediction mean, kriging variance, position
indicator) plus the scalar progress t/T.  Four 3x3 "same" convolutions, each
followed by LeakyReLU and 2x2 max pooling, are flattened and concatenated
with an 8-unit embedding of the scalar, then pass through a hidden dense
layer and a linear output with one Q-value per action.

All arithmetic is float64.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_VERSION = 1
PAPER_CHANNELS = (64, 128, 256, 256)
DESK_CHANNELS = (8, 16, 32, 32)


def leaky_relu(x, alpha: float = 0.01):
    return np.where(x >= 0, x, alpha * x)


def leaky_relu_grad(x, alpha: float = 0.01):
    return np.where(x >= 0, 1.0, alpha)


def conv2d_same(x, w, b):
    """Stride-1, zero-padded 3x3 cross-correlation.  x: (N,C,H,W), w: (O,C,3,3)."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N,C,H,W,3,3)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N,H,W,O)
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None], xp


def conv2d_same_backward(dout, xp, w, need_dx: bool = True):
    n, o, h, wd = dout.shape
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # (O,C,3,3)
    db = dout.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dw, db
    dcols = np.tensordot(dout, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)  # (N,C,H,W,3,3)
    dxp = np.zeros_like(xp)
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di:di + h, dj:dj + wd] += dcols[..., di, dj]
    return dxp[:, :, 1:-1, 1:-1], dw, db


def maxpool2(x):
    """2x2/stride-2 max pool; returns (output, window argmax, first hit on ties)."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg


def maxpool2_backward(dout, arg, shape):
    n, c, h, w = shape
    dwin = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    return dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


@dataclass(frozen=True)
class QNetSpec:
    size: int = 32
    n_actions: int = 2
    channels: tuple = PAPER_CHANNELS
    in_channels: int = 3
    scalar_width: int = 8
    hidden: int = 1024
    alpha: float = 0.01
    channel_order: tuple = ("mean", "variance", "position")

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "channel_order", tuple(self.channel_order))
        div = 2 ** len(self.channels)
        if self.size < div or self.size % div:
            raise ValueError(f"input size {self.size} is not a multiple of {div}")
        if self.n_actions < 1:
            raise ValueError("need at least one action")

    @property
    def final_size(self) -> int:
        return self.size // 2 ** len(self.channels)

    @property
    def flatten_len(self) -> int:
        return self.final_size**2 * self.channels[-1]

    def layer_shapes(self) -> dict:
        shapes = {}
        cin = self.in_channels
        for i, cout in enumerate(self.channels):
            shapes[f"conv{i}.w"] = (cout, cin, 3, 3)
            shapes[f"conv{i}.b"] = (cout,)
            cin = cout
        shapes["scalar.w"] = (1, self.scalar_width)
        shapes["scalar.b"] = (self.scalar_width,)
        shapes["hidden.w"] = (self.flatten_len + self.scalar_width, self.hidden)
        shapes["hidden.b"] = (self.hidden,)
        shapes["out.w"] = (self.hidden, self.n_actions)
        shapes["out.b"] = (self.n_actions,)
        return shapes

    def fingerprint(self) -> str:
        desc = {"layers": [[k, list(v)] for k, v in self.layer_shapes().items()],
                "alpha": self.alpha, "channel_order": list(self.channel_order), "size": self.size}
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]


def init_params(spec: QNetSpec, seed: int = 0) -> dict:
    """He-style uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.layer_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            lim = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-lim, lim, size=shape)
    return params


@dataclass
class ForwardCache:
    convs: list = field(default_factory=list)  # (padded input, pre-activation, pool argmax)
    flat_shape: tuple = ()
    tn: np.ndarray | None = None
    s_pre: np.ndarray | None = None
    h0: np.ndarray | None = None
    h1_pre: np.ndarray | None = None
    h1: np.ndarray | None = None


class QNetwork:
    def __init__(self, spec: QNetSpec, params: dict | None = None, seed: int = 0):
        self.spec = spec
        self.params = params if params is not None else init_params(spec, seed)
        shapes = spec.layer_shapes()
        if set(shapes) != set(self.params):
            raise ValueError("parameter names do not match the architecture")
        for k, shp in shapes.items():
            if self.params[k].shape != tuple(shp):
                raise ValueError(f"{k}: expected shape {shp}, got {self.params[k].shape}")

    def copy(self) -> "QNetwork":
        return QNetwork(self.spec, {k: v.copy() for k, v in self.params.items()})

    def forward(self, grids, tn, cache: bool = False):
        """grids: (N,3,S,S), tn: (N,) -> Q-values (N,k); optionally the cache."""
        p, a = self.params, self.spec.alpha
        x = np.asarray(grids, dtype=float)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (self.spec.in_channels, self.spec.size, self.spec.size):
            raise ValueError(f"expected input (N,{self.spec.in_channels},{self.spec.size},"
                             f"{self.spec.size}), got {x.shape}")
        tn = np.asarray(tn, dtype=float).reshape(-1)
        c = ForwardCache()
        for i in range(len(self.spec.channels)):
            z, xp = conv2d_same(x, p[f"conv{i}.w"], p[f"conv{i}.b"])
            x, arg = maxpool2(leaky_relu(z, a))
            c.convs.append((xp, z, arg))
        c.flat_shape = x.shape
        flat = x.reshape(len(x), -1)
        s_pre = tn[:, None] @ p["scalar.w"] + p["scalar.b"]
        h0 = np.concatenate([flat, leaky_relu(s_pre, a)], axis=1)
        h1_pre = h0 @ p["hidden.w"] + p["hidden.b"]
        h1 = leaky_relu(h1_pre, a)
        q = h1 @ p["out.w"] + p["out.b"]
        if not cache:
            return q
        c.tn, c.s_pre, c.h0, c.h1_pre, c.h1 = tn, s_pre, h0, h1_pre, h1
        return q, c

    __call__ = forward

    def backward(self, c: ForwardCache, dq) -> dict:
        """Gradients of sum(dq * Q) with respect to every parameter."""
        p, a = self.params, self.spec.alpha
        dq = np.asarray(dq, dtype=float)
        g = {"out.w": c.h1.T @ dq, "out.b": dq.sum(axis=0)}
        dh1 = (dq @ p["out.w"].T) * leaky_relu_grad(c.h1_pre, a)
        g["hidden.w"] = c.h0.T @ dh1
        g["hidden.b"] = dh1.sum(axis=0)
        dh0 = dh1 @ p["hidden.w"].T
        nflat = int(np.prod(c.flat_shape[1:]))
        ds = dh0[:, nflat:] * leaky_relu_grad(c.s_pre, a)
        g["scalar.w"] = c.tn[None, :] @ ds
        g["scalar.b"] = ds.sum(axis=0)
        dx = dh0[:, :nflat].reshape(c.flat_shape)
        for i in reversed(range(len(self.spec.channels))):
            xp, z, arg = c.convs[i]
            dz = maxpool2_backward(dx, arg, z.shape) * leaky_relu_grad(z, a)
            dx, g[f"conv{i}.w"], g[f"conv{i}.b"] = conv2d_same_backward(dz, xp, p[f"conv{i}.w"],
                                                                         need_dx=i > 0)
        return g


class Adam:
    """Adam with bias correction; skips any step whose gradients are not finite."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0
        self.skipped = 0

    def step(self, params: dict, grads: dict) -> dict:
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return params
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            if params[k].shape != g.shape:
                raise ValueError(f"gradient shape mismatch for {k}")
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net: QNetwork, meta: dict | None = None) -> Path:
    path = Path(path)
    header = {"version": CHECKPOINT_VERSION, "spec": asdict(net.spec),
              "fingerprint": net.spec.fingerprint(), **(meta or {})}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(header, sort_keys=True)), **net.params)
    return path


def load_checkpoint(path, expected_fingerprint: str | None = None):
    """Returns (network, metadata); rejects files whose architecture does not match."""
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        params = {k: data[k].astype(float) for k in data.files if k != "__meta__"}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    spec = QNetSpec(**meta["spec"])
    if spec.fingerprint() != meta["fingerprint"]:
        raise CheckpointError("stored fingerprint does not match stored architecture")
    if expected_fingerprint is not None and expected_fingerprint != meta["fingerprint"]:
        raise CheckpointError(f"architecture fingerprint {meta['fingerprint']} != expected "
                              f"{expected_fingerprint}")
    return QNetwork(spec, params), meta
