"""Learning-rate schedule, Adam/SGD updates and stochastic weight averaging."""

from __future__ import annotations

import math

import numpy as np

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def cosine_anneal(lr_max, lr_min, t, t_max):
    """Cosine annealing: ``lr_max`` at t=0, ``lr_min`` at t=t_max, periodic in 2*t_max."""
    if t < 0 or t_max < 1:
        raise ValueError(f"need t >= 0 and t_max >= 1, got t={t}, t_max={t_max}")
    if t % (2 * t_max) == t_max:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / t_max))


def _check_names(params, other, what):
    if set(params) != set(other):
        missing = sorted(set(params) ^ set(other))
        raise KeyError(f"{what}: name-set mismatch at {missing[0]!r}")


def adam_step(params, grads, state, lr, betas=ADAM_BETAS, eps=ADAM_EPS):
    """One Adam update on plain arrays. ``state`` holds ``t``, ``m`` and ``v`` and is updated in place."""
    _check_names(params, grads, "adam_step")
    b1, b2 = betas
    t = state.get("t", 0) + 1
    state["t"] = t
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        m[name] = b1 * m[name] + (1.0 - b1) * g
        v[name] = b2 * v[name] + (1.0 - b2) * g * g
        denom = np.sqrt(v[name] / c2) + eps
        out[name] = (p - lr * (m[name] / c1) / denom).astype(p.dtype, copy=False)
    return out


def sgd_step(params, grads, lr, momentum=0.9, state=None):
    """SGD with heavy-ball momentum (buffer starts at the first gradient)."""
    _check_names(params, grads, "sgd_step")
    state = {} if state is None else state
    bufs = state.setdefault("momentum", {})
    out = {}
    for name, p in params.items():
        g = grads[name]
        if momentum:
            bufs[name] = g.copy() if name not in bufs else momentum * bufs[name] + g
            g = bufs[name]
        out[name] = (p - lr * g).astype(p.dtype, copy=False)
    return out


class Optimizer:
    """Steps a ``name -> Tensor`` mapping in place from its ``.grad`` fields."""

    def __init__(self, params, kind="adam", momentum=0.9):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {kind!r}")
        self.params = params
        self.kind = kind
        self.momentum = momentum
        self.state = {}

    def step(self, lr):
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        if self.kind == "adam":
            new = adam_step(arrays, grads, self.state, lr)
        else:
            new = sgd_step(arrays, grads, lr, self.momentum, self.state)
        for k, p in self.params.items():
            p.data = new[k]
            p.grad = None


class SwaState:
    """Running arithmetic mean of parameter snapshots."""

    def __init__(self):
        self.averaged = {}
        self.snapshot_count = 0

    def update(self, snapshot):
        swa_update(self, snapshot)
        return self


def swa_update(state: SwaState, snapshot) -> SwaState:
    """``avg += (snapshot - avg) / (n + 1)``; snapshot values may be arrays or Tensors."""
    snap = {k: np.asarray(getattr(v, "data", v), dtype=np.float64) for k, v in snapshot.items()}
    if state.snapshot_count == 0:
        state.averaged = {k: v.copy() for k, v in snap.items()}
    else:
        _check_names(state.averaged, snap, "swa_update")
        n = state.snapshot_count
        for k, v in snap.items():
            state.averaged[k] = state.averaged[k] + (v - state.averaged[k]) / (n + 1)
    state.snapshot_count += 1
    return state
