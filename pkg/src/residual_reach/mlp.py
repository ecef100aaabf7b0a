"""Small numpy MLP with two linear heads, manual backprop and AdamW.

The heads predict a translation (3) and a 6D rotation delta (6).  Both head
layers start at zero, so a fresh network outputs exactly zero and the
decoded residual is the identity transform.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

HEADS = (("trans", 3), ("rot6d", 6))


class NonFiniteLoss(RuntimeError):
    """Training produced a NaN/inf loss.  ``last_good`` holds the parameters before the bad step."""

    def __init__(self, epoch, last_good):
        super().__init__(f"non-finite loss in epoch {epoch}")
        self.epoch = epoch
        self.last_good = last_good


def architecture(in_dim: int, width: int = 256, depth: int = 3, activation: str = "tanh") -> dict:
    return {"in_dim": int(in_dim), "width": int(width), "depth": int(depth),
            "activation": activation, "heads": [list(h) for h in HEADS]}


def architecture_hash(arch: dict) -> str:
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


class Mlp:
    """``depth`` tanh hidden layers of ``width`` units feeding two linear heads."""

    def __init__(self, in_dim, width=256, depth=3, seed=0, dtype=np.float64):
        if depth < 1 or width < 1:
            raise ValueError("need at least one hidden unit and layer")
        self.arch = architecture(in_dim, width, depth)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params = []
        d = in_dim
        for _ in range(depth):
            lim = math.sqrt(6.0 / (d + width))  # Glorot uniform
            self.params.append(rng.uniform(-lim, lim, size=(d, width)).astype(self.dtype))
            self.params.append(np.zeros(width, dtype=self.dtype))
            d = width
        for _, k in HEADS:
            self.params.append(np.zeros((width, k), dtype=self.dtype))
            self.params.append(np.zeros(k, dtype=self.dtype))

    @property
    def depth(self):
        return self.arch["depth"]

    def astype(self, dtype) -> "Mlp":
        self.dtype = np.dtype(dtype)
        self.params = [p.astype(self.dtype) for p in self.params]
        return self

    def forward(self, X, keep=False):
        h = np.asarray(X, dtype=self.dtype)
        acts = [h]
        for i in range(self.depth):
            h = np.tanh(h @ self.params[2 * i] + self.params[2 * i + 1])
            acts.append(h)
        k = 2 * self.depth
        out_t = h @ self.params[k] + self.params[k + 1]
        out_r = h @ self.params[k + 2] + self.params[k + 3]
        return (out_t, out_r, acts) if keep else (out_t, out_r)

    __call__ = forward

    def loss_and_grad(self, X, Yt, Yr):
        """Per-head mean squared error (summed over heads) and its gradient."""
        out_t, out_r, acts = self.forward(X, keep=True)
        dt = out_t - Yt
        dr = out_r - Yr
        loss = float(np.mean(dt * dt) + np.mean(dr * dr))
        gt = (2.0 / dt.size) * dt
        gr = (2.0 / dr.size) * dr
        grads = [None] * len(self.params)
        h = acts[-1]
        k = 2 * self.depth
        grads[k], grads[k + 1] = h.T @ gt, gt.sum(0)
        grads[k + 2], grads[k + 3] = h.T @ gr, gr.sum(0)
        g = gt @ self.params[k].T + gr @ self.params[k + 2].T
        for i in reversed(range(self.depth)):
            g = g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(0)
            if i:
                g = g @ self.params[2 * i].T
        return loss, grads

    def loss(self, X, Yt, Yr) -> float:
        out_t, out_r = self.forward(X)
        return float(np.mean((out_t - Yt) ** 2) + np.mean((out_r - Yr) ** 2))

    def get_flat(self):
        return [p.copy() for p in self.params]

    def set_flat(self, params):
        self.params = [np.array(p, dtype=self.dtype) for p in params]

    def to_dict(self):
        return {"arch": self.arch, "arch_hash": architecture_hash(self.arch),
                "params": [p.astype(np.float64).tolist() for p in self.params]}

    @classmethod
    def from_dict(cls, d, dtype=np.float64):
        arch = d["arch"]
        if architecture_hash(arch) != d["arch_hash"]:
            raise ValueError("architecture hash mismatch")
        m = cls(arch["in_dim"], arch["width"], arch["depth"], dtype=dtype)
        m.set_flat([np.asarray(p) for p in d["params"]])
        shapes = [p.shape for p in cls(arch["in_dim"], arch["width"], arch["depth"]).params]
        if [p.shape for p in m.params] != shapes:
            raise ValueError("parameter shapes do not match the architecture")
        return m


@dataclass
class AdamW:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p *= 1.0 - self.lr * self.weight_decay  # decoupled decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainHistory:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)


def fit_mlp(mlp: Mlp, X, Yt, Yr, Xv=None, Yvt=None, Yvr=None, *, lr=1e-4, weight_decay=1e-2,
            batch=256, epochs=50, seed=0) -> TrainHistory:
    """Minibatch AdamW on the two-head MSE.  Deterministic given ``seed``.

    Curves hold the loss before training at index 0, then one entry per epoch.
    Raises NonFiniteLoss carrying the last finite parameters.
    """
    X = np.asarray(X, mlp.dtype)
    Yt = np.asarray(Yt, mlp.dtype)
    Yr = np.asarray(Yr, mlp.dtype)
    has_val = Xv is not None
    if has_val:
        Xv = np.asarray(Xv, mlp.dtype)
        Yvt = np.asarray(Yvt, mlp.dtype)
        Yvr = np.asarray(Yvr, mlp.dtype)
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    hist = TrainHistory()
    hist.train.append(mlp.loss(X, Yt, Yr))
    if has_val:
        hist.val.append(mlp.loss(Xv, Yvt, Yvr))
    n = len(X)
    for ep in range(epochs):
        order = rng.permutation(n)
        good = mlp.get_flat()
        total = 0.0
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            loss, grads = mlp.loss_and_grad(X[idx], Yt[idx], Yr[idx])
            if not math.isfinite(loss):
                raise NonFiniteLoss(ep, good)
            opt.step(mlp.params, grads)
            total += loss * len(idx)
        hist.train.append(total / n)
        if has_val:
            v = mlp.loss(Xv, Yvt, Yvr)
            if not math.isfinite(v):
                raise NonFiniteLoss(ep, good)
            hist.val.append(v)
    return hist
