"""Network building blocks with explicit forward/backward passes.

Three pieces live here:

* :class:`GhostBatchNorm`: batch normalization computed over consecutive
  sub-batches ("ghosts") so the normalization noise level is decoupled from
  the optimization batch size.
* :class:`AbstractUnit`: one feature-abstracting branch, a learnable sparse
  mask (entmax over logits, shared by every row of the batch) followed by two
  normalized linear maps, one of which gates the other through a sigmoid
  before a final ReLU.
* :class:`AbstractLayer`: K such branches over the same input, fused by
  elementwise sum.

Forward passes in training mode return a context object holding exactly the
intermediates the matching backward pass needs. A context is single-use and
tied to the layer that produced it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .entmax import EntmaxResult, entmax15, entmax15_backward
from .numerics import Rng, ShapeError


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: stable for large |x| without branching on sign
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class BatchNormCtx:
    bounds: list  # (start, stop) row ranges, one per ghost
    xhat: np.ndarray
    inv_std: list  # per-ghost 1/sqrt(var + eps), each shape (dim,)


class GhostBatchNorm:
    """Batch norm over consecutive ghost sub-batches.

    In training mode each ghost of ``ghost_size`` rows (the last one may be
    smaller) is normalized with its own mean and biased variance. Running
    statistics are an exponential moving average of the per-ghost statistics
    averaged over ghosts and are the ones used in eval mode.
    """

    def __init__(self, dim: int, ghost_size: int = 256, momentum: float = 0.01,
                 eps: float = 1e-5):
        if dim < 1:
            raise ValueError(f"GhostBatchNorm: dim must be >= 1, got {dim}")
        if ghost_size < 1:
            raise ValueError(f"GhostBatchNorm: ghost_size must be >= 1, got {ghost_size}")
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"GhostBatchNorm: momentum must be in (0, 1], got {momentum}")
        if eps <= 0.0:
            raise ValueError(f"GhostBatchNorm: eps must be positive, got {eps}")
        self.dim = dim
        self.ghost_size = ghost_size
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.updates = 0

    def forward(self, x: np.ndarray, train: bool):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"GhostBatchNorm: expected (rows, {self.dim}), got {x.shape}")
        if not train:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            return (x - self.running_mean) * (self.gamma * inv) + self.beta, None

        rows = x.shape[0]
        if rows < 1:
            raise ValueError("GhostBatchNorm: empty batch in training mode")
        bounds = [(s, min(s + self.ghost_size, rows)) for s in range(0, rows, self.ghost_size)]
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        inv_stds = []
        ghost_means = np.zeros(self.dim)
        ghost_vars = np.zeros(self.dim)
        for s, e in bounds:
            chunk = x[s:e]
            mu = chunk.mean(axis=0)
            var = chunk.var(axis=0)  # biased, matching the normalization
            inv = 1.0 / np.sqrt(var + self.eps)
            xh = (chunk - mu) * inv
            xhat[s:e] = xh
            y[s:e] = self.gamma * xh + self.beta
            inv_stds.append(inv)
            ghost_means += mu
            ghost_vars += var
        n_ghosts = len(bounds)
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * (ghost_means / n_ghosts)
        self.running_var = (1.0 - m) * self.running_var + m * (ghost_vars / n_ghosts)
        self.updates += 1
        return y, BatchNormCtx(bounds=bounds, xhat=xhat, inv_std=inv_stds)

    def backward(self, ctx: BatchNormCtx, dy: np.ndarray):
        """Returns (dx, dgamma, dbeta). Gradients do not flow through the
        running-statistic buffers."""
        dgamma = (dy * ctx.xhat).sum(axis=0)
        dbeta = dy.sum(axis=0)
        dx = np.empty_like(dy)
        for (s, e), inv in zip(ctx.bounds, ctx.inv_std):
            n = e - s
            dxh = dy[s:e] * self.gamma
            xh = ctx.xhat[s:e]
            dx[s:e] = (inv / n) * (n * dxh - dxh.sum(axis=0) - xh * (dxh * xh).sum(axis=0))
        return dx, dgamma, dbeta


@dataclass
class UnitCtx:
    f: np.ndarray
    mask: EntmaxResult
    f_prime: np.ndarray
    bn1_ctx: BatchNormCtx
    bn2_ctx: BatchNormCtx
    q: np.ndarray
    h2: np.ndarray
    gated: np.ndarray


class AbstractUnit:
    """One mask-then-abstract branch.

    ``mask_logits`` start at zero so the initial mask is uniform over the
    input features; the two weight matrices are (out_dim, in_dim) with
    uniform(-a, a) entries, a = sqrt(6 / (in_dim + out_dim)). The linear maps
    carry no bias; the batch-norm shift plays that role.
    """

    def __init__(self, in_dim: int, out_dim: int, ghost_size: int, rng: Rng,
                 momentum: float = 0.01, eps: float = 1e-5):
        if in_dim < 1 or out_dim < 1:
            raise ValueError(f"AbstractUnit: dims must be >= 1, got ({in_dim}, {out_dim})")
        a = math.sqrt(6.0 / (in_dim + out_dim))
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.mask_logits = np.zeros(in_dim)
        self.w1 = rng.uniform(-a, a, (out_dim, in_dim))
        self.w2 = rng.uniform(-a, a, (out_dim, in_dim))
        self.bn1 = GhostBatchNorm(out_dim, ghost_size, momentum, eps)
        self.bn2 = GhostBatchNorm(out_dim, ghost_size, momentum, eps)

    def select(self, f: np.ndarray):
        """Apply the learned sparse mask to every row: returns (mask, f * mask)."""
        if f.ndim != 2 or f.shape[1] != self.in_dim:
            raise ShapeError(f"AbstractUnit: expected (rows, {self.in_dim}), got {f.shape}")
        mask = entmax15(self.mask_logits)
        return mask, f * mask.probs

    def abstract(self, f_prime: np.ndarray, train: bool):
        """Gated abstraction of already-masked features.

        q = sigmoid(BN1(f' W1^T)) gates BN2(f' W2^T); ReLU on the product.
        Returns (out, pieces) where pieces feed the unit context in training
        mode and is None in eval mode.
        """
        a1 = f_prime @ self.w1.T
        h1, bn1_ctx = self.bn1.forward(a1, train)
        q = sigmoid(h1)
        a2 = f_prime @ self.w2.T
        h2, bn2_ctx = self.bn2.forward(a2, train)
        gated = q * h2
        out = relu(gated)
        if not train:
            return out, None
        return out, (bn1_ctx, bn2_ctx, q, h2, gated)

    def forward(self, f: np.ndarray, train: bool):
        mask, f_prime = self.select(f)
        out, pieces = self.abstract(f_prime, train)
        if not train:
            return out, None
        bn1_ctx, bn2_ctx, q, h2, gated = pieces
        return out, UnitCtx(f=f, mask=mask, f_prime=f_prime, bn1_ctx=bn1_ctx,
                            bn2_ctx=bn2_ctx, q=q, h2=h2, gated=gated)

    def backward(self, ctx: UnitCtx, dout: np.ndarray):
        """Returns (df, grads) with grads keyed by local parameter name."""
        dgated = np.where(ctx.gated > 0.0, dout, 0.0)
        dq = dgated * ctx.h2
        dh2 = dgated * ctx.q
        dh1 = dq * ctx.q * (1.0 - ctx.q)
        da1, dg1, db1 = self.bn1.backward(ctx.bn1_ctx, dh1)
        da2, dg2, db2 = self.bn2.backward(ctx.bn2_ctx, dh2)
        dw1 = da1.T @ ctx.f_prime
        dw2 = da2.T @ ctx.f_prime
        df_prime = da1 @ self.w1 + da2 @ self.w2
        df = df_prime * ctx.mask.probs
        dmask = (df_prime * ctx.f).sum(axis=0)
        dlogits = entmax15_backward(ctx.mask, dmask)
        grads = {
            "mask": dlogits,
            "w1": dw1,
            "w2": dw2,
            "bn1.gamma": dg1,
            "bn1.beta": db1,
            "bn2.gamma": dg2,
            "bn2.beta": db2,
        }
        return df, grads

    def named_params(self):
        """(name, kind, array) triples; arrays are the live parameters."""
        return [
            ("mask", "mask", self.mask_logits),
            ("w1", "weight", self.w1),
            ("w2", "weight", self.w2),
            ("bn1.gamma", "bn", self.bn1.gamma),
            ("bn1.beta", "bn", self.bn1.beta),
            ("bn2.gamma", "bn", self.bn2.gamma),
            ("bn2.beta", "bn", self.bn2.beta),
        ]

    def named_buffers(self):
        return [
            ("bn1.running_mean", self.bn1.running_mean),
            ("bn1.running_var", self.bn1.running_var),
            ("bn2.running_mean", self.bn2.running_mean),
            ("bn2.running_var", self.bn2.running_var),
        ]

    def named_bns(self):
        return [("bn1", self.bn1), ("bn2", self.bn2)]


@dataclass
class LayerCtx:
    owner: object
    unit_ctxs: list
    used: bool = field(default=False)


class AbstractLayer:
    """K parallel abstraction branches fused by elementwise sum."""

    def __init__(self, in_dim: int, out_dim: int, branches: int, ghost_size: int,
                 rng: Rng, momentum: float = 0.01, eps: float = 1e-5):
        if branches < 1:
            raise ValueError(f"AbstractLayer: branches must be >= 1, got {branches}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.units = [AbstractUnit(in_dim, out_dim, ghost_size, rng, momentum, eps)
                      for _ in range(branches)]

    def forward(self, f: np.ndarray, train: bool):
        total = None
        ctxs = []
        for unit in self.units:
            out, ctx = unit.forward(f, train)
            total = out if total is None else total + out
            ctxs.append(ctx)
        if not train:
            return total, None
        return total, LayerCtx(owner=self, unit_ctxs=ctxs)

    def backward(self, ctx: LayerCtx, dout: np.ndarray):
        """Returns (df, grads) with grads keyed u{k}.<param>. The context is
        consumed: reusing it, or passing one from another layer, raises."""
        if ctx is None:
            raise RuntimeError("AbstractLayer.backward: no context (forward ran in eval mode?)")
        if ctx.owner is not self:
            raise RuntimeError("AbstractLayer.backward: context belongs to a different layer")
        if ctx.used:
            raise RuntimeError("AbstractLayer.backward: context already consumed")
        ctx.used = True
        df = np.zeros((dout.shape[0], self.in_dim))
        grads = {}
        for k, (unit, uctx) in enumerate(zip(self.units, ctx.unit_ctxs)):
            dfu, ug = unit.backward(uctx, dout)
            df += dfu
            for name, g in ug.items():
                grads[f"u{k}.{name}"] = g
        return df, grads

    def named_params(self):
        out = []
        for k, unit in enumerate(self.units):
            out.extend((f"u{k}.{n}", kind, arr) for n, kind, arr in unit.named_params())
        return out

    def named_buffers(self):
        out = []
        for k, unit in enumerate(self.units):
            out.extend((f"u{k}.{n}", arr) for n, arr in unit.named_buffers())
        return out

    def named_bns(self):
        out = []
        for k, unit in enumerate(self.units):
            out.extend((f"u{k}.{n}", bn) for n, bn in unit.named_bns())
        return out
