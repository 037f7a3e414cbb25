"""The full tabular network: stacked blocks with raw-feature shortcuts.

Each basic block runs two abstraction layers in sequence on the previous
block's output and adds a third abstraction layer applied directly to the raw
input features (so later blocks never lose access to the original columns).
Depth is quoted in main-path abstraction layers: a depth-L network has L/2
blocks. A three-layer MLP head turns the last block's output into class
logits or a regression score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layers import AbstractLayer, relu
from .numerics import Rng, ShapeError


@dataclass
class DANetConfig:
    """Architecture knobs.

    depth     number of main-path abstraction layers; even, >= 2
    k0        branches per abstraction layer
    d0        block output width
    d1        width between the two main-path layers of a block
    dropout   drop probability on each block's shortcut output (train only)
    head_hidden  MLP head hidden width; 0 means 2 * d0
    task      "class" (num_classes-way classification) or "rank" (regression)
    """

    depth: int = 8
    k0: int = 5
    d0: int = 32
    d1: int = 64
    dropout: float = 0.1
    head_hidden: int = 0
    task: str = "class"
    num_classes: int = 2

    def __post_init__(self):
        if self.depth < 2 or self.depth % 2 != 0:
            raise ValueError(f"DANetConfig: depth must be even and >= 2, got {self.depth}")
        if self.k0 < 1 or self.d0 < 1 or self.d1 < 1:
            raise ValueError(
                f"DANetConfig: k0, d0, d1 must be >= 1, got ({self.k0}, {self.d0}, {self.d1})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"DANetConfig: dropout must be in [0, 1), got {self.dropout}")
        if self.head_hidden < 0:
            raise ValueError(f"DANetConfig: head_hidden must be >= 0, got {self.head_hidden}")
        if self.task not in ("class", "rank"):
            raise ValueError(f"DANetConfig: task must be 'class' or 'rank', got {self.task!r}")
        if self.task == "class" and self.num_classes < 2:
            raise ValueError(f"DANetConfig: num_classes must be >= 2, got {self.num_classes}")

    @property
    def hidden_width(self) -> int:
        return self.head_hidden if self.head_hidden > 0 else 2 * self.d0

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "class" else 1

    @property
    def n_blocks(self) -> int:
        return self.depth // 2


WIDE_CONFIG = dict(k0=8, d0=48, d1=96)  # preset for wide inputs


@dataclass
class HeadCtx:
    z: np.ndarray
    a0: np.ndarray
    r0: np.ndarray
    a1: np.ndarray
    r1: np.ndarray


class MlpHead:
    """Three affine layers with ReLU between: in -> hidden -> hidden -> out."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: Rng):
        def glorot(fi, fo):
            a = math.sqrt(6.0 / (fi + fo))
            return rng.uniform(-a, a, (fo, fi))

        self.in_dim = in_dim
        self.hidden = hidden
        self.out_dim = out_dim
        self.w0 = glorot(in_dim, hidden)
        self.b0 = np.zeros(hidden)
        self.w1 = glorot(hidden, hidden)
        self.b1 = np.zeros(hidden)
        self.w2 = glorot(hidden, out_dim)
        self.b2 = np.zeros(out_dim)

    def forward(self, z: np.ndarray, train: bool):
        a0 = z @ self.w0.T + self.b0
        r0 = relu(a0)
        a1 = r0 @ self.w1.T + self.b1
        r1 = relu(a1)
        out = r1 @ self.w2.T + self.b2
        if not train:
            return out, None
        return out, HeadCtx(z=z, a0=a0, r0=r0, a1=a1, r1=r1)

    def backward(self, ctx: HeadCtx, dout: np.ndarray):
        dw2 = dout.T @ ctx.r1
        db2 = dout.sum(axis=0)
        dr1 = dout @ self.w2
        da1 = np.where(ctx.a1 > 0.0, dr1, 0.0)
        dw1 = da1.T @ ctx.r0
        db1 = da1.sum(axis=0)
        dr0 = da1 @ self.w1
        da0 = np.where(ctx.a0 > 0.0, dr0, 0.0)
        dw0 = da0.T @ ctx.z
        db0 = da0.sum(axis=0)
        dz = da0 @ self.w0
        grads = {"w0": dw0, "b0": db0, "w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
        return dz, grads

    def named_params(self):
        return [
            ("w0", "weight", self.w0), ("b0", "bias", self.b0),
            ("w1", "weight", self.w1), ("b1", "bias", self.b1),
            ("w2", "weight", self.w2), ("b2", "bias", self.b2),
        ]


@dataclass
class BlockCtx:
    main1_ctx: object
    main2_ctx: object
    shortcut_ctx: object
    drop_mask: np.ndarray | None


class BasicBlock:
    """Two chained abstraction layers plus a raw-feature shortcut layer.

    out = main2(main1(f_prev)) + dropout(shortcut(x_raw))
    """

    def __init__(self, in_dim: int, n_raw: int, cfg: DANetConfig, ghost_size: int, rng: Rng):
        self.in_dim = in_dim
        self.n_raw = n_raw
        self.dropout = cfg.dropout
        self.main1 = AbstractLayer(in_dim, cfg.d1, cfg.k0, ghost_size, rng)
        self.main2 = AbstractLayer(cfg.d1, cfg.d0, cfg.k0, ghost_size, rng)
        self.shortcut = AbstractLayer(n_raw, cfg.d0, cfg.k0, ghost_size, rng)

    def forward(self, f_prev: np.ndarray, x_raw: np.ndarray, train: bool, rng: Rng | None):
        m1, c1 = self.main1.forward(f_prev, train)
        m2, c2 = self.main2.forward(m1, train)
        s, cs = self.shortcut.forward(x_raw, train)
        drop_mask = None
        if train and self.dropout > 0.0:
            if rng is None:
                raise ValueError("BasicBlock: rng required for dropout in training mode")
            keep = rng.random(s.shape) >= self.dropout
            drop_mask = keep / (1.0 - self.dropout)  # inverted dropout
            s = s * drop_mask
        out = m2 + s
        if not train:
            return out, None
        return out, BlockCtx(main1_ctx=c1, main2_ctx=c2, shortcut_ctx=cs, drop_mask=drop_mask)

    def backward(self, ctx: BlockCtx, dout: np.ndarray):
        """Returns (df_prev, dx_raw, grads)."""
        ds = dout if ctx.drop_mask is None else dout * ctx.drop_mask
        dx_raw, sg = self.shortcut.backward(ctx.shortcut_ctx, ds)
        dm1, g2 = self.main2.backward(ctx.main2_ctx, dout)
        df_prev, g1 = self.main1.backward(ctx.main1_ctx, dm1)
        grads = {}
        for prefix, gs in (("main1", g1), ("main2", g2), ("shortcut", sg)):
            for name, g in gs.items():
                grads[f"{prefix}.{name}"] = g
        return df_prev, dx_raw, grads

    def named_params(self):
        out = []
        for prefix, layer in (("main1", self.main1), ("main2", self.main2),
                              ("shortcut", self.shortcut)):
            out.extend((f"{prefix}.{n}", kind, arr) for n, kind, arr in layer.named_params())
        return out

    def named_buffers(self):
        out = []
        for prefix, layer in (("main1", self.main1), ("main2", self.main2),
                              ("shortcut", self.shortcut)):
            out.extend((f"{prefix}.{n}", arr) for n, arr in layer.named_buffers())
        return out

    def named_bns(self):
        out = []
        for prefix, layer in (("main1", self.main1), ("main2", self.main2),
                              ("shortcut", self.shortcut)):
            out.extend((f"{prefix}.{n}", bn) for n, bn in layer.named_bns())
        return out


@dataclass
class ModelCtx:
    x: np.ndarray
    block_ctxs: list
    head_ctx: HeadCtx
    used: bool = field(default=False)


class DANet:
    """Stack of basic blocks plus the MLP head.

    ``depth`` main-path abstraction layers means depth/2 blocks; the first
    block reads the raw features, later blocks read the previous block's
    output, and every block's shortcut reads the raw features.
    """

    def __init__(self, n_features: int, config: DANetConfig, ghost_size: int = 256,
                 seed: int | Rng = 0):
        if n_features < 1:
            raise ValueError(f"DANet: n_features must be >= 1, got {n_features}")
        rng = seed if isinstance(seed, Rng) else Rng(seed)
        self.n_features = n_features
        self.config = config
        self.ghost_size = ghost_size
        self.blocks = []
        in_dim = n_features
        for _ in range(config.n_blocks):
            self.blocks.append(BasicBlock(in_dim, n_features, config, ghost_size, rng))
            in_dim = config.d0
        self.head = MlpHead(config.d0, config.hidden_width, config.out_dim, rng)

    @property
    def task(self) -> str:
        return self.config.task

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ShapeError(f"DANet: expected (rows, {self.n_features}), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("DANet: non-finite input")
        return x

    def forward(self, x, train: bool = False, rng: Rng | None = None):
        x = self._check_input(x)
        f = x
        block_ctxs = []
        for block in self.blocks:
            f, ctx = block.forward(f, x, train, rng)
            block_ctxs.append(ctx)
        out, head_ctx = self.head.forward(f, train)
        if not train:
            return out, None
        return out, ModelCtx(x=x, block_ctxs=block_ctxs, head_ctx=head_ctx)

    def backward(self, ctx: ModelCtx, dout: np.ndarray):
        """Returns (dx, grads). The raw-input gradient is the sum of every
        shortcut path's contribution plus the first block's main path."""
        if ctx is None:
            raise RuntimeError("DANet.backward: no context (forward ran in eval mode?)")
        if ctx.used:
            raise RuntimeError("DANet.backward: context already consumed")
        ctx.used = True
        grads = {}
        df, head_grads = self.head.backward(ctx.head_ctx, dout)
        for name, g in head_grads.items():
            grads[f"head.{name}"] = g
        dx = np.zeros_like(ctx.x)
        for i in range(len(self.blocks) - 1, -1, -1):
            df, dx_raw, bg = self.blocks[i].backward(ctx.block_ctxs[i], df)
            dx += dx_raw
            for name, g in bg.items():
                grads[f"block{i}.{name}"] = g
        dx += df  # the first block's f_prev is the raw input itself
        return dx, grads

    def scores(self, x) -> np.ndarray:
        """Eval-mode forward: logits (rows, num_classes) or scores (rows, 1)."""
        out, _ = self.forward(x, train=False)
        return out

    def predict(self, x) -> np.ndarray:
        """Class labels (argmax of the logits, ties to the lowest index) or
        the regression scores as a flat vector."""
        out = self.scores(x)
        if self.config.task == "class":
            return np.argmax(out, axis=1)
        return out[:, 0]

    def named_params(self):
        out = []
        for i, block in enumerate(self.blocks):
            out.extend((f"block{i}.{n}", kind, arr) for n, kind, arr in block.named_params())
        out.extend((f"head.{n}", kind, arr) for n, kind, arr in self.head.named_params())
        return out

    def named_buffers(self):
        out = []
        for i, block in enumerate(self.blocks):
            out.extend((f"block{i}.{n}", arr) for n, arr in block.named_buffers())
        return out

    def named_bns(self):
        out = []
        for i, block in enumerate(self.blocks):
            out.extend((f"block{i}.{n}", bn) for n, bn in block.named_bns())
        return out

    def state_dict(self) -> dict:
        """Deep copy of all parameters, running stats, and BN update counts."""
        return {
            "params": {n: arr.copy() for n, _, arr in self.named_params()},
            "buffers": {n: arr.copy() for n, arr in self.named_buffers()},
            "counters": {n: bn.updates for n, bn in self.named_bns()},
        }

    def load_state(self, state: dict) -> None:
        for n, _, arr in self.named_params():
            arr[...] = state["params"][n]
        for n, arr in self.named_buffers():
            arr[...] = state["buffers"][n]
        for n, bn in self.named_bns():
            bn.updates = state["counters"][n]


@dataclass
class FlopsReport:
    """Per-layer floating-point operation counts for one instance, eval mode.

    Convention (documented here and in the README): multiplies and adds count
    one each; an affine map from m to d inputs costs 2*d*m + d; the sparse
    mask projection over n logits costs n*ceil(log2 n) for the sort plus n
    for the threshold scan; batch norm in eval mode costs 2 per feature;
    sigmoid and ReLU cost 1 per feature. Counting stops at the head output.
    """

    lines: list  # (name, flops) in network order
    total: int

    def as_dict(self) -> dict:
        return dict(self.lines)


def _entmax_flops(n: int) -> int:
    return n * math.ceil(math.log2(n)) + n if n > 1 else 1


def _unit_flops(unit) -> int:
    if hasattr(unit, "mask_logits"):  # live unit: mask projection runs every forward
        m, d = unit.in_dim, unit.out_dim
        return _entmax_flops(m) + m + 2 * (2 * d * m) + 2 * (2 * d) + 3 * d
    m, d = unit.in_dim, unit.out_dim  # compressed: two biased affines + gate
    return 2 * (2 * d * m + d) + 3 * d


def _layer_flops(layer) -> int:
    per_unit = [_unit_flops(u) for u in layer.units]
    return sum(per_unit) + (len(layer.units) - 1) * layer.out_dim


def count_flops(model) -> FlopsReport:
    """Inference cost of one instance for a live or compressed model."""
    lines = []
    for i, block in enumerate(model.blocks):
        lines.append((f"block{i}.main1", _layer_flops(block.main1)))
        lines.append((f"block{i}.main2", _layer_flops(block.main2)))
        lines.append((f"block{i}.shortcut", _layer_flops(block.shortcut)))
        lines.append((f"block{i}.sum", block.main2.out_dim))
    head = model.head
    lines.append(("head.fc0", 2 * head.hidden * head.in_dim + head.hidden))
    lines.append(("head.relu0", head.hidden))
    lines.append(("head.fc1", 2 * head.hidden * head.hidden + head.hidden))
    lines.append(("head.relu1", head.hidden))
    lines.append(("head.fc2", 2 * head.out_dim * head.hidden + head.out_dim))
    return FlopsReport(lines=lines, total=sum(n for _, n in lines))


def _compressed_unit_flops(m: int, d: int) -> int:
    return 2 * (2 * d * m + d) + 3 * d


def count_flops_folded(model) -> FlopsReport:
    """What the compressed twin of a live model would cost per instance.

    Depends only on shapes, so it works on untrained models too (the actual
    fold requires populated batch-norm statistics; this count does not).
    """
    lines = []
    for name, n in count_flops(model).lines:
        if ".main" in name or ".shortcut" in name:
            layer = model.blocks[int(name.split(".")[0][len("block"):])]
            layer = getattr(layer, name.split(".")[1])
            per_unit = [_compressed_unit_flops(u.in_dim, u.out_dim) for u in layer.units]
            n = sum(per_unit) + (len(layer.units) - 1) * layer.out_dim
        lines.append((name, n))
    return FlopsReport(lines=lines, total=sum(n for _, n in lines))
