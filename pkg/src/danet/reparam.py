"""Structure re-parameterization: fold masks and batch norm into plain affines.

An eval-mode abstraction unit is sigmoid(BN1(W1 (M*f))) * BN2(W2 (M*f))
through a ReLU. Because the mask M is input-independent and eval-mode BN is
an affine map per feature, the whole branch collapses into two biased affine
maps: scale each weight column by the mask entry, then scale each row by
gamma/sigma and fold the BN shift into a bias. The compressed model computes
exactly the same function (up to float round-off) with the mask projection
and normalization gone.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .entmax import entmax15
from .layers import GhostBatchNorm, relu, sigmoid
from .network import DANet, DANetConfig, MlpHead
from .numerics import ShapeError


def fold_mask(w: np.ndarray, mask_probs: np.ndarray) -> np.ndarray:
    """Scale column j of w by mask_probs[j]; exact mask zeros give exactly-zero columns."""
    if w.ndim != 2 or mask_probs.ndim != 1 or w.shape[1] != mask_probs.shape[0]:
        raise ShapeError(
            f"fold_mask: w {w.shape} incompatible with mask {mask_probs.shape}"
        )
    return w * mask_probs


def fold_bn(w_prime: np.ndarray, bn: GhostBatchNorm):
    """Fold an eval-mode batch norm into the preceding linear map.

    Returns (w_star, b_star) with sigma = sqrt(running_var + eps):
    row i of w_star is row i of w_prime times gamma[i]/sigma[i], and
    b_star[i] = beta[i] - running_mean[i] * gamma[i] / sigma[i].
    """
    if w_prime.shape[0] != bn.dim:
        raise ShapeError(f"fold_bn: w rows {w_prime.shape[0]} != bn dim {bn.dim}")
    sigma = np.sqrt(bn.running_var + bn.eps)
    scale = bn.gamma / sigma
    w_star = w_prime * scale[:, None]
    b_star = bn.beta - bn.running_mean * scale
    return w_star, b_star


@dataclass
class CompressedUnit:
    """One folded branch: relu(sigmoid(x w1s^T + b1s) * (x w2s^T + b2s))."""

    w1s: np.ndarray
    b1s: np.ndarray
    w2s: np.ndarray
    b2s: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.w1s.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w1s.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        gate = sigmoid(x @ self.w1s.T + self.b1s)
        return relu(gate * (x @ self.w2s.T + self.b2s))

    def named_tensors(self):
        return [("w1s", self.w1s), ("b1s", self.b1s), ("w2s", self.w2s), ("b2s", self.b2s)]


class CompressedLayer:
    """K folded branches fused by elementwise sum."""

    def __init__(self, units: list):
        if not units:
            raise ValueError("CompressedLayer: needs at least one unit")
        self.units = units
        self.in_dim = units[0].in_dim
        self.out_dim = units[0].out_dim

    def forward(self, x: np.ndarray) -> np.ndarray:
        total = self.units[0].forward(x)
        for unit in self.units[1:]:
            total = total + unit.forward(x)
        return total


class CompressedBlock:
    def __init__(self, main1: CompressedLayer, main2: CompressedLayer,
                 shortcut: CompressedLayer):
        self.main1 = main1
        self.main2 = main2
        self.shortcut = shortcut

    def forward(self, f_prev: np.ndarray, x_raw: np.ndarray) -> np.ndarray:
        return self.main2.forward(self.main1.forward(f_prev)) + self.shortcut.forward(x_raw)


class CompressedModel:
    """Inference-only model producing the same outputs as the source network."""

    def __init__(self, n_features: int, config: DANetConfig, blocks: list, head: MlpHead):
        self.n_features = n_features
        self.config = config
        self.blocks = blocks
        self.head = head

    @property
    def task(self) -> str:
        return self.config.task

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ShapeError(f"CompressedModel: expected (rows, {self.n_features}), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("CompressedModel: non-finite input")
        return x

    def forward(self, x) -> np.ndarray:
        x = self._check_input(x)
        f = x
        for block in self.blocks:
            f = block.forward(f, x)
        out, _ = self.head.forward(f, train=False)
        return out

    def scores(self, x) -> np.ndarray:
        return self.forward(x)

    def predict(self, x) -> np.ndarray:
        out = self.forward(x)
        if self.config.task == "class":
            return np.argmax(out, axis=1)
        return out[:, 0]


def compress_unit(unit) -> CompressedUnit:
    """Fold one live unit. Requires populated BN running statistics."""
    for label, bn in (("bn1", unit.bn1), ("bn2", unit.bn2)):
        if bn.updates < 1:
            raise ValueError(
                f"compress_unit: {label} running statistics are unpopulated; "
                "train at least one step or load trained statistics first"
            )
    mask = entmax15(unit.mask_logits).probs
    w1p = fold_mask(unit.w1, mask)
    w2p = fold_mask(unit.w2, mask)
    w1s, b1s = fold_bn(w1p, unit.bn1)
    w2s, b2s = fold_bn(w2p, unit.bn2)
    return CompressedUnit(w1s=w1s, b1s=b1s, w2s=w2s, b2s=b2s)


def _compress_layer(layer) -> CompressedLayer:
    return CompressedLayer([compress_unit(u) for u in layer.units])


def compress_model(model: DANet) -> CompressedModel:
    """Fold every abstraction layer; the head is copied unchanged."""
    blocks = []
    for block in model.blocks:
        blocks.append(CompressedBlock(
            main1=_compress_layer(block.main1),
            main2=_compress_layer(block.main2),
            shortcut=_compress_layer(block.shortcut),
        ))
    return CompressedModel(
        n_features=model.n_features,
        config=copy.deepcopy(model.config),
        blocks=blocks,
        head=copy.deepcopy(model.head),
    )


def compressed_forward(cmodel: CompressedModel, x) -> np.ndarray:
    return cmodel.forward(x)
