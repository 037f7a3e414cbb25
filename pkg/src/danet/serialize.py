"""Single-file model container: a JSON manifest line plus raw float64 tensors.

Layout (documented here and in the README):

* line 1: the magic string ``DANET1``
* line 2: one JSON object: format name/version, ``compressed`` flag,
  architecture config, task, optional feature schema and preprocessing
  state, batch-norm update counters, and the tensor directory (name and
  shape per tensor, in file order)
* everything after: the tensors' raw bytes, little-endian float64, C order,
  concatenated in directory order.

Floats inside the manifest are emitted by Python's shortest-round-trip repr
(via json), so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import LooTable, PreprocessState, ZscoreStats
from .network import DANet, DANetConfig, MlpHead
from .reparam import CompressedBlock, CompressedLayer, CompressedModel, CompressedUnit

MAGIC = b"DANET1"
FORMAT_NAME = "danet-container"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Unreadable or inconsistent model container."""


def _config_to_manifest(cfg: DANetConfig) -> dict:
    return {
        "depth": cfg.depth, "k0": cfg.k0, "d0": cfg.d0, "d1": cfg.d1,
        "dropout": cfg.dropout, "head_hidden": cfg.head_hidden,
        "task": cfg.task, "num_classes": cfg.num_classes,
    }


def _preprocess_to_manifest(pp: PreprocessState | None):
    if pp is None:
        return None
    if not pp.fitted:
        raise ContainerError("save_model: preprocess state is not fitted")
    loo = {
        str(j): {"means": table.means, "global_mean": table.global_mean}
        for j, table in pp.loo_tables.items()
    }
    zs = {
        "mean": [float(v) for v in pp.zstats.mean],
        "std": [float(v) for v in pp.zstats.std],
        "cols": [int(c) for c in pp.zstats.cols],
    }
    return {"loo": loo, "zscore": zs}


def _preprocess_from_manifest(entry) -> PreprocessState | None:
    if entry is None:
        return None
    tables = {
        int(j): LooTable(means=dict(t["means"]), global_mean=float(t["global_mean"]))
        for j, t in entry["loo"].items()
    }
    zs = entry["zscore"]
    stats = ZscoreStats(mean=np.array(zs["mean"], dtype=np.float64),
                        std=np.array(zs["std"], dtype=np.float64),
                        cols=np.array(zs["cols"], dtype=np.int64))
    return PreprocessState(loo_tables=tables, zstats=stats, fitted=True)


def _model_tensors(model: DANet):
    out = [(name, arr) for name, _, arr in model.named_params()]
    out.extend(model.named_buffers())
    return out


def _compressed_tensors(cmodel: CompressedModel):
    out = []
    for i, block in enumerate(cmodel.blocks):
        for lname, layer in (("main1", block.main1), ("main2", block.main2),
                             ("shortcut", block.shortcut)):
            for k, unit in enumerate(layer.units):
                for tname, arr in unit.named_tensors():
                    out.append((f"block{i}.{lname}.u{k}.{tname}", arr))
    for name, _, arr in cmodel.head.named_params():
        out.append((f"head.{name}", arr))
    return out


def save_model(path, model, feature_names=None, feature_kinds=None,
               preprocess: PreprocessState | None = None,
               target_name: str | None = None) -> None:
    """Write a live or compressed model (plus optional schema/preprocessing)."""
    compressed = isinstance(model, CompressedModel)
    tensors = _compressed_tensors(model) if compressed else _model_tensors(model)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "compressed": compressed,
        "config": _config_to_manifest(model.config),
        "n_features": model.n_features,
        "ghost_size": getattr(model, "ghost_size", None),
        "target": target_name,
        "features": (
            None if feature_names is None
            else [{"name": n, "kind": k} for n, k in zip(feature_names, feature_kinds)]
        ),
        "preprocess": _preprocess_to_manifest(preprocess),
        "bn_updates": (None if compressed
                       else {name: bn.updates for name, bn in model.named_bns()}),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    line = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(line.encode("utf-8") + b"\n")
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


@dataclass
class LoadedModel:
    """A deserialized container: the model plus whatever rode along with it."""

    model: object  # DANet or CompressedModel
    feature_names: list | None
    feature_kinds: list | None
    preprocess: PreprocessState | None
    manifest: dict


def load_model(path) -> LoadedModel:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != MAGIC:
            raise ContainerError(f"{path}: not a model container (bad magic {magic!r})")
        try:
            manifest = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ContainerError(f"{path}: unreadable manifest: {e}") from None
        if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
            raise ContainerError(f"{path}: unsupported container format/version")
        loaded = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ContainerError(f"{path}: truncated tensor data at {entry['name']!r}")
            loaded[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ContainerError(f"{path}: trailing bytes after tensor data")

    cfg = DANetConfig(**manifest["config"])
    n_features = int(manifest["n_features"])
    if manifest["compressed"]:
        model = _build_compressed(cfg, n_features, loaded)
    else:
        model = DANet(n_features, cfg, ghost_size=int(manifest["ghost_size"]), seed=0)
        expected = _model_tensors(model)
        _fill(loaded, expected, path)
        for name, bn in model.named_bns():
            bn.updates = int(manifest["bn_updates"][name])

    features = manifest.get("features")
    names = [f["name"] for f in features] if features else None
    kinds = [f["kind"] for f in features] if features else None
    return LoadedModel(model=model, feature_names=names, feature_kinds=kinds,
                       preprocess=_preprocess_from_manifest(manifest.get("preprocess")),
                       manifest=manifest)


def _fill(loaded: dict, expected: list, path) -> None:
    for name, arr in expected:
        if name not in loaded:
            raise ContainerError(f"{path}: tensor {name!r} missing from container")
        if loaded[name].shape != arr.shape:
            raise ContainerError(
                f"{path}: tensor {name!r} has shape {loaded[name].shape}, "
                f"expected {arr.shape}"
            )
        arr[...] = loaded[name]
    if len(loaded) != len(expected):
        raise ContainerError(f"{path}: container holds unexpected extra tensors")


def _build_compressed(cfg: DANetConfig, n_features: int, loaded: dict) -> CompressedModel:
    def take(name, ndim):
        if name not in loaded:
            raise ContainerError(f"tensor {name!r} missing from container")
        arr = loaded[name]
        if arr.ndim != ndim:
            raise ContainerError(f"tensor {name!r} has ndim {arr.ndim}, expected {ndim}")
        return arr

    blocks = []
    in_dim = n_features
    for i in range(cfg.n_blocks):
        layers = {}
        for lname in ("main1", "main2", "shortcut"):
            units = []
            for k in range(cfg.k0):
                prefix = f"block{i}.{lname}.u{k}"
                units.append(CompressedUnit(
                    w1s=take(f"{prefix}.w1s", 2), b1s=take(f"{prefix}.b1s", 1),
                    w2s=take(f"{prefix}.w2s", 2), b2s=take(f"{prefix}.b2s", 1),
                ))
            layers[lname] = CompressedLayer(units)
        blocks.append(CompressedBlock(layers["main1"], layers["main2"], layers["shortcut"]))
        in_dim = cfg.d0
    from .numerics import Rng
    head = MlpHead(cfg.d0, cfg.hidden_width, cfg.out_dim, Rng(0))
    for name, _, arr in head.named_params():
        arr[...] = take(f"head.{name}", arr.ndim)
    return CompressedModel(n_features=n_features, config=cfg, blocks=blocks, head=head)
