"""Checkpoint directories: QTZ1 tensors plus a JSON manifest."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import qtz
from .balance import BalancedConvLayer, apply_scaling, fold_rotation
from .model import ConvLayer, Dataset, ToyUNet
from .qdlora import LowRankBranches
from .tensor import ConvSpec

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing artifact {path}") from exc


def _manifest(root: Path, kind: str) -> dict:
    m = read_json(root / MANIFEST)
    if m.get("kind") != kind or m.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{root} is not a version-{FORMAT_VERSION} {kind} checkpoint")
    return m


def save_model(root, model: ToyUNet) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    layers = []
    for layer in model.layers.values():
        qtz.save(root / f"{layer.name}.qtz", layer.weight)
        layers.append({"name": layer.name, "kind": layer.kind, "spec": layer.spec.to_dict(),
                       "in_shape": list(layer.in_shape)})
    write_json(root / MANIFEST, {"kind": "model", "version": FORMAT_VERSION, "seed": model.seed,
                                 "gain_range": model.gain_range, "layers": layers})


def load_model(root) -> ToyUNet:
    root = Path(root)
    m = _manifest(root, "model")
    layers = {}
    for entry in m["layers"]:
        spec = ConvSpec(**entry["spec"])
        w = qtz.load(root / f"{entry['name']}.qtz")
        if w.shape != spec.kernel_shape:
            raise CheckpointError(f"{entry['name']}: weight {w.shape} does not match spec")
        layers[entry["name"]] = ConvLayer(entry["name"], entry["kind"], spec, w,
                                          tuple(entry["in_shape"]))
    return ToyUNet.from_layers(layers, m["seed"], m["gain_range"])


def save_dataset(root, data: Dataset) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    qtz.save(root / "hq.qtz", data.hq)
    qtz.save(root / "lq.qtz", data.lq)
    write_json(root / MANIFEST, {"kind": "dataset", "version": FORMAT_VERSION, "seed": data.seed,
                                 "size": len(data), "meta": data.meta})


def load_dataset(root) -> Dataset:
    root = Path(root)
    m = _manifest(root, "dataset")
    return Dataset(qtz.load(root / "hq.qtz"), qtz.load(root / "lq.qtz"), m["seed"], m["meta"])


def balance_to_dict(layers: dict[str, BalancedConvLayer]) -> dict:
    return {name: {"scales": l.balance.scales.tolist(), "alpha": l.balance.alpha,
                   "hadamard_seed": l.balance.hadamard_seed, "folded": l.balance.folded}
            for name, l in layers.items()}


def balance_from_dict(model: ToyUNet, d: dict) -> dict[str, BalancedConvLayer]:
    """Rebuild folded layers from stored scales and seeds (the kernel side is recomputed)."""
    out = {}
    for name, entry in d.items():
        layer = model.layers[name]
        b = apply_scaling(BalancedConvLayer.wrap(layer.weight, layer.spec), np.array(entry["scales"]))
        b.balance = dataclasses.replace(b.balance, alpha=entry["alpha"])
        out[name] = fold_rotation(b, entry["hadamard_seed"]) if entry["folded"] else b
    return out


def save_branches(root, branches: dict[str, LowRankBranches]) -> None:
    """Stores trainable factors; residuals are recomputed from the weights on load."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, b in branches.items():
        params = b.params()
        for p, arr in params.items():
            qtz.save(root / f"{name}.{p}.qtz", arr)
        entries[name] = {"params": sorted(params), "rank": b.rank, "merged": b.merged}
    write_json(root / MANIFEST, {"kind": "branches", "version": FORMAT_VERSION, "layers": entries})


def load_branches(root) -> dict[str, dict[str, np.ndarray]]:
    root = Path(root)
    m = _manifest(root, "branches")
    return {name: {p: qtz.load(root / f"{name}.{p}.qtz") for p in e["params"]}
            for name, e in m["layers"].items()}
