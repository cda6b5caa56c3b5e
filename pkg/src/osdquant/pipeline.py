"""Run configuration, compression accounting and the staged quantization pipeline.

Stages run in the order ``setup -> profile -> allocate -> balance -> train ->
eval``; each reads its inputs from the run directory and writes its outputs
there, so any stage can be rerun on its own. Missing prerequisites are
produced on demand.

All randomness derives from one root seed: the seed for ``(stage, index)`` is
``SeedSequence(root, spawn_key=(crc32(stage), index))``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import bitalloc
from .balance import BalanceReport, balance_layer
from .fakequant import MAX_BITS, MIN_BITS
from .model import NoiseSchedule, ToyUNet, make_synthetic_dataset, restore
from .qdlora import (DEFAULT_RANK, METRICS, QuantizedUNet, TrainConfig, build_quantized,
                     distill_train, record_layer_inputs)
from .serialize import (balance_from_dict, balance_to_dict, load_branches, load_dataset,
                        load_model, read_json, save_branches, save_dataset, save_model, write_json)
from .tensor import is_power_of_two

log = logging.getLogger(__name__)

FULL_PRECISION = 32
REPORT_SCHEMA_VERSION = 1
STAGES = ("setup", "profile", "allocate", "balance", "train", "eval")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(root: int, stage: str, index: int = 0) -> int:
    ss = np.random.SeedSequence(root, spawn_key=(zlib.crc32(stage.encode()), index))
    return int(ss.generate_state(1, np.uint64)[0])


# --- configuration -------------------------------------------------------------

_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}


def _check_bits(name: str, value, allow_mixed: bool = False) -> None:
    if allow_mixed and value == "mixed":
        return
    if isinstance(value, bool) or not isinstance(value, int) or not (
            MIN_BITS <= value <= MAX_BITS or value == FULL_PRECISION):
        extra = ', "mixed"' if allow_mixed else ""
        raise ConfigError(f"{name} must be {MIN_BITS}..{MAX_BITS} or {FULL_PRECISION}{extra}; got {value!r}")


@dataclass
class RunConfig:
    seed: int = 0
    bits_weights: int = 4
    bits_acts: int | str = "mixed"
    target_avg_bits: float = 4.0
    allocation_path: str | None = None
    balance: bool = True
    alpha: float = 0.5
    rank: int = DEFAULT_RANK
    lora: bool = True
    train: bool = True
    training: dict = field(default_factory=dict)
    calib_size: int = 8
    heldout_size: int = 8
    metric: str = "mse"
    epsilon_fraction: float = 0.02
    b_max: int = 8
    probe_bits: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        _check_bits("bits_weights", self.bits_weights)
        _check_bits("bits_acts", self.bits_acts, allow_mixed=True)
        _check_bits("probe_bits", self.probe_bits)
        if self.bits_acts == "mixed" and not 3 <= self.target_avg_bits <= 6:
            raise ConfigError("target_avg_bits must lie in the candidate range [3, 6]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if not isinstance(self.rank, int) or self.rank < 0:
            raise ConfigError("rank must be a nonnegative integer")
        if self.calib_size < 1 or self.heldout_size < 1:
            raise ConfigError("dataset sizes must be positive")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {sorted(METRICS)}")
        if self.epsilon_fraction <= 0:
            raise ConfigError("epsilon_fraction must be positive")
        if not MIN_BITS <= self.b_max <= MAX_BITS:
            raise ConfigError(f"b_max must be in [{MIN_BITS}, {MAX_BITS}]")
        unknown = set(self.training) - _TRAIN_KEYS
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        try:
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"training: {exc}") from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=derive_seed(self.seed, "train"), **self.training)

    @property
    def weight_bits(self) -> int | None:
        return None if self.bits_weights == FULL_PRECISION else self.bits_weights

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)


# --- compression accounting ----------------------------------------------------

def compression_ratio(fp_size: float, q_size: float) -> float:
    """Size reduction in percent, rounded to two decimals."""
    if not fp_size > 0 or not 0 < q_size <= fp_size:
        raise ValueError(f"need fp_size > 0 and 0 < q_size <= fp_size, got {fp_size}, {q_size}")
    return round(100.0 * (1.0 - q_size / fp_size), 2)


@dataclass(frozen=True)
class Footprint:
    """Parameters in 32-bit equivalents and ops in full-precision mult-add equivalents."""

    params: float
    ops: float

    def to_dict(self) -> dict:
        return {"params": self.params, "ops": self.ops}


def _per_layer(value, names) -> dict:
    return dict(value) if isinstance(value, dict) else {n: value for n in names}


def model_footprint(model: ToyUNet, weight_bits: int | None = None, act_bits=None,
                    ranks=0, rotated=()) -> Footprint:
    """Effective storage and compute of a quantized configuration.

    Weights count ``b_w / 32`` each, branch factors and the mult-adds they cost
    count in full, a sign vector counts one bit per channel. Conv mult-adds are
    scaled by ``b_w * b_a / 32**2``; rotated layers add their online FWHT.
    """
    acts = _per_layer(act_bits, model.names)
    ranks = _per_layer(ranks, model.names)
    rotated = set(rotated)
    bw = FULL_PRECISION if weight_bits is None else weight_bits
    params = ops = 0.0
    for name, layer in model.layers.items():
        ba = acts.get(name) or FULL_PRECISION
        r = ranks.get(name, 0)
        d, f = layer.spec.patch_size, layer.spec.out_channels
        positions = layer.out_hw[0] * layer.out_hw[1]
        params += layer.weight.size * bw / FULL_PRECISION + (d + f) * r
        ops += layer.macs * bw * ba / FULL_PRECISION**2 + positions * (d + f) * r
        if name in rotated:
            params += layer.spec.in_channels / FULL_PRECISION
            ops += layer.cost.rht_ops
    return Footprint(params, ops)


@dataclass(frozen=True)
class CompressionReport:
    """Footprints and reductions versus full precision.

    ``*_reduction`` is the signed fraction ``1 - q/fp``; it goes negative when
    full-precision branch overheads outweigh the savings, which happens on
    narrow layers. The percentage is only defined for an actual reduction.
    """

    full_precision: Footprint
    quantized: Footprint

    def _ratio(self, fp: float, q: float) -> float | None:
        return compression_ratio(fp, q) if q <= fp else None

    @property
    def params_ratio(self) -> float | None:
        return self._ratio(self.full_precision.params, self.quantized.params)

    @property
    def ops_ratio(self) -> float | None:
        return self._ratio(self.full_precision.ops, self.quantized.ops)

    def to_dict(self) -> dict:
        return {"full_precision": self.full_precision.to_dict(),
                "quantized": self.quantized.to_dict(),
                "params_ratio_pct": self.params_ratio, "ops_ratio_pct": self.ops_ratio,
                "params_reduction": 1.0 - self.quantized.params / self.full_precision.params,
                "ops_reduction": 1.0 - self.quantized.ops / self.full_precision.ops}


def compression_report(model: ToyUNet, weight_bits, act_bits, ranks=0, rotated=()) -> CompressionReport:
    return CompressionReport(model_footprint(model), model_footprint(model, weight_bits, act_bits,
                                                                     ranks, rotated))


def rht_overhead_of(model: ToyUNet, rotated) -> float:
    """Online-RHT ops of the rotated layers relative to the whole model's conv mult-adds."""
    rotated = set(rotated)
    fp = sum(l.macs for l in model.layers.values())
    return sum(l.cost.rht_ops for n, l in model.layers.items() if n in rotated) / fp


# --- run directory and stages -------------------------------------------------

def mse(pred, ref) -> float:
    return float(np.mean((pred - ref) ** 2))


def _csv(rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


class Run:
    """A pipeline run rooted at a directory."""

    def __init__(self, cfg: RunConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self.schedule = NoiseSchedule.linear()

    def path(self, name: str) -> Path:
        return self.out / name

    def _ensure(self, artifact: str, stage: str) -> None:
        if not self.path(artifact).exists():
            self.stage(stage)

    def stage(self, name: str):
        if name not in STAGES:
            raise ValueError(f"unknown stage {name!r}")
        self.out.mkdir(parents=True, exist_ok=True)
        try:
            return getattr(self, f"_{name}")()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc

    # loaders -----------------------------------------------------------------

    def model(self) -> ToyUNet:
        self._ensure("model", "setup")
        return load_model(self.path("model"))

    def dataset(self, split: str):
        self._ensure(split, "setup")
        return load_dataset(self.path(split))

    def allocation(self) -> dict:
        self._ensure("allocation.json", "allocate")
        return read_json(self.path("allocation.json"))

    def act_bits(self) -> dict:
        bits = self.allocation()["layers"]
        return {n: (None if b == FULL_PRECISION else b) for n, b in bits.items()}

    def balanced(self, model: ToyUNet) -> dict:
        if not self.cfg.balance:
            return {}
        self._ensure("balance.json", "balance")
        return balance_from_dict(model, read_json(self.path("balance.json"))["layers"])

    def quantized(self, model: ToyUNet, calib_lq, lora: bool | None = None) -> QuantizedUNet:
        cfg = self.cfg
        return build_quantized(model, calib_lq, cfg.weight_bits, self.act_bits(),
                               self.balanced(model), cfg.rank,
                               cfg.lora if lora is None else lora, derive_seed(cfg.seed, "lora"))

    def trained(self, model: ToyUNet, calib_lq) -> QuantizedUNet:
        """Quantized model with the stored (merged) branches swapped in."""
        self._ensure("branches", "train")
        q = self.quantized(model, calib_lq, lora=False)
        stored = load_branches(self.path("branches"))
        for name, op in q.branch_layers().items():
            p = stored[name]
            op.branches = dataclasses.replace(op.branches, L1=p["L1"], L2=p["L2"], A=None, B=None)
        return q

    # stages ----------------------------------------------------------------

    def _setup(self) -> None:
        cfg = self.cfg
        write_json(self.path("config.json"), cfg.to_dict())
        save_model(self.path("model"), ToyUNet(derive_seed(cfg.seed, "model")))
        save_dataset(self.path("calib"), make_synthetic_dataset(cfg.calib_size, derive_seed(cfg.seed, "calib")))
        save_dataset(self.path("heldout"), make_synthetic_dataset(cfg.heldout_size, derive_seed(cfg.seed, "heldout")))

    def _profile(self) -> dict:
        cfg = self.cfg
        model, calib = self.model(), self.dataset("calib")
        metric = lambda a, b: METRICS[cfg.metric](a, b)[0]
        probe = bitalloc.SingleLayerProbe(model, calib.lq, self.schedule, metric)
        prof = bitalloc.profile_sensitivity(probe, cfg.probe_bits)
        eps = probe.desk_epsilon(cfg.epsilon_fraction)
        weights = bitalloc.assign_weights(probe, eps, cfg.b_max)
        problem = bitalloc.build_problem(model, calib.lq, weights, cfg.weight_bits, cfg.target_avg_bits)
        self.path("sensitivity.csv").write_text(prof.to_csv())
        write_json(self.path("weights.json"), weights.to_dict())
        write_json(self.path("loss_table.json"), problem.to_dict())
        return {"sensitivity": dict(zip(prof.layers, prof.deltas)), "weights": weights.to_dict(),
                "clamped": problem.clamped}

    def _allocate(self) -> dict:
        cfg = self.cfg
        names = self.model().names
        if cfg.bits_acts != "mixed":
            out = {"mode": "uniform", "layers": {n: cfg.bits_acts for n in names},
                   "objective": None, "total_cost": None, "average_bits": float(cfg.bits_acts)}
        elif cfg.allocation_path:
            out = dict(read_json(cfg.allocation_path), mode="mixed")
            if sorted(out["layers"]) != sorted(names):
                raise ConfigError("allocation file does not cover the model's layers")
        else:
            self._ensure("loss_table.json", "profile")
            problem = bitalloc.AllocProblem.from_dict(read_json(self.path("loss_table.json")))
            out = dict(bitalloc.solve_allocation(problem).to_dict(), mode="mixed")
        write_json(self.path("allocation.json"), out)
        return out

    def _balance(self) -> dict:
        cfg = self.cfg
        model, calib = self.model(), self.dataset("calib")
        inputs = record_layer_inputs(model, calib.lq)
        layers, diag = {}, BalanceReport()
        for i, (name, layer) in enumerate(model.layers.items()):
            seed = derive_seed(cfg.seed, "hadamard", i)
            rotate = is_power_of_two(layer.spec.in_channels)
            layers[name] = balance_layer(layer.weight, layer.spec, inputs[name], cfg.alpha, seed, rotate)
            diag.add(name, inputs[name], layer.weight, cfg.alpha, seed, layers[name].balance.scales)
        out = {"layers": balance_to_dict(layers)}
        write_json(self.path("balance.json"), out)
        write_json(self.path("balance_report.json"), diag.to_dict())
        return out

    def _train(self) -> dict:
        cfg = self.cfg
        model, calib, held = self.model(), self.dataset("calib"), self.dataset("heldout")
        q = self.quantized(model, calib.lq)
        held_fp = restore(model, held.lq, self.schedule)
        summary = {"enabled": cfg.train, "heldout_mse_before": mse(q.restore(held.lq, self.schedule), held_fp)}
        trace = []
        if cfg.train and q.branch_layers():
            result = distill_train(q, model, calib.lq, cfg.train_config(), self.schedule)
            q, trace = result.model, result.trace
            summary.update(initial_loss=result.initial_loss, final_loss=result.final_loss,
                           loss_ratio=result.final_loss / result.initial_loss,
                           iterations=len(trace) - 1)
        q = q.merged()
        summary["heldout_mse_after"] = mse(q.restore(held.lq, self.schedule), held_fp)
        save_branches(self.path("branches"), {n: op.branches for n, op in q.branch_layers().items()})
        rows = [["iteration", "total", "mse_term", "perc_term", "penalty"]]
        rows += [[i, t.total, t.mse, t.perceptual, t.penalty] for i, t in enumerate(trace)]
        self.path("trace.csv").write_text(_csv(rows))
        write_json(self.path("train.json"), summary)
        return summary

    def _eval(self) -> dict:
        cfg = self.cfg
        model, calib, held = self.model(), self.dataset("calib"), self.dataset("heldout")
        fp = restore(model, held.lq, self.schedule)
        q = self.trained(model, calib.lq)
        naive = build_quantized(model, calib.lq, 4, 4, rank=0)
        acts = self.act_bits()
        ranks = {n: op.branches.rank for n, op in q.branch_layers().items()}
        rotated = [n for n, b in self.balanced(model).items() if b.balance.folded]
        comp = compression_report(model, cfg.weight_bits, acts, ranks, rotated)
        out = {
            "heldout_mse": mse(q.restore(held.lq, self.schedule), fp),
            "naive_w4a4_heldout_mse": mse(naive.restore(held.lq, self.schedule), fp),
            "compression": comp.to_dict(),
            "naive_w4a4_compression": compression_report(model, 4, 4).to_dict(),
            "rht_overhead": rht_overhead_of(model, rotated),
            "ranks": ranks,
        }
        write_json(self.path("eval.json"), out)
        return out

    # report ----------------------------------------------------------------

    def report(self) -> dict:
        """Run every stage in order and assemble the versioned report."""
        cfg = self.cfg
        self.stage("setup")
        profile = self.stage("profile") if cfg.bits_acts == "mixed" and not cfg.allocation_path else None
        alloc = self.stage("allocate")
        balance = self.stage("balance") if cfg.balance else None
        train = self.stage("train")
        ev = self.stage("eval")
        model = self.model()
        entries = []
        weights = {} if profile is None else {
            e["layer"]: e["weight"] for e in profile["weights"]["layers"]}
        spread = {} if balance is None else read_json(self.path("balance_report.json"))["layers"]
        for reg in model.registry():
            e = {"name": reg.handle, "kind": reg.kind, "act_elems": reg.act_elems,
                 "act_bits": alloc["layers"][reg.handle], "weight_bits": cfg.bits_weights,
                 "rank": ev["ranks"].get(reg.handle, 0)}
            if profile is not None:
                e["sensitivity"] = profile["sensitivity"][reg.handle]
                e["perceptual_weight"] = weights[reg.handle]
            if reg.handle in spread:
                e["spread"] = spread[reg.handle]["spread"]
            entries.append(e)
        report = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "config": cfg.to_dict(),
            "layers": entries,
            "allocation": {k: alloc[k] for k in ("mode", "objective", "total_cost", "average_bits")},
            "training": train,
            "evaluation": {k: ev[k] for k in ("heldout_mse", "naive_w4a4_heldout_mse", "rht_overhead")},
            "compression": ev["compression"],
            "naive_w4a4_compression": ev["naive_w4a4_compression"],
        }
        validate_report(report)
        write_json(self.path("report.json"), report)
        self.path("report.csv").write_text(report_csv(report))
        return report


def report_csv(report: dict) -> str:
    rows = [["section", "key", "value"]]
    for k in ("heldout_mse", "naive_w4a4_heldout_mse", "rht_overhead"):
        rows.append(["evaluation", k, report["evaluation"][k]])
    for k, v in report["training"].items():
        rows.append(["training", k, v])
    rows.append(["allocation", "average_bits", report["allocation"]["average_bits"]])
    for k in ("params_ratio_pct", "ops_ratio_pct"):
        rows.append(["compression", k, report["compression"][k]])
    for e in report["layers"]:
        rows.append(["act_bits", e["name"], e["act_bits"]])
    return _csv(rows)


_NUM = {"type": "number"}
_OPT_NUM = {"type": ["number", "null"]}
_FOOTPRINT = {"type": "object", "required": ["params", "ops"],
              "properties": {"params": _NUM, "ops": _NUM}}
_COMPRESSION = {
    "type": "object",
    "required": ["full_precision", "quantized", "params_ratio_pct", "ops_ratio_pct",
                 "params_reduction", "ops_reduction"],
    "properties": {"full_precision": _FOOTPRINT, "quantized": _FOOTPRINT,
                   "params_ratio_pct": _OPT_NUM, "ops_ratio_pct": _OPT_NUM,
                   "params_reduction": {"type": "number", "exclusiveMaximum": 1},
                   "ops_reduction": {"type": "number", "exclusiveMaximum": 1}},
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "config", "layers", "allocation", "training", "evaluation",
                 "compression", "naive_w4a4_compression"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "config": {"type": "object"},
        "layers": {"type": "array", "minItems": 1, "items": {
            "type": "object",
            "required": ["name", "kind", "act_elems", "act_bits", "weight_bits", "rank"],
            "properties": {
                "name": {"type": "string"},
                "kind": {"enum": ["conv", "downsample", "upsample", "skip-add"]},
                "act_elems": {"type": "integer", "minimum": 1},
                "act_bits": {"type": "integer"},
                "weight_bits": {"type": "integer"},
                "rank": {"type": "integer", "minimum": 0},
                "sensitivity": {"type": "number", "minimum": 0},
                "perceptual_weight": {"enum": [3, 7, 15, 31, 63, 127, 255]},
                "spread": {"type": "object"},
            }}},
        "allocation": {"type": "object", "required": ["mode", "average_bits"],
                       "properties": {"mode": {"enum": ["uniform", "mixed"]},
                                      "objective": _OPT_NUM, "total_cost": {"type": ["integer", "null"]},
                                      "average_bits": _NUM}},
        "training": {"type": "object", "required": ["enabled", "heldout_mse_before", "heldout_mse_after"],
                     "properties": {"enabled": {"type": "boolean"}, "heldout_mse_before": _NUM,
                                    "heldout_mse_after": _NUM, "initial_loss": _NUM,
                                    "final_loss": _NUM, "loss_ratio": _NUM,
                                    "iterations": {"type": "integer"}}},
        "evaluation": {"type": "object", "required": ["heldout_mse", "naive_w4a4_heldout_mse"],
                       "properties": {"heldout_mse": {"type": "number", "minimum": 0},
                                      "naive_w4a4_heldout_mse": {"type": "number", "minimum": 0},
                                      "rht_overhead": {"type": "number", "minimum": 0}}},
        "compression": _COMPRESSION,
        "naive_w4a4_compression": _COMPRESSION,
    },
}


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)


def run_pipeline(cfg: RunConfig, out) -> dict:
    return Run(cfg, out).report()
