"""Mixed-precision activation bit allocation.

Layers are profiled by quantizing one activation at a time, each gets a
perceptual weight ``w_i = 2**B_i - 1`` from a bit-escalation search, and the
weighted per-layer quantization errors feed a multiple-choice knapsack: one
bit-width per layer, minimum total weighted error, total activation bits
within budget. The knapsack is solved exactly by dynamic programming over an
integral cost grid.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Callable

import numpy as np

from . import _backend
from .fakequant import calibrate_minmax, quantize
from .model import NoiseSchedule, ToyUNet, restore
from .qdlora import FakeQuantizer, QuantConv, QuantizedUNet, quantize_weight, record_layer_inputs, weight_matrix
from .tensor import DimensionError, as_tensor, im2col

log = logging.getLogger(__name__)

CANDIDATE_BITS = (3, 4, 5, 6)
PROBE_MIN_BITS = 2
BRUTE_FORCE_MAX_LAYERS = 12

Distortion = Callable[[np.ndarray, np.ndarray], float]


class InfeasibleAllocationError(ValueError):
    def __init__(self, min_cost: int, budget: float):
        super().__init__(f"budget {budget} is below the minimum achievable cost {min_cost}")
        self.min_cost = min_cost
        self.budget = budget


def mse(pred, ref) -> float:
    return float(np.mean((np.asarray(pred) - np.asarray(ref)) ** 2))


@dataclass
class SensitivityProfile:
    layers: list[str]
    deltas: list[float]
    probe_bits: int | None

    def to_csv(self) -> str:
        rows = ["layer,delta"] + [f"{n},{d!r}" for n, d in zip(self.layers, self.deltas)]
        return "\n".join(rows) + "\n"


@dataclass
class PerceptualWeights:
    layers: list[str]
    bits: list[int]
    evaluations: int
    epsilon: float
    b_max: int

    @property
    def weights(self) -> list[int]:
        return [2**b - 1 for b in self.bits]

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "b_max": self.b_max, "evaluations": self.evaluations,
                "layers": [{"layer": n, "bits": b, "weight": w}
                           for n, b, w in zip(self.layers, self.bits, self.weights)]}


class SingleLayerProbe:
    """Evaluates the model with exactly one layer's input activation fake-quantized."""

    def __init__(self, model: ToyUNet, calib_lq, schedule: NoiseSchedule | None = None,
                 metric: Distortion = mse, t_fixed: int | None = None):
        self.model = model
        self.lq = as_tensor(calib_lq)
        self.schedule = schedule or NoiseSchedule.linear()
        self.metric = metric
        self.t_fixed = t_fixed
        self.inputs = record_layer_inputs(model, self.lq)
        self.reference = restore(model, self.lq, self.schedule, t_fixed)
        self.evaluations = 0

    def delta(self, name: str, bits: int | None) -> float:
        ops = self.model.fp_ops()
        layer = self.model.layers[name]
        act = None if bits is None else FakeQuantizer(calibrate_minmax(self.inputs[name], bits))
        ops[name] = QuantConv(layer.spec, weight_matrix(layer.weight), act)
        self.evaluations += 1
        out = restore(self.model, self.lq, self.schedule, self.t_fixed, ops=ops)
        return self.metric(out, self.reference)

    def desk_epsilon(self, fraction: float = 0.02) -> float:
        """Tolerance as a fraction of the reference output's mean squared magnitude."""
        return fraction * float(np.mean(self.reference**2))


def profile_sensitivity(probe: SingleLayerProbe, probe_bits: int | None = 4) -> SensitivityProfile:
    names = probe.model.names
    return SensitivityProfile(names, [probe.delta(n, probe_bits) for n in names], probe_bits)


def assign_weights(probe: SingleLayerProbe, epsilon: float, b_max: int = 8) -> PerceptualWeights:
    """Per layer, the smallest bit-width from 2 up whose delta is within ``epsilon``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not PROBE_MIN_BITS <= b_max <= 8:
        raise ValueError(f"b_max must be in [{PROBE_MIN_BITS}, 8]")
    start = probe.evaluations
    bits = []
    for name in probe.model.names:
        chosen = b_max
        for b in range(PROBE_MIN_BITS, b_max + 1):
            if probe.delta(name, b) <= epsilon:
                chosen = b
                break
        bits.append(chosen)
    return PerceptualWeights(probe.model.names, bits, probe.evaluations - start, epsilon, b_max)


def layer_loss(weight: float, w, x, qparams_w, qparams_x) -> float:
    """``weight**2 * ||W X - Q(W) Q(X)||_F**2`` for ``W: F x d`` and ``X: d x P``."""
    w, x = as_tensor(w), as_tensor(x)
    if w.ndim != 2 or x.ndim != 2 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"cannot multiply {w.shape} by {x.shape}")
    diff = w @ x - quantize(w, qparams_w) @ quantize(x, qparams_x)
    return weight**2 * float(np.sum(diff**2))


@dataclass
class AllocProblem:
    layers: list[str]
    losses: np.ndarray
    costs: np.ndarray
    budget: float
    bits: tuple[int, ...] = CANDIDATE_BITS
    elems: list[int] = field(default_factory=list)
    clamped: int = 0

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=np.float64)
        self.costs = np.asarray(self.costs, dtype=np.int64)
        if self.losses.shape != self.costs.shape or self.losses.shape[1] != len(self.bits):
            raise DimensionError("loss and cost tables must both be N x len(bits)")
        if np.any(self.losses < 0):
            raise ValueError("losses must be nonnegative")
        if list(self.bits) != sorted(self.bits):
            raise ValueError("candidate bits must be ascending")

    @property
    def n(self) -> int:
        return self.losses.shape[0]

    @property
    def min_cost(self) -> int:
        return int(self.costs.min(axis=1).sum())

    def to_dict(self) -> dict:
        return {"layers": self.layers, "bits": list(self.bits), "losses": self.losses.tolist(),
                "costs": self.costs.tolist(), "budget": self.budget, "elems": self.elems}

    @classmethod
    def from_dict(cls, d: dict) -> "AllocProblem":
        return cls(layers=list(d["layers"]), losses=d["losses"], costs=d["costs"],
                   budget=d["budget"], bits=tuple(d.get("bits", CANDIDATE_BITS)),
                   elems=list(d.get("elems", [])))


@dataclass
class AllocSolution:
    layers: list[str]
    bits: list[int]
    objective: float
    total_cost: int
    average_bits: float

    def to_dict(self) -> dict:
        return {"layers": dict(zip(self.layers, self.bits)), "objective": self.objective,
                "total_cost": self.total_cost, "average_bits": self.average_bits}

    @classmethod
    def from_dict(cls, d: dict) -> "AllocSolution":
        layers = list(d["layers"])
        return cls(layers, [int(d["layers"][n]) for n in layers], float(d["objective"]),
                   int(d["total_cost"]), float(d["average_bits"]))


def average_bits(sol: AllocSolution, p: AllocProblem) -> float:
    elems = p.elems or [1] * p.n
    return sum(b * e for b, e in zip(sol.bits, elems)) / sum(elems)


def _solution(p: AllocProblem, choice: list[int], objective: float) -> AllocSolution:
    bits = [p.bits[c] for c in choice]
    cost = int(sum(p.costs[i, c] for i, c in enumerate(choice)))
    sol = AllocSolution(list(p.layers), bits, float(objective), cost, 0.0)
    sol.average_bits = average_bits(sol, p)
    return sol


def _check_feasible(p: AllocProblem) -> None:
    if p.min_cost > p.budget:
        raise InfeasibleAllocationError(p.min_cost, p.budget)


def solve_allocation(p: AllocProblem) -> AllocSolution:
    """Exact multiple-choice knapsack by suffix DP over ``cost / gcd(costs)`` units.

    ``suf[i, c]`` is the least objective of layers ``i..N-1`` within ``c`` units,
    accumulated as ``L[i] + suf[i+1]`` (last layer first). Reconstruction walks
    from layer 0 and takes the highest bit-width that attains the optimum, so
    ties favour more bits on lower-index layers.
    """
    _check_feasible(p)
    unit = reduce(math.gcd, p.costs.ravel().tolist())
    costs = np.ascontiguousarray(p.costs // unit, dtype=np.int64)
    # budget beyond the all-max-bits cost changes nothing; cap it to bound the table
    capacity = int(min(math.floor(p.budget / unit), costs.max(axis=1).sum()))
    losses = np.ascontiguousarray(p.losses)
    suf = _backend.kernels.mckp_suffix(losses, costs, capacity)
    choice, c = [], capacity
    for i in range(p.n):
        target = suf[i, c]
        for b in range(len(p.bits) - 1, -1, -1):
            m = costs[i, b]
            if m <= c and losses[i, b] + suf[i + 1, c - m] == target:
                choice.append(b)
                c -= m
                break
    return _solution(p, choice, suf[0, capacity])


def brute_force_allocation(p: AllocProblem) -> AllocSolution:
    """Exhaustive enumeration with the same summation order and tie-break as the DP."""
    if p.n > BRUTE_FORCE_MAX_LAYERS:
        raise ValueError(f"brute force supports at most {BRUTE_FORCE_MAX_LAYERS} layers, got {p.n}")
    _check_feasible(p)
    k = len(p.bits)
    obj = p.losses[-1].copy()
    cost = p.costs[-1].copy()
    for i in range(p.n - 2, -1, -1):
        obj = (p.losses[i][:, None] + obj[None, :]).ravel()
        cost = (p.costs[i][:, None] + cost[None, :]).ravel()
    obj = np.where(cost <= p.budget, obj, np.inf)
    best = obj.min()
    flat = int(np.flatnonzero(obj == best)[-1])
    choice = list(np.unravel_index(flat, (k,) * p.n))
    return _solution(p, [int(c) for c in choice], best)


def enforce_monotone(losses: np.ndarray) -> tuple[np.ndarray, int]:
    """Make each row nonincreasing in bits; returns the table and number of clamped entries."""
    fixed = np.minimum.accumulate(losses, axis=1)
    return fixed, int(np.count_nonzero(fixed != losses))


def build_problem(model: ToyUNet, calib_lq, weights: PerceptualWeights, weight_bits: int | None = 4,
                  target_avg_bits: float = 4.0, bits=CANDIDATE_BITS) -> AllocProblem:
    """Weighted loss table ``L[i,b]`` and cost table ``b * elems_i`` on calibration activations."""
    inputs = record_layer_inputs(model, calib_lq)
    w_of = dict(zip(weights.layers, weights.weights))
    rows = []
    for name, layer in model.layers.items():
        x = inputs[name]
        cols = im2col(x, layer.spec)
        w = layer.weight.reshape(layer.spec.out_channels, -1)
        qw = None if weight_bits is None else calibrate_minmax(w, weight_bits, axis=0, symmetric=True)
        row = []
        for b in bits:
            qx = calibrate_minmax(x, b)
            xq_cols = im2col(quantize(x, qx), layer.spec)
            diff = w @ cols - quantize(w, qw) @ xq_cols
            row.append(w_of[name] ** 2 * float(np.sum(diff**2)))
        rows.append(row)
    losses, clamped = enforce_monotone(np.array(rows))
    if clamped:
        log.warning("clamped %d loss-table entries to keep losses nonincreasing in bits", clamped)
    elems = [l.act_elems for l in model.layers.values()]
    costs = np.array([[b * e for b in bits] for e in elems])
    budget = target_avg_bits * sum(elems)
    return AllocProblem(model.names, losses, costs, budget, tuple(bits), elems, clamped)


def random_problem(rng: np.random.Generator, n: int, budget_fraction: float,
                   max_elems: int = 40) -> AllocProblem:
    """Seeded MCKP instance; ``budget_fraction`` 0 is the tightest feasible budget, 1 the slackest."""
    elems = rng.integers(1, max_elems + 1, n)
    base = rng.exponential(1.0, (n, 1)) * 4.0 ** -np.arange(len(CANDIDATE_BITS))[None, :]
    losses, _ = enforce_monotone(base * rng.uniform(0.5, 1.5, base.shape))
    costs = np.array([[b * e for b in CANDIDATE_BITS] for e in elems])
    lo, hi = costs[:, 0].sum(), costs[:, -1].sum()
    budget = float(lo + budget_fraction * (hi - lo))
    return AllocProblem([f"layer{i}" for i in range(n)], losses, costs, budget,
                        CANDIDATE_BITS, elems.tolist())
