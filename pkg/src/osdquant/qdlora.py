"""Dual low-rank branches around a quantized residual, trained by distillation.

For a layer ``Y = X W`` (``X``: im2col rows, ``W``: ``d x d'``)::

    Y ~ X A B + X L1 L2 + Q(X) Q(R),   R = W - L1_0 L2_0

``L1_0 L2_0`` is the rank-r truncated SVD of ``W``; ``A`` is Gaussian and ``B``
zero at init, so step 0 reproduces the SVD-split layer exactly. ``Q(R)`` is
computed once and frozen. Low-rank paths read the unquantized ``X``.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .balance import BalancedConvLayer
from .fakequant import FakeQuantizer, LinearizedQuantizer, QuantParams, calibrate_minmax, quantize
from .model import ToyUNet, estimate_grad_wrt_eps, restore, NoiseSchedule
from .tensor import ConvSpec, DimensionError, NumericalError, as_tensor, col2im, im2col, thin_svd

log = logging.getLogger(__name__)

DEFAULT_RANK = 8
BRANCH_PARAMS = ("L1", "L2", "A", "B")


class TrainingDivergedError(NumericalError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class ForwardCacheError(RuntimeError):
    """backward() called without a preceding forward()."""


@dataclass
class LowRankBranches:
    L1: np.ndarray
    L2: np.ndarray
    residual: np.ndarray
    residual_params: QuantParams | None
    L1_init: np.ndarray
    L2_init: np.ndarray
    A: np.ndarray | None = None
    B: np.ndarray | None = None

    @property
    def rank(self) -> int:
        return self.L1.shape[1]

    @property
    def merged(self) -> bool:
        return self.A is None

    def params(self) -> dict[str, np.ndarray]:
        names = ("L1", "L2") if self.merged else BRANCH_PARAMS
        return {n: getattr(self, n) for n in names}

    def low_rank_weight(self) -> np.ndarray:
        w = self.L1 @ self.L2
        if not self.merged:
            w = w + self.A @ self.B
        return w


def weight_matrix(kernel: np.ndarray) -> np.ndarray:
    """Conv kernel ``F x C x Kh x Kw`` as the ``(C*Kh*Kw) x F`` matrix ``W`` of ``Y = X W``."""
    return np.ascontiguousarray(kernel.reshape(kernel.shape[0], -1).T)


def quantize_weight(w: np.ndarray, bits: int | None) -> tuple[np.ndarray, QuantParams | None]:
    """Per-output-channel (column) symmetric MinMax quantization; ``None`` keeps FP."""
    if bits is None:
        return w.copy(), None
    p = calibrate_minmax(w, bits, axis=1, symmetric=True)
    return quantize(w, p), p


def init_svd_branch(w, r: int, weight_bits: int | None = 4) -> LowRankBranches:
    """Rank-r SVD branch plus the frozen quantized residual."""
    w = as_tensor(w)
    if w.ndim != 2:
        raise DimensionError(f"expected a weight matrix, got {w.shape}")
    if not 0 <= r <= min(w.shape):
        raise ValueError(f"rank {r} exceeds min{w.shape}")
    u, s, v = thin_svd(w)
    l1 = u[:, :r] * s[:r]
    l2 = v[:r, :].copy()
    resid = w - l1 @ l2
    rq, rp = quantize_weight(resid, weight_bits)
    return LowRankBranches(L1=l1, L2=l2, residual=rq, residual_params=rp,
                           L1_init=l1.copy(), L2_init=l2.copy())


def init_lora_branch(d: int, d_out: int, r: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian ``A`` scaled by ``1/sqrt(r)`` and zero ``B``."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, r)) / np.sqrt(max(r, 1))
    return a, np.zeros((r, d_out))


def attach_lora(branches: LowRankBranches, seed: int) -> LowRankBranches:
    d, r = branches.L1.shape
    a, b = init_lora_branch(d, branches.L2.shape[1], r, seed)
    return dataclasses.replace(branches, A=a, B=b)


def merge_branches(branches: LowRankBranches) -> LowRankBranches:
    """Concatenate ``[L1 | A]`` and ``[L2 ; B]`` into a single rank-2r branch."""
    if branches.merged:
        return branches
    return dataclasses.replace(
        branches,
        L1=np.hstack([branches.L1, branches.A]),
        L2=np.vstack([branches.L2, branches.B]),
        A=None, B=None,
    )


def forward_qdlora(x, branches: LowRankBranches, act_qparams: QuantParams | None) -> np.ndarray:
    """Matrix form of the quantized layer.

    Evaluated as ``(X A B + X L1 L2) + Q(X) R_q``; a merged branch evaluates
    ``X L1 L2 + Q(X) R_q`` with the concatenated factors.
    """
    x = as_tensor(x)
    out = (x @ branches.L1) @ branches.L2
    if not branches.merged:
        out = (x @ branches.A) @ branches.B + out
    return out + quantize(x, act_qparams) @ branches.residual


@dataclass
class _Cache:
    xt: np.ndarray
    cols: np.ndarray
    mask: np.ndarray | None
    xa: np.ndarray | None = None
    xl1: np.ndarray | None = None


class QuantConv:
    """A conv layer in quantized form, usable as an op of :meth:`ToyUNet.forward`.

    The input goes through the optional balancing transform, then splits into
    the high-precision low-rank path (if any) and the fake-quantized residual
    path. ``backward`` writes branch gradients into ``self.grads``.
    """

    def __init__(self, spec: ConvSpec, residual: np.ndarray, act=None,
                 balance: BalancedConvLayer | None = None,
                 branches: LowRankBranches | None = None,
                 weight_params: QuantParams | None = None):
        self.spec = spec
        self.residual = residual if branches is None else branches.residual
        self.weight_params = weight_params if branches is None else branches.residual_params
        self.act = act
        self.balance = balance
        self.branches = branches
        self.grads: dict[str, np.ndarray] = {}
        self._cache: _Cache | None = None

    @property
    def act_params(self) -> QuantParams | None:
        return None if self.act is None else self.act.params

    def transform(self, x: np.ndarray) -> np.ndarray:
        return x if self.balance is None else self.balance.transform_input(x)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        xt = self.transform(x)
        n = xt.shape[0]
        h_out, w_out = self.spec.output_hw(xt.shape[2], xt.shape[3])
        cols = im2col(xt, self.spec)
        if self.act is None:
            mask, cols_q = None, cols
        else:
            xq, mask = self.act(xt)
            cols_q = im2col(xq, self.spec)
        cache = _Cache(xt, cols, mask)
        y = cols_q.T @ self.residual
        b = self.branches
        if b is not None:
            xrows = cols.T
            cache.xl1 = xrows @ b.L1
            low = cache.xl1 @ b.L2
            if not b.merged:
                cache.xa = xrows @ b.A
                low = cache.xa @ b.B + low
            y = low + y
        self._cache = cache
        f = self.spec.out_channels
        return np.ascontiguousarray(y.reshape(n, h_out, w_out, f).transpose(0, 3, 1, 2))

    def backward(self, gy: np.ndarray) -> np.ndarray:
        c = self._cache
        if c is None:
            raise ForwardCacheError("QuantConv.backward without a cached forward")
        f = self.spec.out_channels
        g = gy.transpose(0, 2, 3, 1).reshape(-1, f)
        g_cols_q = self.residual @ g.T
        gx_t = col2im(g_cols_q, c.xt.shape, self.spec)
        if c.mask is not None:
            gx_t = gx_t * c.mask
        b = self.branches
        if b is not None:
            g_l2 = g @ b.L2.T
            self.grads["L2"] = c.xl1.T @ g
            self.grads["L1"] = c.cols @ g_l2
            g_cols = b.L1 @ g_l2.T
            if not b.merged:
                g_b = g @ b.B.T
                self.grads["B"] = c.xa.T @ g
                self.grads["A"] = c.cols @ g_b
                g_cols = b.A @ g_b.T + g_cols
            gx_t = gx_t + col2im(g_cols, c.xt.shape, self.spec)
        if self.balance is not None:
            return self.balance.transform_input_grad(gx_t)
        return gx_t


class QuantizedUNet:
    """A :class:`ToyUNet` whose registered convs are replaced by quantized ops."""

    def __init__(self, base: ToyUNet, ops: dict[str, object]):
        self.base = base
        self.ops = ops

    def forward(self, x, tape=None, skips: bool = True):
        return self.base.forward(x, ops=self.ops, tape=tape, skips=skips)

    def restore(self, lq, schedule: NoiseSchedule, t_fixed=None, tape=None):
        return restore(self.base, lq, schedule, t_fixed, ops=self.ops, tape=tape)

    def copy(self) -> "QuantizedUNet":
        return QuantizedUNet(self.base, copy.deepcopy(self.ops))

    def branch_layers(self) -> dict[str, QuantConv]:
        return {n: op for n, op in self.ops.items()
                if isinstance(op, QuantConv) and op.branches is not None}

    def merged(self) -> "QuantizedUNet":
        out = self.copy()
        for op in out.branch_layers().values():
            op.branches = merge_branches(op.branches)
        return out

    def linearized(self, lq) -> "QuantizedUNet":
        """Copy whose activation quantizers are first-order expansions at this batch."""
        out = self.copy()
        out.forward(lq)
        for op in out.ops.values():
            if isinstance(op, QuantConv) and op.act is not None:
                op.act = LinearizedQuantizer(op.act.params, op._cache.xt)
        return out


class _Recorder:
    """Wraps an op and keeps the inputs it sees."""

    def __init__(self, op):
        self.op = op
        self.inputs = []

    def __call__(self, x):
        self.inputs.append(x)
        return self.op(x)


def record_layer_inputs(model: ToyUNet, lq, ops=None) -> dict[str, np.ndarray]:
    """Input activation of every registered conv on one forward pass."""
    ops = model.fp_ops() if ops is None else ops
    rec = {n: _Recorder(op) for n, op in ops.items()}
    model.forward(lq, ops=rec)
    return {n: np.concatenate(r.inputs) for n, r in rec.items()}


def layer_rank(d: int, d_out: int, rank: int) -> int:
    """Branch rank for a ``d x d_out`` layer: at most half its smaller side."""
    return max(0, min(rank, min(d, d_out) // 2))


def build_quantized(model: ToyUNet, calib_lq, weight_bits: int | None = 4,
                    act_bits: dict[str, int | None] | int | None = 4,
                    balanced: dict[str, BalancedConvLayer] | None = None,
                    rank: int = DEFAULT_RANK, lora: bool = True, seed: int = 0,
                    layer_inputs: dict[str, np.ndarray] | None = None) -> QuantizedUNet:
    """Quantize every registered conv.

    Activation quantizers are per-tensor asymmetric MinMax, calibrated on the
    full-precision (balanced, where applicable) inputs of ``calib_lq``. With
    ``rank > 0`` each layer gets an SVD branch (and a LoRA branch if ``lora``);
    otherwise its weights are quantized directly.
    """
    if not isinstance(act_bits, dict):
        act_bits = {n: act_bits for n in model.names}
    balanced = balanced or {}
    inputs = layer_inputs if layer_inputs is not None else record_layer_inputs(model, calib_lq)
    ss = np.random.SeedSequence(seed)
    ops = {}
    for i, (name, layer) in enumerate(model.layers.items()):
        bal = balanced.get(name)
        kernel = layer.weight if bal is None else bal.transformed
        xt = inputs[name] if bal is None else bal.transform_input(inputs[name])
        bits = act_bits.get(name)
        act = None if bits is None else FakeQuantizer(calibrate_minmax(xt, bits))
        w = weight_matrix(kernel)
        r = layer_rank(*w.shape, rank)
        if r > 0:
            branches = init_svd_branch(w, r, weight_bits)
            if lora:
                lora_seed = int(np.random.SeedSequence(ss.entropy, spawn_key=(i,)).generate_state(1)[0])
                branches = attach_lora(branches, lora_seed)
            ops[name] = QuantConv(layer.spec, branches.residual, act, bal, branches)
        else:
            rq, rp = quantize_weight(w, weight_bits)
            ops[name] = QuantConv(layer.spec, rq, act, bal, weight_params=rp)
    return QuantizedUNet(model, ops)


# --- distillation ------------------------------------------------------------

Metric = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def mse_metric(pred, ref) -> tuple[float, np.ndarray]:
    diff = pred - ref
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def _pool2(x):
    *lead, h, w = x.shape
    return x.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def downsampled_mse_metric(pred, ref) -> tuple[float, np.ndarray]:
    """MSE after 2x2 average pooling: a pixel-domain stand-in for a learned perceptual loss."""
    diff = _pool2(pred) - _pool2(ref)
    g = 2.0 * diff / diff.size / 4.0
    return float(np.mean(diff**2)), g.repeat(2, axis=-2).repeat(2, axis=-1)


METRICS: dict[str, Metric] = {"mse": mse_metric, "downsampled-mse": downsampled_mse_metric}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    iterations: int = 200
    lambda1: float = 0.5
    lambda2: float = 0.5
    seed: int = 0
    mu: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    perceptual: str = "downsampled-mse"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            raise ValueError("loss weights must be nonnegative and not both zero")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.perceptual not in METRICS:
            raise ValueError(f"unknown perceptual metric {self.perceptual!r}")


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for key in sorted(params):
            g = grads[key]
            m = self.m.get(key, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(key, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[key], self.v[key] = m, v
            params[key] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class LossTerms:
    total: float
    mse: float
    perceptual: float
    penalty: float = 0.0


def distill_loss(qmodel: QuantizedUNet, lq, target, schedule: NoiseSchedule,
                 cfg: TrainConfig, t_fixed=None) -> tuple[LossTerms, dict]:
    """Distillation loss against ``target`` and exact gradients for every branch matrix."""
    tape = {}
    pred = qmodel.restore(lq, schedule, t_fixed, tape=tape)
    mse, g_mse = mse_metric(pred, target)
    perc, g_perc = METRICS[cfg.perceptual](pred, target)
    total = cfg.lambda1 * perc + cfg.lambda2 * mse
    g_pred = cfg.lambda1 * g_perc + cfg.lambda2 * g_mse
    t = schedule.T if t_fixed is None else t_fixed
    qmodel.base.backward(tape, g_pred * estimate_grad_wrt_eps(t, schedule), qmodel.ops)
    grads, penalty = {}, 0.0
    for name, op in qmodel.branch_layers().items():
        b = op.branches
        for p in b.params():
            grads[(name, p)] = op.grads[p]
        if cfg.mu > 0:
            diff = b.L1 @ b.L2 - b.L1_init @ b.L2_init
            penalty += cfg.mu * float(np.sum(diff**2))
            grads[(name, "L1")] = grads[(name, "L1")] + 2.0 * cfg.mu * diff @ b.L2.T
            grads[(name, "L2")] = grads[(name, "L2")] + 2.0 * cfg.mu * b.L1.T @ diff
    return LossTerms(total + penalty, mse, perc, penalty), grads


def branch_params(qmodel: QuantizedUNet) -> dict:
    return {(name, p): arr for name, op in qmodel.branch_layers().items()
            for p, arr in op.branches.params().items()}


@dataclass
class TrainResult:
    model: QuantizedUNet
    trace: list[LossTerms] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.trace[0].total

    @property
    def final_loss(self) -> float:
        return self.trace[-1].total


def distill_train(qmodel: QuantizedUNet, fp_model: ToyUNet, calib_lq, cfg: TrainConfig,
                  schedule: NoiseSchedule | None = None, t_fixed=None) -> TrainResult:
    """Adam on every branch matrix against the full-precision restoration of ``calib_lq``.

    The trace holds ``iterations + 1`` entries: the loss before each update and
    the loss after the last one. The input model is not modified.
    """
    schedule = schedule or NoiseSchedule.linear()
    target = restore(fp_model, calib_lq, schedule, t_fixed)
    qmodel = qmodel.copy()
    params = branch_params(qmodel)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    trace = []
    for it in range(cfg.iterations + 1):
        terms, grads = distill_loss(qmodel, calib_lq, target, schedule, cfg, t_fixed)
        if not np.isfinite(terms.total):
            raise TrainingDivergedError(it, terms.total)
        trace.append(terms)
        if it < cfg.iterations:
            opt.step(params, grads)
    log.info("distillation: loss %.6g -> %.6g over %d iterations",
             trace[0].total, trace[-1].total, cfg.iterations)
    return TrainResult(qmodel, trace)
