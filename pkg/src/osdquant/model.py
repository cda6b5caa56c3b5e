"""Toy one-step diffusion restoration network, noise schedule and synthetic data.

The network is a small UNet: two stride-2 downsampling convs, two
nearest-upsample + conv stages, and two additive skips carried through 1x1
convs. Every conv is a registered layer so quantization can hook its input.
The 3-channel image is zero-padded to 4 channels on entry so every conv reads
a power-of-two channel count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ConvSpec, DimensionError, as_tensor, col2im, conv2d, im2col

IMAGE_CHANNELS = 3
INPUT_CHANNELS = 4
RESOLUTION = 32

# name, kind, in, out, kernel, stride, padding, input resolution divisor
_TOPOLOGY = [
    ("conv_in", "conv", 4, 8, 3, 1, 1, 1),
    ("down1", "downsample", 8, 16, 3, 2, 1, 1),
    ("mid1", "conv", 16, 16, 3, 1, 1, 2),
    ("down2", "downsample", 16, 32, 3, 2, 1, 2),
    ("mid2", "conv", 32, 32, 3, 1, 1, 4),
    ("up1", "upsample", 32, 16, 3, 1, 1, 2),
    ("skip1", "skip-add", 16, 16, 1, 1, 0, 2),
    ("dec1", "conv", 16, 16, 3, 1, 1, 2),
    ("up2", "upsample", 16, 8, 3, 1, 1, 1),
    ("skip0", "skip-add", 8, 8, 1, 1, 0, 1),
    ("conv_out", "conv", 8, 3, 3, 1, 1, 1),
]

LAYER_KINDS = ("conv", "downsample", "upsample", "skip-add")


@dataclass
class ConvLayer:
    name: str
    kind: str
    spec: ConvSpec
    weight: np.ndarray
    in_shape: tuple[int, int, int]

    @property
    def out_hw(self) -> tuple[int, int]:
        return self.spec.output_hw(self.in_shape[1], self.in_shape[2])

    @property
    def act_elems(self) -> int:
        c, h, w = self.in_shape
        return c * h * w

    @property
    def macs(self) -> int:
        h, w = self.out_hw
        return self.spec.out_channels * self.spec.patch_size * h * w

    @property
    def cost(self):
        from .balance import LayerCost
        return LayerCost(self.spec.in_channels, self.spec.out_channels, self.spec.kernel_h,
                         self.spec.kernel_w, self.in_shape[1:], self.out_hw)


@dataclass(frozen=True)
class RegistryEntry:
    handle: str
    kind: str
    weight_shape: tuple[int, int, int, int]
    act_elems: int


class ConvOp:
    """Full-precision conv with a cached input for the backward pass."""

    def __init__(self, weight: np.ndarray, spec: ConvSpec):
        self.weight = weight
        self.spec = spec
        self._shape = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return conv2d(x, self.weight, self.spec)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        f = self.spec.out_channels
        g = gy.transpose(1, 0, 2, 3).reshape(f, -1)
        return col2im(self.weight.reshape(f, -1).T @ g, self._shape, self.spec)


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return sig * (1.0 + x * (1.0 - sig))


def upsample2(x):
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def upsample2_grad(g):
    n, c, h, w = g.shape
    return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class ToyUNet:
    """Deterministically initialized toy UNet predicting the noise of its input.

    Each conv's output channels get a log-uniform gain (RMS-normalized) so the
    activations carry the inter-channel imbalance that balancing targets.
    """

    def __init__(self, seed: int = 0, gain_range: float = 16.0):
        self.seed = seed
        self.gain_range = gain_range
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x5EED,)))
        self.layers: dict[str, ConvLayer] = {}
        for name, kind, cin, cout, k, stride, pad, div in _TOPOLOGY:
            spec = ConvSpec(cin, cout, k, k, stride, pad)
            w = rng.standard_normal(spec.kernel_shape) * np.sqrt(2.0 / spec.patch_size)
            if name != "conv_out":
                g = np.exp(rng.uniform(-np.log(gain_range), np.log(gain_range), cout))
                w *= (g / np.sqrt(np.mean(g**2)))[:, None, None, None]
            res = RESOLUTION // div
            self.layers[name] = ConvLayer(name, kind, spec, w, (cin, res, res))

    @classmethod
    def from_layers(cls, layers: dict[str, ConvLayer], seed: int, gain_range: float) -> "ToyUNet":
        net = cls.__new__(cls)
        net.seed, net.gain_range, net.layers = seed, gain_range, dict(layers)
        return net

    def registry(self) -> list[RegistryEntry]:
        return [RegistryEntry(l.name, l.kind, l.spec.kernel_shape, l.act_elems)
                for l in self.layers.values()]

    @property
    def names(self) -> list[str]:
        return list(self.layers)

    def fp_ops(self) -> dict[str, ConvOp]:
        return {n: ConvOp(l.weight, l.spec) for n, l in self.layers.items()}

    def forward(self, x, ops=None, skips: bool = True, tape: dict | None = None) -> np.ndarray:
        """Noise prediction for a batch ``N x 3 x H x W`` (or one ``3 x H x W`` image)."""
        x = as_tensor(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.shape[1:] != (IMAGE_CHANNELS, RESOLUTION, RESOLUTION):
            raise DimensionError(f"expected N x 3 x {RESOLUTION} x {RESOLUTION}, got {x.shape}")
        ops = self.fp_ops() if ops is None else ops
        t = {} if tape is None else tape
        t["skips"] = skips
        x = np.concatenate([x, np.zeros_like(x[:, :1])], axis=1)
        t["a0"] = ops["conv_in"](x)
        h0 = silu(t["a0"])
        t["a1"] = ops["down1"](h0)
        h1 = silu(t["a1"])
        t["a2"] = ops["mid1"](h1)
        h2 = silu(t["a2"])
        t["a3"] = ops["down2"](h2)
        h3 = silu(t["a3"])
        t["a4"] = ops["mid2"](h3)
        h4 = silu(t["a4"])
        u1 = ops["up1"](upsample2(h4))
        if skips:
            u1 = u1 + ops["skip1"](h2)
        t["a5"] = u1
        h5 = silu(u1)
        t["a6"] = ops["dec1"](h5)
        h6 = silu(t["a6"])
        u2 = ops["up2"](upsample2(h6))
        if skips:
            u2 = u2 + ops["skip0"](h0)
        t["a7"] = u2
        out = ops["conv_out"](silu(u2))
        return out[0] if squeeze else out

    def backward(self, tape: dict, g_out, ops) -> np.ndarray:
        """Reverse pass through the graph recorded in ``tape``; ops accumulate their own grads."""
        skips = tape["skips"]
        g = as_tensor(g_out)
        squeeze = g.ndim == 3
        if squeeze:
            g = g[None]
        g7 = ops["conv_out"].backward(g) * silu_grad(tape["a7"])
        g_h0 = ops["skip0"].backward(g7) if skips else 0.0
        g6 = upsample2_grad(ops["up2"].backward(g7)) * silu_grad(tape["a6"])
        g5 = ops["dec1"].backward(g6) * silu_grad(tape["a5"])
        g_h2 = ops["skip1"].backward(g5) if skips else 0.0
        g4 = upsample2_grad(ops["up1"].backward(g5)) * silu_grad(tape["a4"])
        g3 = ops["mid2"].backward(g4) * silu_grad(tape["a3"])
        g2 = (ops["down2"].backward(g3) + g_h2) * silu_grad(tape["a2"])
        g1 = ops["mid1"].backward(g2) * silu_grad(tape["a1"])
        g0 = (ops["down1"].backward(g1) + g_h0) * silu_grad(tape["a0"])
        gx = ops["conv_in"].backward(g0)[:, :IMAGE_CHANNELS]
        return gx[0] if squeeze else gx


# --- diffusion wrappers ------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal rates ``alpha_bar[t-1]`` for ``t = 1..T``."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha_bar, dtype=np.float64)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("schedule needs at least one timestep")
        if not (np.all(a > 0) and np.all(a < 1) and np.all(np.diff(a) < 0)):
            raise ValueError("alpha_bar must lie in (0, 1) and strictly decrease")
        object.__setattr__(self, "alpha_bar", a)

    @classmethod
    def linear(cls, steps: int = 1000, first: float = 0.99, last: float = 0.01) -> "NoiseSchedule":
        return cls(np.linspace(first, last, steps))

    @property
    def T(self) -> int:
        return self.alpha_bar.size

    def __getitem__(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bar[t - 1])


def diffusion_noise(shape, noise_seed: int) -> np.ndarray:
    return np.random.default_rng(noise_seed).standard_normal(shape)


def forward_diffusion(x0, t: int, schedule: NoiseSchedule, noise_seed: int) -> np.ndarray:
    """``x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps`` with seeded Gaussian ``eps``."""
    x0 = as_tensor(x0)
    a = schedule[t]
    eps = diffusion_noise(x0.shape, noise_seed)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def _alpha(t, schedule) -> float:
    a = schedule[t] if isinstance(schedule, NoiseSchedule) else float(schedule)
    if a <= 0:
        raise ValueError("alpha_bar must be positive for the one-step estimate")
    return a


def one_step_estimate(x_t, eps_pred, t, schedule) -> np.ndarray:
    """``x0 = (x_t - sqrt(1 - a_t) eps) / sqrt(a_t)``.

    ``schedule`` may be a :class:`NoiseSchedule` (then ``t`` indexes it) or a
    bare ``alpha_bar`` value.
    """
    x_t, eps_pred = as_tensor(x_t), as_tensor(eps_pred)
    if x_t.shape != eps_pred.shape:
        raise DimensionError(f"x_t {x_t.shape} and eps {eps_pred.shape} differ")
    a = _alpha(t, schedule)
    return (x_t - np.sqrt(1.0 - a) * eps_pred) / np.sqrt(a)


def estimate_grad_wrt_eps(t, schedule) -> float:
    """d x0_hat / d eps_pred (a scalar)."""
    a = _alpha(t, schedule)
    return -np.sqrt(1.0 - a) / np.sqrt(a)


def restore(model: ToyUNet, lq, schedule: NoiseSchedule, t_fixed: int | None = None,
            ops=None, tape: dict | None = None) -> np.ndarray:
    """One-step restoration: treat ``lq`` as ``x_t`` and invert with the predicted noise."""
    t = schedule.T if t_fixed is None else t_fixed
    eps = model.forward(lq, ops=ops, tape=tape)
    return one_step_estimate(lq, eps, t, schedule)


# --- synthetic faces ---------------------------------------------------------

def _ellipse(yy, xx, cy, cx, ry, rx, soft=0.08):
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return np.clip((1.0 + soft - d) / (2 * soft), 0.0, 1.0)


def _face(rng: np.random.Generator, res: int = RESOLUTION) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res] / (res - 1)
    top, bottom = rng.uniform(0.2, 0.9, 3), rng.uniform(0.1, 0.8, 3)
    img = top[:, None, None] * (1 - yy) + bottom[:, None, None] * yy
    cy, cx = rng.uniform(0.45, 0.55), rng.uniform(0.42, 0.58)
    ry, rx = rng.uniform(0.30, 0.40), rng.uniform(0.22, 0.30)
    skin = np.array([rng.uniform(0.6, 0.95), rng.uniform(0.45, 0.75), rng.uniform(0.35, 0.6)])
    hair = rng.uniform(0.0, 0.4, 3)

    def paint(mask, color):
        nonlocal img
        img = img * (1 - mask) + np.asarray(color)[:, None, None] * mask

    paint(_ellipse(yy, xx, cy - 0.6 * ry, cx, 0.6 * ry, 1.1 * rx), hair)
    paint(_ellipse(yy, xx, cy, cx, ry, rx), skin)
    eye_dy, eye_dx = rng.uniform(0.08, 0.14), rng.uniform(0.09, 0.13)
    for side in (-1, 1):
        paint(_ellipse(yy, xx, cy - eye_dy, cx + side * eye_dx, 0.035, 0.055, soft=0.3),
              np.full(3, 0.08))
    paint(_ellipse(yy, xx, cy + 0.55 * ry, cx, 0.04, rng.uniform(0.07, 0.12), soft=0.3),
          [rng.uniform(0.5, 0.8), 0.15, 0.2])
    paint(_ellipse(yy, xx, cy + 0.1 * ry, cx, 0.1, 0.02, soft=0.5), skin * 0.8)
    return np.clip(img, 0.0, 1.0)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3 * sigma)))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the last two axes, mirror-reflected borders."""
    img = as_tensor(img)
    k = gaussian_kernel1d(sigma)
    r = k.size // 2
    out = img
    for axis in (-2, -1):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (r, r)
        xp = np.pad(out, pad, mode="reflect")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, w in enumerate(k):
            acc += w * np.take(xp, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def _down_up(img):
    *lead, h, w = img.shape
    low = img.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))
    return upsample2(low)


def degrade(hq, seed: int = 0) -> np.ndarray:
    """Two rounds of blur + Gaussian noise + 2x down/up-sampling, then clamp to [0, 1]."""
    rng = np.random.default_rng(seed)
    x = as_tensor(hq)
    for sigma, noise in ((1.0, 0.05), (0.5, 0.02)):
        x = gaussian_blur(x, sigma)
        x = x + noise * rng.standard_normal(x.shape)
        x = _down_up(x)
    return np.clip(x, 0.0, 1.0)


@dataclass
class Dataset:
    hq: np.ndarray
    lq: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.hq.shape[0]


def make_synthetic_dataset(n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError("dataset needs at least one sample")
    children = np.random.SeedSequence(seed).spawn(n)
    hq, lq = [], []
    for child in children:
        face_seed, noise_seed = child.spawn(2)
        img = _face(np.random.default_rng(face_seed))
        hq.append(img)
        lq.append(degrade(img, seed=int(noise_seed.generate_state(1)[0])))
    return Dataset(np.stack(hq), np.stack(lq), seed)
