"""Dense float64 kernels: matmul, im2col convolution, thin SVD, FWHT, sign vectors.

Tensors are plain C-contiguous ``float64`` NumPy arrays. Every public function
returns a fresh array and leaves its inputs untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend


class DimensionError(ValueError):
    """Shapes that do not fit together."""


class UnsupportedSizeError(ValueError):
    """A size the Hadamard construction does not cover (not a power of two)."""


class NumericalError(ArithmeticError):
    """An iterative routine failed to converge or produced non-finite values."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise DimensionError(f"padding must be >= 0, got {self.padding}")

    @property
    def patch_size(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        h_out = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        w_out = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if h_out < 1 or w_out < 1:
            raise DimensionError(f"conv {self} produces empty output on {h}x{w} input")
        return h_out, w_out

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_h": self.kernel_h,
            "kernel_w": self.kernel_w,
            "stride": self.stride,
            "padding": self.padding,
        }


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def frobenius(x) -> float:
    return float(np.sqrt(np.sum(np.square(x))))


def _batched(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        x, squeeze = x[None], True
    elif x.ndim == 4:
        squeeze = False
    else:
        raise DimensionError(f"expected C x H x W or N x C x H x W input, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"input has {x.shape[1]} channels, spec wants {spec.in_channels}")
    spec.output_hw(x.shape[2], x.shape[3])
    return x, squeeze


def im2col(x, spec: ConvSpec) -> np.ndarray:
    """Receptive-field matrix of shape ``(C*Kh*Kw, N*H_out*W_out)``.

    Row ``(c*Kh + u)*Kw + v`` holds tap ``(c, u, v)``; column ``n*P + i*W_out + j``
    holds output position ``(i, j)`` of image ``n``. A 3-D input is treated as a
    batch of one.
    """
    x, _ = _batched(as_tensor(x), spec)
    return _backend.kernels.im2col(
        np.ascontiguousarray(x), spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    )


def col2im(cols, shape: tuple[int, ...], spec: ConvSpec) -> np.ndarray:
    """Adjoint of :func:`im2col`: sums column entries back onto input positions."""
    squeeze = len(shape) == 3
    full = (1, *shape) if squeeze else tuple(shape)
    out = _backend.kernels.col2im(
        as_tensor(cols), tuple(int(s) for s in full),
        spec.kernel_h, spec.kernel_w, spec.stride, spec.padding,
    )
    return out[0] if squeeze else out


def conv2d(x, k, spec: ConvSpec) -> np.ndarray:
    """Cross-correlation ``y[f,i,j] = sum_{c,u,v} k[f,c,u,v] x[c, i*s+u-p, j*s+v-p]``."""
    x, k = as_tensor(x), as_tensor(k)
    if k.shape != spec.kernel_shape:
        raise DimensionError(f"kernel shape {k.shape} does not match spec {spec.kernel_shape}")
    xb, squeeze = _batched(x, spec)
    n, _, h, w = xb.shape
    h_out, w_out = spec.output_hw(h, w)
    y = k.reshape(spec.out_channels, -1) @ im2col(xb, spec)
    y = y.reshape(spec.out_channels, n, h_out, w_out).transpose(1, 0, 2, 3)
    y = np.ascontiguousarray(y)
    return y[0] if squeeze else y


# --- thin SVD (one-sided Jacobi) ---------------------------------------------

_SVD_MAX_SWEEPS = 100
_SVD_TOL = 1e-12


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds (n even) of disjoint column pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged ``good`` with an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(good)]
    out = u.copy()
    cand = iter(np.eye(m))
    for j in np.flatnonzero(~good):
        while True:
            v = next(cand).copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            norm = np.linalg.norm(v)
            if norm > 1e-6:
                v /= norm
                break
        basis.append(v)
        out[:, j] = v
    return out


def thin_svd(w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``W = U @ diag(S) @ V`` with ``U: m x p``, ``S: p``, ``V: p x n``.

    One-sided (Hestenes) Jacobi with a round-robin pair ordering, so each round
    rotates ``p/2`` disjoint column pairs at once. Singular values come back
    sorted in descending order.
    """
    w = as_tensor(w)
    if w.ndim != 2:
        raise DimensionError(f"thin_svd needs a matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NumericalError("thin_svd input has non-finite entries")
    if w.shape[0] < w.shape[1]:
        u, s, v = thin_svd(w.T)
        return np.ascontiguousarray(v.T), s, np.ascontiguousarray(u.T)

    m, n = w.shape
    a = w.copy()
    vt = np.eye(n)  # accumulated right rotations, columns are right vectors
    rounds = _round_robin(n)
    # columns this small relative to ||W|| are rounding noise; never rotate them
    negligible = (max(m, n) * np.finfo(float).eps * frobenius(w)) ** 2
    off = 0.0
    for _ in range(_SVD_MAX_SWEEPS):
        off = 0.0
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            denom = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(np.minimum(alpha, beta) > negligible, np.abs(gamma) / denom, 0.0)
            if rel.size:
                off = max(off, float(rel.max()))
            rotate = rel > _SVD_TOL
            if not rotate.any():
                continue
            g = np.where(rotate, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            sign = np.where(zeta >= 0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(rotate, c, 1.0)
            s = np.where(rotate, s, 0.0)
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = vt[:, p], vt[:, q]
            vt[:, p], vt[:, q] = c * vp - s * vq, s * vp + c * vq
        if off < _SVD_TOL:
            break
    else:
        resid = frobenius(a @ vt.T - w) / max(1.0, frobenius(w))
        raise NumericalError(
            f"Jacobi SVD did not converge in {_SVD_MAX_SWEEPS} sweeps "
            f"(off-diagonal {off:.3e}, residual {resid:.3e})"
        )

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, a, vt = sigma[order], a[:, order], vt[:, order]
    floor = max(m, n) * np.finfo(float).eps * (sigma[0] if n else 0.0)
    good = sigma > floor
    u = np.zeros_like(a)
    u[:, good] = a[:, good] / sigma[good]
    if not good.all():
        u = _complete_basis(u, good)
    return u, sigma, np.ascontiguousarray(vt.T)


# --- Walsh-Hadamard ----------------------------------------------------------

def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def fwht(v, normalized: bool = True, axis: int = -1) -> np.ndarray:
    """Fast Walsh-Hadamard transform along ``axis`` (natural / Sylvester order)."""
    v = as_tensor(v)
    n = v.shape[axis]
    if not is_power_of_two(n):
        raise UnsupportedSizeError(f"Hadamard size must be a power of two, got {n}")
    moved = np.moveaxis(v, axis, -1)
    rows = np.array(moved.reshape(-1, n), order="C")  # the kernel works in place
    out = _backend.kernels.fwht_rows(rows)
    if normalized:
        out *= 1.0 / np.sqrt(n)
    return np.ascontiguousarray(np.moveaxis(out.reshape(moved.shape), -1, axis))


def hadamard_matrix(n: int, normalized: bool = True) -> np.ndarray:
    """Explicit Sylvester Hadamard matrix, built by Kronecker doubling."""
    if not is_power_of_two(n):
        raise UnsupportedSizeError(f"Hadamard size must be a power of two, got {n}")
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h / np.sqrt(n) if normalized else h


def random_signs(seed: int, n: int) -> np.ndarray:
    """Seeded +-1 vector: the top bit of successive PCG64 raw outputs.

    PCG64's raw 64-bit stream is fixed by its published recurrence, so the
    vector is identical on every platform and NumPy release.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    raw = np.random.PCG64(seed).random_raw(n)
    return np.where(raw >> np.uint64(63), 1.0, -1.0)
