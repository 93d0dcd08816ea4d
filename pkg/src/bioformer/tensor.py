"""Numeric core: fp32 primitives and their symmetric int8 counterparts.

fp32 tensors are plain ``numpy`` arrays. Integer tensors travel as
:class:`QTensor` (codes + per-tensor scale, zero point fixed at 0).
Every integer kernel here runs on int64/int32 arrays only; floating point
is confined to computing constants (multipliers, shifts) ahead of time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

QMAX = 127
SOFTMAX_OUT_SCALE = 1.0 / QMAX
# fixed-point fraction bits used for normalized activations inside layernorm
LN_FRAC_BITS = 12
LN_STD_BITS = 8
# internal resolution of the exponent approximation in int_softmax
SOFTMAX_EXP_BITS = 14


class ShapeError(ValueError):
    pass


class NumericError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    scale: float
    bits: int = 8
    symmetric: bool = True

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if self.bits < 2 or self.bits > 16:
            raise ValueError(f"unsupported bit width {self.bits}")
        if not self.symmetric:
            raise ValueError("only symmetric quantization is supported")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @classmethod
    def from_maxabs(cls, maxabs: float, bits: int = 8) -> "QuantParams":
        qmax = 2 ** (bits - 1) - 1
        maxabs = float(maxabs)
        if not maxabs > 0 or not math.isfinite(maxabs):
            maxabs = 1.0
        return cls(maxabs / qmax, bits)


@dataclass(frozen=True)
class QTensor:
    """Integer tensor with a per-tensor scale. ``real = q * scale``."""

    q: np.ndarray
    scale: float
    bits: int = field(default=8)

    def __post_init__(self):
        if not np.issubdtype(self.q.dtype, np.integer):
            raise TypeError(f"QTensor codes must be integer, got {self.q.dtype}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        arr = np.array(self.q, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "q", arr)

    @property
    def shape(self):
        return self.q.shape

    @property
    def dtype(self) -> str:
        return "int8" if self.bits <= 8 else "int32"

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


# ---------------------------------------------------------------------------
# fp32
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if np.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] < 2:
        raise ShapeError("layernorm needs at least 2 features")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + np.float32(eps)) * gamma + beta


# ---------------------------------------------------------------------------
# quantization helpers
# ---------------------------------------------------------------------------


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x: np.ndarray, qp: QuantParams) -> QTensor:
    qmax = qp.qmax
    codes = np.clip(round_half_away(np.asarray(x, dtype=np.float64) / qp.scale), -qmax, qmax)
    dtype = np.int8 if qp.bits <= 8 else np.int32
    return QTensor(codes.astype(dtype), qp.scale, qp.bits)


def quantize_bias(b: np.ndarray, scale: float) -> QTensor:
    lim = 2**31 - 1
    codes = np.clip(round_half_away(np.asarray(b, dtype=np.float64) / scale), -lim, lim)
    return QTensor(codes.astype(np.int32), scale, 32)


def dequantize(t: QTensor) -> np.ndarray:
    return (t.q.astype(np.float64) * t.scale).astype(np.float32)


def fake_quant(x: np.ndarray, scale: float, bits: int = 8) -> np.ndarray:
    qmax = 2 ** (bits - 1) - 1
    codes = np.clip(round_half_away(np.asarray(x, dtype=np.float64) / scale), -qmax, qmax)
    return (codes * scale).astype(np.float32)


def quantize_multiplier(real: float) -> tuple[int, int]:
    """Express ``real`` as ``m * 2**-shift`` with ``m`` in [2**30, 2**31)."""
    if not real > 0 or not math.isfinite(real):
        raise ValueError(f"multiplier must be positive, got {real}")
    mant, exp = math.frexp(real)  # real = mant * 2**exp, mant in [0.5, 1)
    m = int(round(mant * 2**31))
    if m == 2**31:
        m //= 2
        exp += 1
    shift = 31 - exp
    if shift < 1:
        raise ValueError(f"multiplier {real} too large for fixed-point requantization")
    return m, shift


def rounding_shift(x: np.ndarray, shift: int) -> np.ndarray:
    """Arithmetic right shift with round-half-away-from-zero."""
    x = np.asarray(x, dtype=np.int64)
    if shift <= 0:
        return x << -shift
    half = np.int64(1) << (shift - 1)
    mag = (np.abs(x) + half) >> shift
    return np.where(x < 0, -mag, mag)


def requantize(acc: np.ndarray, multiplier: int, shift: int, qmax: int = QMAX) -> np.ndarray:
    acc = np.asarray(acc, dtype=np.int64)
    # split the multiply when |acc| * 2**31 could overflow int64
    if acc.size and np.abs(acc).max() >= 2**31 and shift > 16:
        hi = acc * np.int64(multiplier >> 15)
        lo = acc * np.int64(multiplier & 0x7FFF)
        prod = hi + rounding_shift(lo, 15)
        out = rounding_shift(prod, shift - 15)
    else:
        out = rounding_shift(acc * np.int64(multiplier), shift)
    return np.clip(out, -qmax, qmax)


# ---------------------------------------------------------------------------
# integer kernels
# ---------------------------------------------------------------------------


def int_matmul_acc(a: np.ndarray, b: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """int8 x int8 -> int32 accumulator (held in int64 to make overflow checkable)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"int_matmul shape mismatch: {a.shape} x {b.shape}")
    acc = np.matmul(a.astype(np.int64), b.astype(np.int64))
    if bias is not None:
        acc = acc + np.asarray(bias, dtype=np.int64)
    return acc


def int_matmul(a: QTensor, b: QTensor, bias: QTensor | None, requant: QuantParams) -> QTensor:
    if a.q.ndim != 2 or b.q.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"int_matmul shape mismatch: {a.shape} x {b.shape}")
    if bias is not None and bias.shape != (b.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {b.shape[1]} outputs")
    acc = int_matmul_acc(a.q, b.q, None if bias is None else bias.q)
    m, shift = quantize_multiplier(a.scale * b.scale / requant.scale)
    out = requantize(acc, m, shift, requant.qmax)
    return QTensor(out.astype(np.int8), requant.scale, requant.bits)


def int_add(qa: np.ndarray, ma: tuple[int, int], qb: np.ndarray, mb: tuple[int, int],
            qmax: int = QMAX) -> np.ndarray:
    """Sum of two rescaled integer tensors: round(qa*ra + qb*rb).

    ``ma``/``mb`` are (multiplier, shift) pairs for ``ra = s_a/s_out`` and
    ``rb = s_b/s_out``. Both products are aligned to the larger shift first.
    """
    (m1, s1), (m2, s2) = ma, mb
    shift = max(s1, s2)
    # |q| <= 2**7 and m < 2**31, so aligning by up to 24 bits stays in int64
    shift = min(shift, min(s1, s2) + 24)
    pa = np.asarray(qa, np.int64) * np.int64(m1)
    pb = np.asarray(qb, np.int64) * np.int64(m2)
    pa = rounding_shift(pa, s1 - shift) if s1 > shift else pa << (shift - s1)
    pb = rounding_shift(pb, s2 - shift) if s2 > shift else pb << (shift - s2)
    return np.clip(rounding_shift(pa + pb, shift), -qmax, qmax)


def isqrt(n: np.ndarray) -> np.ndarray:
    """Elementwise floor(sqrt(n)) for non-negative int64 via Newton iteration."""
    n = np.asarray(n, dtype=np.int64)
    if (n < 0).any():
        raise NumericError("isqrt of negative value")
    x = np.ones_like(n)
    nbits = np.zeros_like(n)
    t = n.copy()
    while (t > 0).any():
        nbits += (t > 0)
        t >>= 1
    x = np.where(n > 0, np.int64(1) << ((nbits + 1) // 2), 0)
    safe = np.where(x > 0, x, 1)
    for _ in range(64):
        y = (x + n // safe) >> 1
        y = np.where(n > 0, y, 0)
        done = y >= x
        x = np.where(done, x, y)
        safe = np.where(x > 0, x, 1)
        if done.all():
            break
    return x


def _div_round(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, np.int64)
    den = np.asarray(den, np.int64)
    mag = (np.abs(num) * 2 + den) // (2 * den)
    return np.where(num < 0, -mag, mag)


@dataclass(frozen=True)
class SoftmaxConsts:
    """Integer constants for the polynomial exponent, derived from the input scale."""

    upshift: int
    q_ln2: int
    q_b: int
    q_c: int
    max_z: int

    @classmethod
    def from_scale(cls, scale: float) -> "SoftmaxConsts":
        # refine the input grid so ln2 spans ~2**SOFTMAX_EXP_BITS steps
        up = max(0, int(math.ceil(math.log2(2**SOFTMAX_EXP_BITS * scale / math.log(2)))))
        s = scale / 2**up
        a, b, c = 0.3585, 1.353, 0.344
        q_ln2 = int(math.floor(math.log(2) / s))
        q_b = int(math.floor(b / s))
        q_c = int(math.floor(c / (a * s * s)))
        return cls(up, q_ln2, q_b, q_c, 62)


def int_exp(q: np.ndarray, consts: SoftmaxConsts) -> np.ndarray:
    """Second-order polynomial exp for q <= 0 (refined grid); result at scale a*s**2."""
    q = np.asarray(q, np.int64) << consts.upshift
    z = (-q) // consts.q_ln2
    qp = q + z * consts.q_ln2
    poly = (qp + consts.q_b) ** 2 + consts.q_c
    z = np.minimum(z, consts.max_z)
    return poly >> z


def int_softmax(x: QTensor, in_qp: QuantParams | None = None) -> QTensor:
    """Row softmax over the last axis with int8 output at scale 1/127.

    Rounding distributes the remainder to the largest fractional parts so each
    row sums exactly to 127 (i.e. 1.0).
    """
    scale = x.scale if in_qp is None else in_qp.scale
    consts = SoftmaxConsts.from_scale(scale)
    return QTensor(int_softmax_codes(x.q, consts).astype(np.int8), SOFTMAX_OUT_SCALE)


def int_softmax_codes(q: np.ndarray, consts: SoftmaxConsts, qmax: int = QMAX) -> np.ndarray:
    q = np.asarray(q, np.int64)
    e = int_exp(q - q.max(axis=-1, keepdims=True), consts)
    total = e.sum(axis=-1, keepdims=True)
    num = e * qmax
    base = num // total
    rem = num - base * total
    deficit = qmax - base.sum(axis=-1, keepdims=True)
    # rank remainders descending; stable so ties go to the lowest index
    order = np.argsort(-rem, axis=-1, kind="stable")
    ranks = np.argsort(order, axis=-1, kind="stable")
    return base + (ranks < deficit)


@dataclass(frozen=True)
class LayerNormConsts:
    eps_q: int
    frac_bits: int = LN_FRAC_BITS
    std_bits: int = LN_STD_BITS

    @classmethod
    def from_scale(cls, in_scale: float, width: int, eps: float) -> "LayerNormConsts":
        # eps expressed on the (width * q) grid, squared: var(d) = width**2 var(q)
        eps_q = int(round(eps / in_scale**2 * width**2 * 4**LN_STD_BITS))
        return cls(max(eps_q, 1))


def int_layernorm_hat(q: np.ndarray, consts: LayerNormConsts) -> np.ndarray:
    """Normalized rows as integers at scale 2**-frac_bits."""
    q = np.asarray(q, np.int64)
    width = q.shape[-1]
    d = q * width - q.sum(axis=-1, keepdims=True)  # width * (q - mean)
    var = (d * d).sum(axis=-1, keepdims=True) // width
    std = isqrt((var << (2 * consts.std_bits)) + consts.eps_q)  # width*std(q) * 2**std_bits
    std = np.maximum(std, 1)
    return _div_round(d << (consts.frac_bits + consts.std_bits), std)


def int_layernorm(x: QTensor, gamma: QTensor, beta: QTensor, out_qp: QuantParams,
                  eps: float = 1e-5) -> QTensor:
    """Integer layernorm. ``beta`` must be int32 at scale ``gamma.scale * 2**-LN_FRAC_BITS``."""
    consts = LayerNormConsts.from_scale(x.scale, x.shape[-1], eps)
    hat = int_layernorm_hat(x.q, consts)
    acc = hat * gamma.q.astype(np.int64) + beta.q.astype(np.int64)
    m, shift = quantize_multiplier(gamma.scale * 2.0**-LN_FRAC_BITS / out_qp.scale)
    return QTensor(requantize(acc, m, shift, out_qp.qmax).astype(np.int8), out_qp.scale)
