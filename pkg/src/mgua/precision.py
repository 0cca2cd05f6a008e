"""Software emulation of reduced floating-point formats on fp64 carriers.

Every value lives in an ordinary float64 (scalar or ndarray). ``round_to``
snaps it to the nearest value representable in a narrower IEEE-style format
(round-to-nearest-even, gradual underflow, overflow to signed infinity), so
"computing in precision u" means: do the fp64 op, then ``round_to(., u)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ContractError


class PrecisionLevel(enum.Enum):
    FP64 = "fp64"
    FP32 = "fp32"
    BF16 = "bf16"
    FP16 = "fp16"

    @property
    def exponent_bits(self) -> int:
        return _FORMATS[self][0]

    @property
    def mantissa_bits(self) -> int:
        return _FORMATS[self][1]

    @property
    def rank(self) -> int:
        """Position on the fineness order; FP16 and BF16 share the bottom."""
        return _RANK[self]

    @property
    def max_finite(self) -> float:
        e, m = _FORMATS[self]
        emax = (1 << (e - 1)) - 1
        return float(np.ldexp(2.0 - 2.0 ** -m, emax))

    @property
    def min_subnormal(self) -> float:
        e, m = _FORMATS[self]
        emin = 2 - (1 << (e - 1))
        return float(np.ldexp(1.0, emin - m))

    @classmethod
    def parse(cls, token: str) -> "PrecisionLevel":
        try:
            return cls(token.strip().lower())
        except ValueError:
            raise ContractError(
                f"unknown precision level {token!r}; expected one of "
                f"{[p.value for p in cls]}"
            ) from None

    def __str__(self) -> str:
        return self.value


_FORMATS = {
    PrecisionLevel.FP64: (11, 52),
    PrecisionLevel.FP32: (8, 23),
    PrecisionLevel.BF16: (8, 7),
    PrecisionLevel.FP16: (5, 10),
}
_RANK = {
    PrecisionLevel.FP16: 0,
    PrecisionLevel.BF16: 0,
    PrecisionLevel.FP32: 1,
    PrecisionLevel.FP64: 2,
}

# Escalation ladder; FP16 is storage-only and never appears here.
LADDER = (PrecisionLevel.BF16, PrecisionLevel.FP32, PrecisionLevel.FP64)


@dataclass(frozen=True)
class PrecisionConfig:
    """Formats for basis tabulation, geometry, matrix ops and storage."""

    u_p: PrecisionLevel
    u_m: PrecisionLevel
    u_q: PrecisionLevel
    u_s: PrecisionLevel

    def __post_init__(self):
        if self.u_q.rank < self.u_s.rank:
            raise ContractError(
                f"matrix precision {self.u_q} is coarser than storage precision {self.u_s}"
            )

    @classmethod
    def uniform(cls, level: PrecisionLevel) -> "PrecisionConfig":
        return cls(level, level, level, level)

    @classmethod
    def parse(cls, text: str) -> "PrecisionConfig":
        """Parse ``"bf16,bf16,fp32,fp32"``; a single level means all four."""
        parts = [p for p in text.split(",") if p.strip()]
        if len(parts) == 1:
            parts = parts * 4
        if len(parts) != 4:
            raise ContractError(f"precision config needs 4 comma-separated levels, got {text!r}")
        return cls(*(PrecisionLevel.parse(p) for p in parts))

    def as_tuple(self) -> tuple[PrecisionLevel, ...]:
        return (self.u_p, self.u_m, self.u_q, self.u_s)

    def to_token(self) -> str:
        return ",".join(p.value for p in self.as_tuple())

    def __str__(self) -> str:
        return self.to_token()


def round_to(x, level: PrecisionLevel):
    """Round ``x`` to the nearest value of ``level``, returned as float64.

    Accepts a Python float or an array; the return type follows the input.
    """
    scalar = np.ndim(x) == 0
    arr = np.asarray(x, dtype=np.float64)
    if level is PrecisionLevel.FP64:
        out = arr.copy()
    else:
        out = _round_array(arr, *_FORMATS[level])
    return float(out) if scalar else out


def _round_array(x: np.ndarray, ebits: int, mbits: int) -> np.ndarray:
    bias = (1 << (ebits - 1)) - 1
    emin = 1 - bias
    max_finite = np.ldexp(2.0 - 2.0 ** -mbits, bias)

    out = x.copy()
    finite = np.isfinite(x) & (x != 0)
    if not finite.any():
        return out
    v = x[finite]
    _, k = np.frexp(v)  # v = f * 2**k, 0.5 <= |f| < 1, so leading bit weight is 2**(k-1)
    quantum_exp = np.maximum(k - 1, emin) - mbits
    with np.errstate(over="ignore"):  # overflow to inf is the intended result
        r = np.ldexp(np.rint(np.ldexp(v, -quantum_exp)), quantum_exp)
    r = np.where(np.abs(r) > max_finite, np.copysign(np.inf, v), r)
    out[finite] = r
    return out


def mac_in(a, b, acc, level: PrecisionLevel, fused: bool = False):
    """One multiply-accumulate at ``level``: ``acc + a*b``.

    Unfused (default) rounds the product before the add. Inputs are first
    snapped to ``level``. Works elementwise on arrays.
    """
    a = round_to(a, level)
    b = round_to(b, level)
    acc = round_to(acc, level)
    if not fused:
        return round_to(acc + round_to(a * b, level), level)
    return _fused(a, b, acc, level)


def _fused(a, b, acc, level: PrecisionLevel):
    if level is PrecisionLevel.FP64:
        f = np.frompyfunc(_exact_fma64, 3, 1)
        out = f(a, b, acc)
        return float(out) if np.ndim(out) == 0 else out.astype(np.float64)
    # Product of two <=24-bit significands is exact in fp64. The sum is
    # carried in round-to-odd so the final narrowing rounds only once.
    p = np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)
    c = np.asarray(acc, dtype=np.float64)
    s = p + c
    bp = s - c
    err = (p - bp) + (c - (s - bp))
    with np.errstate(invalid="ignore"):
        even = (s.view(np.int64) & 1) == 0
    nudge = (err != 0) & even & np.isfinite(s)
    s = np.where(nudge, np.nextafter(s, np.where(err > 0, np.inf, -np.inf)), s)
    return round_to(s if s.ndim else float(s), level)


def _exact_fma64(a, b, c):
    if not (np.isfinite(a) and np.isfinite(b) and np.isfinite(c)):
        return a * b + c
    exact = Fraction(a) * Fraction(b) + Fraction(c)
    try:
        return float(exact)
    except OverflowError:
        return float(np.copysign(np.inf, float(exact.numerator)))
