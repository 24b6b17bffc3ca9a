"""Stochastic quantization primitives.

Two lattice quantizers (random-shift rounding and per-coordinate coin-flip
rounding), bucketed min-max codebook quantization for transport, and
gradient-descent-optimized level tables for non-uniform codebooks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridSpec",
    "BucketSpec",
    "QuantizedBlock",
    "LevelTable",
    "qshift_scalar",
    "qshift_quantize",
    "qflip_quantize",
    "dequantize",
    "quantize_bucket",
    "bucketed_quantize",
    "uniform_stochastic_quantize",
    "learn_levels",
    "quantize_with_levels",
    "sample_shift",
]

AFFINE_MODES = ("shift", "flip", "uniform_stochastic")
INNER_MODES = AFFINE_MODES + ("levels",)


def _f32(x: float) -> float:
    """Round to the nearest float32; block metadata is transported as f32."""
    return float(np.float32(x))


def _check_finite(v: np.ndarray, what: str = "value") -> None:
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise ValueError(f"non-finite {what} at index {bad[0]}: {v[bad[0]]!r}")


@dataclass(frozen=True)
class GridSpec:
    """A scalar lattice: multiples of `resolution` offset by `shift`."""

    resolution: float
    shift: float = 0.0

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError(f"resolution must be > 0, got {self.resolution}")
        half = self.resolution / 2
        if not (-half <= self.shift < half):
            raise ValueError(
                f"shift must lie in [-{half}, {half}), got {self.shift}"
            )


@dataclass(frozen=True)
class BucketSpec:
    """Fixed-size bucketing with independent min-max normalization."""

    bucket_size: int = 1024
    normalization: str = "min_max"

    def __post_init__(self):
        if self.bucket_size < 1:
            raise ValueError(f"bucket_size must be >= 1, got {self.bucket_size}")
        if self.normalization != "min_max":
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass
class QuantizedBlock:
    """Wire-ready segment: unsigned codes on a 2**bit_width point grid.

    The grid spans [scale_lo, scale_hi] with pitch
    (scale_hi - scale_lo) / (2**bit_width - 1); reconstruction is
    ``scale_lo + code * pitch + shift``.  For level-table blocks the codes
    index the table instead and shift is 0.  Scales and shift are stored as
    float32-exact values when produced by the bucketed transport path.
    """

    codes: np.ndarray
    shift: float
    scale_lo: float
    scale_hi: float
    bit_width: int
    length: int

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint32)
        if self.length <= 0:
            raise ValueError("block length must be positive")
        if self.codes.shape != (self.length,):
            raise ValueError(
                f"expected {self.length} codes, got shape {self.codes.shape}"
            )
        if not 1 <= self.bit_width <= 32:
            raise ValueError(f"bit_width must be in [1, 32], got {self.bit_width}")
        if self.codes.size and int(self.codes.max()) >= (1 << self.bit_width):
            raise ValueError(
                f"code out of range for bit_width {self.bit_width}"
            )
        if not self.scale_lo <= self.scale_hi:
            raise ValueError("scale_lo must be <= scale_hi")

    @property
    def pitch(self) -> float:
        return (self.scale_hi - self.scale_lo) / ((1 << self.bit_width) - 1)

    def __eq__(self, other):
        if not isinstance(other, QuantizedBlock):
            return NotImplemented
        return (
            self.length == other.length
            and self.bit_width == other.bit_width
            and self.shift == other.shift
            and self.scale_lo == other.scale_lo
            and self.scale_hi == other.scale_hi
            and np.array_equal(self.codes, other.codes)
        )


def sample_shift(resolution: float, rng: np.random.Generator) -> float:
    """Draw r uniformly from [-resolution/2, resolution/2)."""
    return float(rng.uniform(-resolution / 2, resolution / 2))


def qshift_scalar(x, grid: GridSpec):
    """Round to the nearest point of the shifted lattice.

    Ties at half-pitch break to the even multiple (numpy rounding).
    Accepts scalars or arrays.
    """
    d, r = grid.resolution, grid.shift
    out = d * np.round((np.asarray(x, dtype=float) - r) / d) + r
    return float(out) if np.isscalar(x) else out


def _offset_block(k: np.ndarray, resolution: float, shift: float) -> QuantizedBlock:
    """Pack signed lattice indices into an unsigned-code block."""
    k0 = int(k.min())
    span = int(k.max()) - k0
    bit_width = max(1, span.bit_length())
    if bit_width > 32:
        raise ValueError("value spread too large for 32-bit codes")
    top = (1 << bit_width) - 1
    return QuantizedBlock(
        codes=(k - k0).astype(np.uint32),
        shift=shift,
        scale_lo=k0 * resolution,
        scale_hi=(k0 + top) * resolution,
        bit_width=bit_width,
        length=k.size,
    )


def qshift_quantize(
    v,
    resolution: float,
    rng: np.random.Generator,
    shift: float | None = None,
) -> QuantizedBlock:
    """Quantize with one random shift shared across all coordinates.

    A single r ~ Unif[-resolution/2, resolution/2) is drawn (or forced via
    `shift`), every coordinate is rounded to the nearest point of the
    shifted lattice, and the lattice indices are stored as codes.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.size == 0:
        raise ValueError("cannot quantize an empty vector")
    if not resolution > 0:
        raise ValueError(f"resolution must be > 0, got {resolution}")
    _check_finite(v)
    if shift is None:
        shift = sample_shift(resolution, rng)
    else:
        GridSpec(resolution, shift)  # validates the forced shift
    k = np.round((v - shift) / resolution).astype(np.int64)
    return _offset_block(k, resolution, shift)


def qflip_quantize(v, resolution: float, rng: np.random.Generator) -> QuantizedBlock:
    """Quantize each coordinate independently by randomized rounding.

    x rounds down to resolution*floor(x/resolution) with probability
    1 - frac(x/resolution), up otherwise; no shift is applied.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.size == 0:
        raise ValueError("cannot quantize an empty vector")
    if not resolution > 0:
        raise ValueError(f"resolution must be > 0, got {resolution}")
    _check_finite(v)
    scaled = v / resolution
    low = np.floor(scaled)
    frac = scaled - low
    k = (low + (rng.random(v.size) < frac)).astype(np.int64)
    return _offset_block(k, resolution, 0.0)


def dequantize(
    block: QuantizedBlock, mode: str = "shift", levels: "LevelTable | None" = None
) -> np.ndarray:
    """Reconstruct real values from a block.

    Affine modes (shift, flip, uniform_stochastic) decode as
    scale_lo + code * pitch + shift.  Mode "levels" maps codes through the
    level table on [0, 1] before denormalizing.
    """
    if mode not in INNER_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    codes = np.asarray(block.codes)
    if codes.size and int(codes.max()) >= (1 << block.bit_width):
        raise ValueError(
            f"corrupted code >= 2**{block.bit_width} cannot be decoded"
        )
    if mode == "levels":
        if levels is None:
            raise ValueError("mode 'levels' requires a LevelTable")
        if levels.levels.size != (1 << block.bit_width):
            raise ValueError("level table size does not match bit_width")
        span = block.scale_hi - block.scale_lo
        return block.scale_lo + levels.levels[codes] * span
    return block.scale_lo + codes * block.pitch + block.shift


def quantize_bucket(
    values: np.ndarray,
    bit_width: int,
    inner: str,
    rng: np.random.Generator,
    levels: "LevelTable | None" = None,
) -> QuantizedBlock:
    """Min-max normalize one bucket to [0, 1] and quantize it.

    Degenerate buckets (all values equal) encode all-zero codes with
    scale_lo == scale_hi and decode to the constant exactly.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("cannot quantize an empty bucket")
    if inner not in INNER_MODES:
        raise ValueError(f"unknown inner mode {inner!r}")
    _check_finite(values, "bucket value")
    n = values.size
    lo = _f32(values.min())
    hi = _f32(values.max())
    if lo == hi:
        return QuantizedBlock(
            codes=np.zeros(n, dtype=np.uint32),
            shift=0.0,
            scale_lo=lo,
            scale_hi=hi,
            bit_width=bit_width,
            length=n,
        )
    u = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    top = (1 << bit_width) - 1
    pitch = 1.0 / top
    shift_value = 0.0
    if inner == "shift":
        r = sample_shift(pitch, rng)
        codes = np.clip(np.round((u - r) / pitch), 0, top)
        shift_value = _f32(r * (hi - lo))
    elif inner in ("flip", "uniform_stochastic"):
        codes = _stochastic_codes(u, bit_width, rng)
    else:  # levels
        if levels is None:
            raise ValueError("inner 'levels' requires a LevelTable")
        codes = quantize_with_levels(u, levels, stochastic=False)
    return QuantizedBlock(
        codes=np.asarray(codes, dtype=np.uint32),
        shift=shift_value,
        scale_lo=lo,
        scale_hi=hi,
        bit_width=bit_width,
        length=n,
    )


def bucketed_quantize(
    v,
    bucket: BucketSpec,
    bit_width: int,
    inner: str = "shift",
    rng: np.random.Generator | None = None,
    levels: "LevelTable | None" = None,
) -> list[QuantizedBlock]:
    """Split into consecutive buckets and quantize each independently.

    Each bucket gets its own min-max scales and, for shift mode, its own
    independently drawn shift.  The final bucket may be short.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.size == 0:
        raise ValueError("cannot quantize an empty vector")
    if not 1 <= bit_width <= 16:
        raise ValueError(f"bit_width must be in [1, 16], got {bit_width}")
    if rng is None:
        rng = np.random.default_rng()
    step = bucket.bucket_size
    return [
        quantize_bucket(v[i : i + step], bit_width, inner, rng, levels=levels)
        for i in range(0, v.size, step)
    ]


def _stochastic_codes(u: np.ndarray, bit_width: int, rng: np.random.Generator):
    top = (1 << bit_width) - 1
    scaled = u * top
    low = np.floor(scaled)
    frac = scaled - low
    return np.clip(low + (rng.random(u.size) < frac), 0, top)


def uniform_stochastic_quantize(
    v, bit_width: int, rng: np.random.Generator
) -> np.ndarray:
    """Unbiased randomized rounding onto the uniform grid over [0, 1].

    A value lands on the far endpoint of its cell with probability
    proportional to its distance from the near one, so the expectation
    equals the input.  Entries outside [0, 1] are rejected.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    _check_finite(v)
    bad = np.flatnonzero((v < 0.0) | (v > 1.0))
    if bad.size:
        raise ValueError(
            f"entry outside normalized interval [0, 1] at index {bad[0]}: {v[bad[0]]}"
        )
    return _stochastic_codes(v, bit_width, rng).astype(np.uint32)


@dataclass
class LevelTable:
    """Strictly increasing quantization levels; count is a power of two."""

    levels: np.ndarray

    def __post_init__(self):
        self.levels = np.ascontiguousarray(self.levels, dtype=float)
        n = self.levels.size
        if n < 1 or (n & (n - 1)) != 0:
            raise ValueError(f"level count must be a power of two, got {n}")
        if n > 1 and not np.all(np.diff(self.levels) > 0):
            raise ValueError("levels must be strictly increasing")

    @property
    def bit_width(self) -> int:
        return int(self.levels.size).bit_length() - 1

    @classmethod
    def uniform(cls, bit_width: int, lo: float = 0.0, hi: float = 1.0) -> "LevelTable":
        return cls(np.linspace(lo, hi, 1 << bit_width))


def learn_levels(
    values, initial: LevelTable, learning_rate: float = 0.01
) -> LevelTable:
    """One pass of gradient descent on the level locations.

    For each value in order, the closest level moves toward it by
    learning_rate * (level - value).  Levels are re-sorted afterwards if the
    pass broke monotonicity; the level multiset is otherwise preserved.
    """
    values = np.atleast_1d(np.asarray(values, dtype=float))
    if values.size == 0:
        raise ValueError("cannot learn levels from an empty value set")
    _check_finite(values)
    q = initial.levels.copy()
    if np.unique(values).size < q.size:
        warnings.warn(
            "fewer distinct values than levels; returning the initial table",
            RuntimeWarning,
        )
        return LevelTable(q)
    for x in values:
        i = int(np.abs(q - x).argmin())
        q[i] -= learning_rate * (q[i] - x)
    if np.any(np.diff(q) <= 0):
        q.sort()
        dup = np.flatnonzero(np.diff(q) <= 0)
        if dup.size:
            # exact collisions are rare; nudge so the table stays valid
            eps = max(np.ptp(q), 1.0) * 1e-12
            for j in dup:
                q[j + 1] = q[j] + eps
    return LevelTable(q)


def quantize_with_levels(
    v,
    table: LevelTable,
    stochastic: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Map values to level indices, clamping outside the table's span."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    q = table.levels
    v = np.clip(v, q[0], q[-1])
    if not stochastic:
        if q.size == 1:
            return np.zeros(v.size, dtype=np.uint32)
        mids = (q[:-1] + q[1:]) / 2
        return np.searchsorted(mids, v, side="left").astype(np.uint32)
    if rng is None:
        raise ValueError("stochastic mode requires an rng")
    low = np.clip(np.searchsorted(q, v, side="right") - 1, 0, max(q.size - 2, 0))
    if q.size == 1:
        return np.zeros(v.size, dtype=np.uint32)
    gap = q[low + 1] - q[low]
    frac = (v - q[low]) / gap
    return (low + (rng.random(v.size) < frac)).astype(np.uint32)
