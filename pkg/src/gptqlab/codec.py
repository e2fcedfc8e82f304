"""Weight quantization schemes behind a continuous grid-index coordinate.

Every scheme (uniform, log, float, power) materializes a sorted codebook of
representable values per output channel.  Rounding is done in *index space*:
a weight is mapped to a real-valued position along its grid by piecewise
linear interpolation, rounded (hard or soft), then mapped back.  For the
uniform grid this reduces to the familiar ``round(w / s) * s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

SCHEMES = ("uniform", "log", "float", "power")

# soft-rounding steepness per scheme; the less uniform the grid the steeper
DEFAULT_BETA = {"power": 20.0, "float": 30.0, "log": 50.0, "uniform": 50.0}

# (exponent_bits, mantissa_bits) with 1 + e + m = bits
DEFAULT_FLOAT_LAYOUT = {
    2: (1, 0),
    3: (1, 1),
    4: (2, 1),
    5: (2, 2),
    6: (3, 2),
    7: (4, 2),
    8: (4, 3),
}

MIN_BITS, MAX_BITS = 2, 8


class CodecError(ValueError):
    pass


def default_beta(scheme: str) -> float:
    return DEFAULT_BETA.get(scheme, 50.0)


@lru_cache(maxsize=None)
def _float_levels(exp_bits: int, man_bits: int) -> tuple[float, ...]:
    # every code of a (1, e, m) minifloat; all-ones exponent is a normal value
    bias = 2 ** (exp_bits - 1) - 1 if exp_bits > 0 else 0
    values = set()
    for e in range(2**exp_bits):
        for m in range(2**man_bits):
            frac = m / 2**man_bits
            if e == 0:
                mag = frac * 2.0 ** (1 - bias)
            else:
                mag = (1.0 + frac) * 2.0 ** (e - bias)
            values.add(mag)
            values.add(-mag)
    return tuple(sorted(values))


@lru_cache(maxsize=None)
def base_levels(
    scheme: str, bits: int, power_exponent: float = 2.0, float_layout: tuple[int, int] | None = None
) -> np.ndarray:
    """Codebook of ``scheme`` at ``bits`` for a unit scale, strictly increasing."""
    if scheme not in SCHEMES:
        raise CodecError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if not MIN_BITS <= bits <= MAX_BITS:
        raise CodecError(f"bits must lie in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    qmax = 2 ** (bits - 1) - 1
    if scheme == "uniform":
        levels = np.arange(-qmax, qmax + 1, dtype=np.float64)
    elif scheme == "power":
        k = np.arange(-qmax, qmax + 1, dtype=np.float64)
        levels = np.sign(k) * qmax * (np.abs(k) / qmax) ** power_exponent
    elif scheme == "log":
        mags = 2.0 ** -np.arange(0, 2 ** (bits - 1) - 1, dtype=np.float64)
        levels = np.concatenate([-mags, [0.0], mags[::-1]])
    else:
        layout = float_layout or DEFAULT_FLOAT_LAYOUT[bits]
        if 1 + layout[0] + layout[1] != bits:
            raise CodecError(f"float layout {layout} does not fit {bits} bits")
        levels = np.array(_float_levels(*layout))
    levels = np.asarray(levels, dtype=np.float64)
    levels.setflags(write=False)
    return levels


@dataclass(frozen=True)
class Grid:
    levels: np.ndarray

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=np.float64)
        if lv.ndim != 1 or lv.size < 2 or np.any(np.diff(lv) <= 0):
            raise CodecError("grid levels must be a strictly increasing 1-D sequence")
        object.__setattr__(self, "levels", lv)

    @property
    def size(self) -> int:
        return self.levels.size

    @property
    def center(self) -> float:
        # index of the level 0 for symmetric grids
        return (self.size - 1) / 2.0


@dataclass(frozen=True)
class QuantParams:
    """Scheme, bit-width(s) and per-output-channel scales of one weight tensor.

    ``bits`` is either one integer or one integer per output channel (mixed
    precision).  ``activation_scale`` quantizes the layer input, uniformly and
    per tensor.
    """

    scheme: str
    bits: int | tuple[int, ...]
    weight_scales: np.ndarray
    activation_scale: float | None = None
    power_exponent: float = 2.0
    float_layout: tuple[int, int] | None = None
    zero_channels: tuple[int, ...] = field(default=())

    def __post_init__(self):
        scales = np.asarray(self.weight_scales, dtype=np.float64).reshape(-1)
        if scales.size == 0 or np.any(~np.isfinite(scales)) or np.any(scales <= 0):
            raise CodecError("weight scales must be finite and strictly positive")
        object.__setattr__(self, "weight_scales", scales)
        if not isinstance(self.bits, (int, np.integer)):
            bits = tuple(int(b) for b in self.bits)
            if len(bits) != scales.size:
                raise CodecError("per-channel bits must match the number of scales")
            object.__setattr__(self, "bits", bits)
        for b in self.channel_bits_all():
            if not MIN_BITS <= b <= MAX_BITS:
                raise CodecError(f"bits must lie in [{MIN_BITS}, {MAX_BITS}], got {b}")
        if self.scheme not in SCHEMES:
            raise CodecError(f"unknown scheme {self.scheme!r}")
        if self.power_exponent <= 0:
            raise CodecError("power exponent must be positive")
        if self.activation_scale is not None and not self.activation_scale > 0:
            raise CodecError("activation scale must be strictly positive")
        if self.float_layout is not None:
            layout = tuple(int(v) for v in self.float_layout)
            object.__setattr__(self, "float_layout", layout)

    @property
    def channels(self) -> int:
        return self.weight_scales.size

    def channel_bits(self, channel: int) -> int:
        if isinstance(self.bits, tuple):
            return self.bits[channel]
        return int(self.bits)

    def channel_bits_all(self) -> np.ndarray:
        if isinstance(self.bits, tuple):
            return np.array(self.bits, dtype=np.int64)
        return np.full(self.weight_scales.size, int(self.bits), dtype=np.int64)

    def _layout(self, bits: int) -> tuple[int, int] | None:
        if self.scheme != "float":
            return None
        if self.float_layout is not None and 1 + sum(self.float_layout) == bits:
            return self.float_layout
        return DEFAULT_FLOAT_LAYOUT[bits]

    def unit_levels(self, bits: int) -> np.ndarray:
        return base_levels(self.scheme, bits, float(self.power_exponent), self._layout(bits))

    def channel_groups(self) -> list[tuple[int, np.ndarray]]:
        """(bits, channel indices) pairs, ascending in bits."""
        cb = self.channel_bits_all()
        return [(int(b), np.flatnonzero(cb == b)) for b in np.unique(cb)]


def _top_level(scheme, bits, power_exponent=2.0, float_layout=None) -> float:
    return float(base_levels(scheme, bits, power_exponent, float_layout)[-1])


def compute_scales(
    W,
    bits: int | Sequence[int],
    scheme: str = "uniform",
    power_exponent: float = 2.0,
    float_layout: tuple[int, int] | None = None,
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Symmetric max-abs scales, one per output channel (axis 0).

    The largest grid level lands on the channel's max-abs value.  All-zero
    channels fall back to a scale of 1 and are returned in the second slot.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        raise CodecError("cannot compute scales of an empty tensor")
    W2 = W.reshape(W.shape[0], -1) if W.ndim > 1 else W.reshape(-1, 1)
    maxabs = np.max(np.abs(W2), axis=1)
    n = maxabs.size
    bits_arr = np.full(n, bits) if np.isscalar(bits) else np.asarray(bits)
    scales = np.empty(n)
    for c in range(n):
        b = int(bits_arr[c])
        layout = float_layout if float_layout and 1 + sum(float_layout) == b else None
        scales[c] = maxabs[c] / _top_level(scheme, b, power_exponent, layout)
    zero = tuple(int(c) for c in np.flatnonzero(maxabs == 0))
    scales[list(zero)] = 1.0
    return scales, zero


def make_params(
    W,
    scheme: str,
    bits: int | Sequence[int],
    power_exponent: float = 2.0,
    float_layout: tuple[int, int] | None = None,
    activation_scale: float | None = None,
) -> QuantParams:
    scales, zero = compute_scales(W, bits, scheme, power_exponent, float_layout)
    bits_field = int(bits) if np.isscalar(bits) else tuple(int(b) for b in bits)
    return QuantParams(scheme, bits_field, scales, activation_scale, power_exponent, float_layout, zero)


def build_grid(params: QuantParams, channel: int = 0) -> Grid:
    bits = params.channel_bits(channel)
    return Grid(params.unit_levels(bits) * params.weight_scales[channel])


def to_index(x, grid: Grid):
    """Continuous position of ``x`` along the grid (clamped at the ends)."""
    idx = np.arange(grid.size, dtype=np.float64)
    out = np.interp(x, grid.levels, idx)
    return float(out) if np.ndim(out) == 0 else out


def from_index(k, grid: Grid):
    idx = np.arange(grid.size, dtype=np.float64)
    out = np.interp(k, idx, grid.levels)
    return float(out) if np.ndim(out) == 0 else out


def index_slope(k, levels: np.ndarray) -> np.ndarray:
    """d from_index / d k; zero outside the grid range."""
    k = np.asarray(k, dtype=np.float64)
    n = levels.size
    seg = np.clip(np.floor(k).astype(np.int64), 0, n - 2)
    slope = levels[seg + 1] - levels[seg]
    return np.where((k < 0) | (k > n - 1), 0.0, slope)


def round_index(k, center: float):
    """Round half away from the grid's zero level."""
    d = np.asarray(k, dtype=np.float64) - center
    out = center + np.sign(d) * np.floor(np.abs(d) + 0.5)
    return float(out) if np.ndim(out) == 0 else out


def soft_round(k, beta: float):
    """tanh-shaped differentiable rounding; exact at integers."""
    if beta <= 0:
        raise CodecError("beta must be positive")
    k = np.asarray(k, dtype=np.float64)
    fl = np.floor(k)
    frac = k - fl
    out = fl + 0.5 * (1.0 + np.tanh(beta * (frac - 0.5)) / math.tanh(beta / 2.0))
    out = np.where(frac == 0, fl, out)  # exact at integers
    return float(out) if out.ndim == 0 else out


def soft_round_grad(k, beta: float) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    frac = k - np.floor(k)
    sech2 = 1.0 / np.cosh(beta * (frac - 0.5)) ** 2
    return 0.5 * beta * sech2 / math.tanh(beta / 2.0)


def quantize_dequantize(x, grid: Grid, mode: str = "hard", beta: float | None = None):
    k = to_index(x, grid)
    if mode == "hard":
        return from_index(round_index(k, grid.center), grid)
    if mode == "soft":
        if beta is None:
            raise CodecError("soft mode needs beta")
        return from_index(soft_round(k, beta), grid)
    raise CodecError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# channel-wise tensor helpers (weights shaped (out_channels, ...))
# ---------------------------------------------------------------------------


def _flat(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    return W.reshape(W.shape[0], -1)


def weight_to_index(W, params: QuantParams) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    flat = _flat(W)
    out = np.empty_like(flat)
    for bits, rows in params.channel_groups():
        lv = params.unit_levels(bits)
        scaled = flat[rows] / params.weight_scales[rows, None]
        out[rows] = np.interp(scaled, lv, np.arange(lv.size, dtype=np.float64))
    return out.reshape(W.shape)


def weight_from_index(K, params: QuantParams) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    flat = _flat(K)
    out = np.empty_like(flat)
    for bits, rows in params.channel_groups():
        lv = params.unit_levels(bits)
        out[rows] = np.interp(flat[rows], np.arange(lv.size, dtype=np.float64), lv) * params.weight_scales[rows, None]
    return out.reshape(K.shape)


def weight_index_slope(K, params: QuantParams) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    flat = _flat(K)
    out = np.empty_like(flat)
    for bits, rows in params.channel_groups():
        lv = params.unit_levels(bits)
        out[rows] = index_slope(flat[rows], lv) * params.weight_scales[rows, None]
    return out.reshape(K.shape)


def weight_index_bounds(params: QuantParams, shape) -> tuple[np.ndarray, np.ndarray]:
    """Per-element (center, last index) arrays broadcast to ``shape``."""
    n_levels = np.array([params.unit_levels(b).size for b in params.channel_bits_all()], dtype=np.float64)
    tail = (1,) * (len(shape) - 1)
    last = (n_levels - 1).reshape((-1,) + tail)
    center = last / 2.0
    return np.broadcast_to(center, shape), np.broadcast_to(last, shape)


def quantize_weight(W, params: QuantParams, mode: str = "hard", beta: float | None = None) -> np.ndarray:
    K = weight_to_index(W, params)
    if mode == "hard":
        center, _ = weight_index_bounds(params, K.shape)
        return weight_from_index(round_index(K, center), params)
    if mode == "soft":
        return weight_from_index(soft_round(K, beta), params)
    raise CodecError(f"unknown mode {mode!r}")


def is_on_grid(W, params: QuantParams) -> bool:
    """Exact membership of every entry in its channel's codebook."""
    flat = _flat(W)
    for c in range(flat.shape[0]):
        levels = build_grid(params, c).levels
        if not np.all(np.isin(flat[c], levels)):
            return False
    return True


# ---------------------------------------------------------------------------
# activations: uniform symmetric, per tensor, round half up
# ---------------------------------------------------------------------------


def activation_scale(maxabs: float, bits: int) -> float:
    qmax = 2 ** (bits - 1) - 1
    return maxabs / qmax if maxabs > 0 else 1.0


def activation_codes(x, scale: float, bits: int) -> np.ndarray:
    qmax = 2 ** (bits - 1) - 1
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) / scale + 0.5), -qmax, qmax)


def quantize_activation(x, scale: float, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Fake-quantized activations and the straight-through pass mask."""
    x = np.asarray(x, dtype=np.float64)
    qmax = 2 ** (bits - 1) - 1
    inside = np.abs(x) <= qmax * scale
    return activation_codes(x, scale, bits) * scale, inside


def dump_grid(params: QuantParams, path) -> None:
    with open(path, "w") as fh:
        for c in range(params.channels):
            fh.write(f"# channel {c} bits {params.channel_bits(c)}\n")
            for v in build_grid(params, c).levels:
                fh.write(f"{float(v)!r}\n")
