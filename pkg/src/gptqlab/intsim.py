"""Integer-only inference simulation and exhaustive rounding oracles.

* requantization of an int accumulator by ``M * 2**-e`` with an additive
  binary rounding mask on the output codes,
* the three-term decomposition of the product error ``W X - floor(W) floor(X)``,
* brute-force search over weight roundings for tiny instances.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

MAX_MULTIPLIER = 1 << 31
REL_TOL = Fraction(1, 1 << 30)
ACC_LIMIT = (1 << 63) - 1
MAX_CANDIDATES = 10**6


class IntSimError(ValueError):
    pass


@dataclass(frozen=True)
class RequantParams:
    multiplier: int
    shift: int

    def __post_init__(self):
        if not 0 <= self.multiplier < MAX_MULTIPLIER or self.shift < 0:
            raise IntSimError(f"invalid requantization ({self.multiplier}, {self.shift})")

    @property
    def ratio(self) -> float:
        return self.multiplier / 2.0**self.shift


def derive_requant(s_w: float, s_x: float, s_y: float) -> RequantParams:
    """Smallest shift ``e`` whose multiplier ``M < 2**31`` meets 2**-30 relative error."""
    if not (s_w > 0 and s_x > 0 and s_y > 0):
        raise IntSimError("scales must be positive")
    ratio = Fraction(s_w) * Fraction(s_x) / Fraction(s_y)
    if ratio >= MAX_MULTIPLIER:
        raise IntSimError(f"scale ratio {float(ratio)} does not fit a 31-bit multiplier")
    e = 0
    while True:
        scaled = ratio * (1 << e)
        m = math.floor(scaled + Fraction(1, 2))
        if m >= MAX_MULTIPLIER:
            raise IntSimError(f"scale ratio {float(ratio)} is too small to represent")
        if m > 0 and abs(Fraction(m, 1 << e) - ratio) <= REL_TOL * ratio:
            return RequantParams(int(m), e)
        e += 1


def _as_int_array(a, name) -> np.ndarray:
    arr = np.asarray(a)
    if arr.dtype.kind not in "iu":
        if not np.all(np.mod(arr, 1) == 0):
            raise IntSimError(f"{name} must hold integers")
        arr = arr.astype(np.int64)
    return arr.astype(object)


def integer_layer_forward(W_hat, X_hat, rq: RequantParams, mask=None, out_bits: int = 8) -> np.ndarray:
    """Exact integer layer: ``clamp(((W @ X) * M + 2**(e-1)) >> e + mask)``.

    ``X_hat`` is ``(in,)`` or ``(N, in)``; the result has the matching shape.
    The mask is added before clamping.
    """
    W = _as_int_array(W_hat, "weights")
    X = _as_int_array(X_hat, "inputs")
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    acc = X2 @ W.T
    if any(abs(int(v)) > ACC_LIMIT for v in acc.flat):
        raise IntSimError("accumulator exceeds 63 bits")
    scaled = acc * rq.multiplier
    if rq.shift:
        scaled = (scaled + (1 << (rq.shift - 1))) >> rq.shift
    if mask is not None:
        m = np.asarray(mask)
        if not np.all((m == 0) | (m == 1)):
            raise IntSimError("activation mask must be binary")
        scaled = scaled + (m[None, :] if (single and m.ndim == 1) else m).astype(object)
    qmax = (1 << (out_bits - 1)) - 1
    out = np.array([[min(max(int(v), -qmax), qmax) for v in row] for row in scaled], dtype=np.int64)
    return out[0] if single else out


@dataclass(frozen=True)
class ErrorDecomposition:
    term_w: float
    term_x: float
    term_cross: float
    total: float


def error_decomposition(W, X) -> ErrorDecomposition:
    """Split ``W X - floor(W) floor(X)`` into weight, input and cross terms (unit scales).

    Tensor arguments contract as ``W @ X``.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    fw, fx = np.floor(W), np.floor(X)
    ew, ex = W - fw, X - fx
    if W.ndim == 0 and X.ndim == 0:
        tw, tx, tc = float(ew * fx), float(fw * ex), float(ew * ex)
        return ErrorDecomposition(tw, tx, tc, math.fsum([tw, tx, tc]))
    mul = np.multiply if W.ndim == 0 or X.ndim == 0 else np.matmul
    tw, tx, tc = mul(ew, fx), mul(fw, ex), mul(ew, ex)
    return ErrorDecomposition(tw, tx, tc, tw + tx + tc)


@dataclass(frozen=True)
class OracleResult:
    weights: tuple[float, ...]
    value: float
    loss: float
    offsets: tuple[float, ...]
    candidates: int


def exhaustive_rounding_oracle(
    W: Sequence[float],
    X: Sequence[float],
    target: float,
    offsets: Sequence[int] = (-1, 0, 1, 2),
    grids: Sequence[Sequence[float]] | None = None,
) -> OracleResult:
    """Best assignment of integer (or grid) weights to ``W`` for ``W_hat . X ~ target``.

    Candidates per weight are ``floor(w) + offset`` unless explicit ``grids``
    are given.  Ties in ``|W_hat . X - target|`` go to the assignment closest
    to ``W`` in squared distance, then to the lexicographically smallest.
    """
    W = [float(w) for w in W]
    X = [float(x) for x in X]
    if len(W) != len(X):
        raise IntSimError("weights and inputs differ in length")
    if grids is None:
        grids = [[math.floor(w) + o for o in offsets] for w in W]
    count = math.prod(len(g) for g in grids)
    if count > MAX_CANDIDATES:
        raise IntSimError(f"{count} candidates exceed the limit of {MAX_CANDIDATES}")
    best_key, best = None, None
    for cand in itertools.product(*grids):
        value = math.fsum(c * x for c, x in zip(cand, X))
        key = (abs(value - target), math.fsum((c - w) ** 2 for c, w in zip(cand, W)), cand)
        if best_key is None or key < best_key:
            best_key, best = key, (cand, value)
    cand, value = best
    offs = tuple(c - math.floor(w) for c, w in zip(cand, W))
    return OracleResult(tuple(cand), value, best_key[0], offs, count)


def write_oracle_csv(result: OracleResult, W, X, target, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "weight", "input", "quantized_weight", "offset"])
        for i, (wi, xi, qi, oi) in enumerate(zip(W, X, result.weights, result.offsets)):
            w.writerow([i, repr(float(wi)), repr(float(xi)), qi, oi])
        w.writerow([])
        w.writerow(["target", repr(float(target))])
        w.writerow(["value", repr(result.value)])
        w.writerow(["loss", repr(result.loss)])
