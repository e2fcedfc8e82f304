"""Per-neuron bit-widths from output-gradient sensitivities.

Each neuron's sensitivity is the mean absolute gradient of ``||F(X)||^2``
with respect to its pre-activation.  Bit-widths are the target plus the
z-score truncated toward zero, clamped, then nudged so that the average
hits the target exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .tensor import NetworkRecord, backward, network_forward

MIN_BITS, MAX_BITS = 2, 8
DEGENERATE_SIGMA = 1e-12


@dataclass(frozen=True)
class SensitivityStats:
    g: np.ndarray
    neurons: tuple[tuple[int, int], ...]  # (layer index, output neuron)
    mu: float
    sigma: float

    @classmethod
    def from_values(cls, g, neurons=None) -> "SensitivityStats":
        g = np.asarray(g, dtype=np.float64)
        if neurons is None:
            neurons = tuple((0, i) for i in range(g.size))
        # exactly rounded sums: the statistics do not depend on neuron order
        mu = math.fsum(g) / g.size
        sigma = math.sqrt(math.fsum((g - mu) ** 2) / g.size)
        return cls(g, tuple(neurons), mu, sigma)


@dataclass(frozen=True)
class BitAllocation:
    target: int
    bits: np.ndarray
    z: np.ndarray
    neurons: tuple[tuple[int, int], ...]
    g: np.ndarray | None = None
    feasible: bool = True
    lo: int = MIN_BITS
    hi: int = MAX_BITS

    @property
    def mean(self) -> float:
        return float(np.mean(self.bits))

    def layer_bits(self) -> dict[int, tuple[int, ...]]:
        out: dict[int, list[int]] = {}
        for (layer, _), b in zip(self.neurons, self.bits):
            out.setdefault(layer, []).append(int(b))
        return {k: tuple(v) for k, v in out.items()}


def trunc_toward_zero(z):
    return np.trunc(z)


def neuron_sensitivity(net: NetworkRecord, X, layers=None, batch_size: int = 256) -> SensitivityStats:
    """Mean |d||F(X)||^2 / d a_i| over samples (and spatial positions for convs)."""
    X = np.asarray(X, dtype=np.float64)
    if layers is None:
        w = net.weighted_indices()
        layers = w[1:-1] if len(w) > 2 else w
    sums = {i: np.zeros(net.layers[i].weight.shape[0]) for i in layers}
    counts = {i: 0 for i in layers}
    for s in range(0, len(X), batch_size):
        xb = X[s : s + batch_size]
        out = network_forward(net, xb)
        grads = backward(net, xb, 2.0 * out)
        for i in layers:
            ga = np.abs(grads.preactivation[i])
            axes = (0,) if ga.ndim == 2 else (0, 2, 3)
            sums[i] += ga.sum(axis=axes)
            counts[i] += ga.size // ga.shape[1]
    g, neurons = [], []
    for i in layers:
        vals = sums[i] / counts[i]
        g.extend(vals)
        neurons.extend((i, n) for n in range(vals.size))
    return SensitivityStats.from_values(np.array(g), neurons)


def allocate_bits(stats: SensitivityStats, b: int, lo: int = MIN_BITS, hi: int = MAX_BITS) -> BitAllocation:
    g = stats.g
    if stats.sigma < DEGENERATE_SIGMA:
        z = np.zeros_like(g)
    else:
        z = (g - stats.mu) / stats.sigma
    bits = np.clip(b + trunc_toward_zero(z), lo, hi).astype(np.int64)
    return BitAllocation(int(b), bits, z, stats.neurons, g, True, lo, hi)


def normalize_allocation(alloc: BitAllocation, b: int | None = None) -> BitAllocation:
    """Spread the residual ``N*b - sum(b_i)`` over neurons by fractional z residue.

    Increments go to the largest residues first, decrements to the smallest;
    ties go to the more (resp. less) sensitive neuron, then the lower index.  Neurons whose clamp was binding
    (``b + trunc(z)`` outside the range) keep their value.  When the target
    is unreachable the closest allocation is returned with ``feasible=False``.
    """
    b = alloc.target if b is None else int(b)
    bits = alloc.bits.copy()
    t = trunc_toward_zero(alloc.z)
    residue = alloc.z - t
    unclamped = alloc.target + t
    frozen = (unclamped > alloc.hi) | (unclamped < alloc.lo)
    R = int(len(bits) * b - bits.sum())
    idx = np.arange(len(bits))
    g = alloc.g if alloc.g is not None else alloc.z
    if R > 0:
        order = np.lexsort((idx, -g, -residue))
        step, bound = 1, alloc.hi
    else:
        order = np.lexsort((idx, g, residue))
        step, bound = -1, alloc.lo
    order = order[~frozen[order]]
    while R != 0:
        moved = False
        for i in order:
            if R == 0:
                break
            if bits[i] != bound:
                bits[i] += step
                R -= step
                moved = True
        if not moved:
            break
    return replace(alloc, bits=bits, target=b, feasible=R == 0)


def mixed_precision_allocation(net: NetworkRecord, X, b: int, layers=None) -> tuple[SensitivityStats, BitAllocation]:
    stats = neuron_sensitivity(net, X, layers)
    return stats, normalize_allocation(allocate_bits(stats, b))


def write_allocation_csv(alloc: BitAllocation, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "neuron", "g", "z", "bits"])
        g = alloc.g if alloc.g is not None else np.full(len(alloc.bits), math.nan)
        for (layer, neuron), gi, zi, bi in zip(alloc.neurons, g, alloc.z, alloc.bits):
            w.writerow([layer, neuron, repr(float(gi)), repr(float(zi)), int(bi)])


def read_allocation_csv(path, target: int) -> BitAllocation:
    neurons, g, z, bits = [], [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            neurons.append((int(row["layer"]), int(row["neuron"])))
            g.append(float(row["g"]))
            z.append(float(row["z"]))
            bits.append(int(row["bits"]))
    bits = np.array(bits, dtype=np.int64)
    return BitAllocation(int(target), bits, np.array(z), tuple(neurons), np.array(g), bool(np.sum(bits) == target * len(bits)))
