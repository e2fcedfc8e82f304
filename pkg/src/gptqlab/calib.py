"""Toy classification data, calibration sets at several levels of
distribution shift, and intermediate-feature augmentations.

Every sample is a pure function of ``(seed, index)``; class prototypes are a
pure function of ``seed``.  Training and test splits draw from disjoint
index ranges of the same task.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KINDS = ("train_split", "test_split", "shifted", "cross_domain", "white_noise")
AUGMENTATIONS = ("dropout", "mixup", "cutout", "noise")
DEFAULT_MAGNITUDE = {"dropout": 0.1, "mixup": 0.4, "cutout": 0.25, "noise": 0.05}

TEST_OFFSET = 1 << 30
NOISE_STD = 1.75
PROTOTYPE_STD = 1.0


class CalibError(ValueError):
    pass


@dataclass
class CalibrationSet:
    inputs: np.ndarray
    labels: np.ndarray | None
    kind: str
    seed: int

    def __len__(self):
        return len(self.inputs)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])


def _prototypes(seed: int, shape, classes: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x9E37])
    protos = rng.standard_normal((classes, *shape)) * PROTOTYPE_STD
    if len(shape) == 3:
        # light spatial smoothing so conv filters have structure to find
        k = np.array([0.25, 0.5, 0.25])
        protos = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), -1, protos)
        protos = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), -2, protos)
        protos *= 2.0
    return protos


def _sample(seed: int, index: int, protos: np.ndarray) -> tuple[np.ndarray, int]:
    rng = np.random.default_rng([seed, index])
    label = index % len(protos)
    x = protos[label] + rng.standard_normal(protos.shape[1:]) * NOISE_STD
    return x, label


def _gaussian_mixture(seed, indices, shape, classes):
    protos = _prototypes(seed, shape, classes)
    xs, ys = zip(*(_sample(seed, int(i), protos) for i in indices))
    return np.stack(xs), np.array(ys, dtype=np.int64)


def _stripes(seed, n, shape):
    """Oriented sinusoidal gratings; a structurally different input domain."""
    rng = np.random.default_rng([seed, 0x5712])
    out = np.empty((n, *shape))
    if len(shape) == 3:
        c, h, w = shape
        yy, xx = np.mgrid[0:h, 0:w]
        for i in range(n):
            theta, freq, phase = rng.uniform(0, np.pi), rng.uniform(0.3, 1.5), rng.uniform(0, 2 * np.pi)
            pattern = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
            out[i] = 2.0 * pattern[None] * np.ones((c, 1, 1))
    else:
        t = np.arange(int(np.prod(shape)))
        for i in range(n):
            freq, phase = rng.uniform(0.1, 1.0), rng.uniform(0, 2 * np.pi)
            out[i] = 2.0 * np.sin(freq * t + phase).reshape(shape)
    return out


def make_dataset(
    kind: str,
    n: int,
    seed: int = 0,
    shape: tuple[int, ...] = (1, 8, 8),
    classes: int = 4,
    shift: float = 0.5,
) -> CalibrationSet:
    """Build ``n`` samples of the given provenance.

    ``shift`` sets the brightness/contrast perturbation of the shifted kind:
    ``x -> (1 + shift) * x + shift``.
    """
    if kind not in KINDS:
        raise CalibError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if n < 1:
        raise CalibError("dataset size must be at least 1")
    shape = tuple(int(s) for s in shape)
    if kind in ("train_split", "shifted"):
        X, y = _gaussian_mixture(seed, range(n), shape, classes)
        if kind == "shifted" and shift:
            X = (1.0 + shift) * X + shift
        return CalibrationSet(X, y, kind, seed)
    if kind == "test_split":
        X, y = _gaussian_mixture(seed, range(TEST_OFFSET, TEST_OFFSET + n), shape, classes)
        return CalibrationSet(X, y, kind, seed)
    if kind == "cross_domain":
        return CalibrationSet(_stripes(seed, n, shape), None, kind, seed)
    # white noise spans the range of an equally sized in-distribution draw
    ref, _ = _gaussian_mixture(seed, range(n), shape, classes)
    rng = np.random.default_rng([seed, 0xB01])
    X = rng.uniform(ref.min(), ref.max(), size=(n, *shape))
    return CalibrationSet(X, None, kind, seed)


def augment_features(X, kind: str, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if kind not in AUGMENTATIONS:
        raise CalibError(f"unknown augmentation {kind!r}; expected one of {AUGMENTATIONS}")
    if magnitude < 0:
        raise CalibError("augmentation magnitude must be non-negative")
    if kind == "dropout" and magnitude >= 1:
        raise CalibError("dropout rate must be below 1")
    if magnitude == 0:
        return X.copy()
    if kind == "dropout":
        keep = rng.random(X.shape) >= magnitude
        return X * keep / (1.0 - magnitude)
    if kind == "mixup":
        lam = rng.beta(magnitude, magnitude, size=(len(X),) + (1,) * (X.ndim - 1))
        partner = X[rng.permutation(len(X))]
        return lam * X + (1.0 - lam) * partner
    if kind == "cutout":
        return X * cutout_mask(X.shape, magnitude, rng)
    return X + rng.standard_normal(X.shape) * magnitude * X.std()


def cutout_mask(shape, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Per-sample mask zeroing one square (or 1-D window on flat features)."""
    mask = np.ones(shape)
    spatial = shape[2:] if len(shape) == 4 else shape[1:]
    side = int(round(magnitude * min(spatial)))
    if side == 0:
        return mask
    for i in range(shape[0]):
        if len(shape) == 4:
            r = rng.integers(0, spatial[0] - side + 1)
            c = rng.integers(0, spatial[1] - side + 1)
            mask[i, :, r : r + side, c : c + side] = 0.0
        else:
            start = rng.integers(0, spatial[-1] - side + 1)
            mask[i, ..., start : start + side] = 0.0
    return mask


def save_dataset(ds: CalibrationSet, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "inputs.bin").write_bytes(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
    manifest = {"format": "gptqlab-dataset/1", "kind": ds.kind, "n": len(ds), "seed": ds.seed, "shape": list(ds.shape)}
    if ds.labels is not None:
        (path / "labels.bin").write_bytes(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
        manifest["labels"] = True
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> CalibrationSet:
    path = Path(path)
    m = json.loads((path / "manifest.json").read_text())
    X = np.frombuffer((path / "inputs.bin").read_bytes(), dtype="<f8").astype(np.float64)
    X = X.reshape((m["n"], *m["shape"]))
    y = None
    if m.get("labels"):
        y = np.frombuffer((path / "labels.bin").read_bytes(), dtype="<i8").astype(np.int64)
    return CalibrationSet(X, y, m["kind"], m["seed"])
