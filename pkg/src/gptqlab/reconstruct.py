"""Learned weight rounding by block-wise reconstruction.

Each optimization unit (one weighted layer, or one block of layers) is
quantized with a learnable rounding variable per weight.  Two domains:

``unit``
    ``W_q = from_index(floor(to_index(W)) + eps)`` with ``eps`` in [0, 1]
    through a rectified sigmoid; hardened by thresholding at 0.5.
``real``
    ``W_q = from_index(soft_round(raw, beta))`` with unconstrained ``raw``
    initialized at ``to_index(W)``; hardened by rounding ``raw``.

Units run first to last.  Each unit sees the outputs of the already quantized
prefix and is fitted to the full-precision network's outputs.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import codec
from .calib import AUGMENTATIONS, DEFAULT_MAGNITUDE, augment_features
from .codec import QuantParams
from .optim import KINDS as OPTIMIZERS
from .optim import new_optimizer
from .tensor import (
    LayerRecord,
    NetworkRecord,
    _forward_cached,
    backward_range,
    forward_range,
    network_outputs,
)

log = logging.getLogger(__name__)

LOSSES = ("l2", "l1", "cosine", "kl")
DOMAINS = ("unit", "real")
MASKS = ("none", "ambiguity_most", "ambiguity_least", "magnitude_low", "magnitude_high")
GRANULARITIES = ("layer", "block")
GAMMA, ZETA = -0.1, 1.1
NORM_FLOOR = 1e-12
BIAS_LOGIT_CLIP = 30.0


class ReconstructError(ValueError):
    pass


@dataclass
class GptqConfig:
    loss: str = "l2"
    granularity: str = "layer"
    iterations: int = 10000
    batch_size: int = 32
    calib_size: int = 1024
    optimizer: str = "adam"
    lr: float | None = None
    scheme: str = "uniform"
    bits: int = 4
    act_bits: int = 4
    edge_bits: int = 8
    eps_domain: str = "unit"
    beta: float | None = None
    power_exponent: float = 2.0
    float_layout: list[int] | None = None
    mask: str = "none"
    mask_fraction: float = 1.0
    bias_alpha: float = 0.0
    augment: str = "none"
    augment_magnitude: float | None = None
    mixed_precision: bool = False
    seed: int = 0
    val_fraction: float = 0.1
    trace_every: int = 100
    debug: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.loss in LOSSES, f"loss must be one of {LOSSES}"),
            (self.granularity in GRANULARITIES, f"granularity must be one of {GRANULARITIES}"),
            (self.optimizer in OPTIMIZERS, f"optimizer must be one of {OPTIMIZERS}"),
            (self.scheme in codec.SCHEMES, f"scheme must be one of {codec.SCHEMES}"),
            (self.eps_domain in DOMAINS, f"eps_domain must be one of {DOMAINS}"),
            (self.mask in MASKS, f"mask must be one of {MASKS}"),
            (self.augment == "none" or self.augment in AUGMENTATIONS, f"augment must be none or one of {AUGMENTATIONS}"),
            (0 < self.mask_fraction <= 1, "mask_fraction must lie in (0, 1]"),
            (self.bias_alpha >= 0, "bias_alpha must be non-negative"),
            (self.iterations >= 0 and self.batch_size >= 1 and self.calib_size >= 1, "sizes must be positive"),
            (codec.MIN_BITS <= self.bits <= codec.MAX_BITS, "bits must lie in [2, 8]"),
            (codec.MIN_BITS <= self.act_bits <= codec.MAX_BITS, "act_bits must lie in [2, 8]"),
            (self.beta is None or self.beta > 0, "beta must be positive"),
            (0 <= self.val_fraction < 1, "val_fraction must lie in [0, 1)"),
            (self.trace_every >= 1, "trace_every must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ReconstructError(msg)

    @property
    def effective_beta(self) -> float:
        return self.beta if self.beta is not None else codec.default_beta(self.scheme)

    @property
    def effective_magnitude(self) -> float:
        if self.augment == "none":
            return 0.0
        if self.augment_magnitude is not None:
            return self.augment_magnitude
        return DEFAULT_MAGNITUDE[self.augment]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GptqConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ReconstructError(f"unknown GPTQ option(s): {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# rounding variable
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def rectified_sigmoid(raw, gamma: float = GAMMA, zeta: float = ZETA) -> tuple[np.ndarray, np.ndarray]:
    """eps = clip(sigmoid(raw) * (zeta - gamma) + gamma, 0, 1) and d eps / d raw."""
    s = _sigmoid(raw)
    stretched = s * (zeta - gamma) + gamma
    eps = np.clip(stretched, 0.0, 1.0)
    grad = np.where((stretched > 0) & (stretched < 1), (zeta - gamma) * s * (1 - s), 0.0)
    return eps, grad


@dataclass
class EpsilonVar:
    domain: str
    raw: np.ndarray
    floor_index: np.ndarray | None = None
    beta: float = 50.0
    gamma: float = GAMMA
    zeta: float = ZETA
    saturated: int = 0

    @property
    def value(self) -> np.ndarray:
        """Effective rounding offset: in [0, 1] (unit) or the raw index (real)."""
        if self.domain == "unit":
            return rectified_sigmoid(self.raw, self.gamma, self.zeta)[0]
        return self.raw

    def copy(self) -> "EpsilonVar":
        return dataclasses.replace(
            self, raw=self.raw.copy(), floor_index=None if self.floor_index is None else self.floor_index.copy()
        )


def init_epsilon(W, params: QuantParams, domain: str = "unit", beta: float | None = None) -> EpsilonVar:
    """Start from the exact scaled weights (rounding offset = fractional index)."""
    if domain not in DOMAINS:
        raise ReconstructError(f"eps domain must be one of {DOMAINS}")
    beta = codec.default_beta(params.scheme) if beta is None else beta
    K = codec.weight_to_index(W, params)
    if domain == "real":
        return EpsilonVar("real", K.copy(), None, beta)
    _, last = codec.weight_index_bounds(params, K.shape)
    fl = np.minimum(np.floor(K), last - 1)
    frac = K - fl
    p = (frac - GAMMA) / (ZETA - GAMMA)
    raw = np.log(p) - np.log1p(-p)
    saturated = int(np.sum((frac == 0) | (frac == 1)))
    return EpsilonVar("unit", raw, fl, beta, saturated=saturated)


def relaxed_weight(params: QuantParams, eps: EpsilonVar) -> np.ndarray:
    """Dequantized weights before any rounding; equals W at initialization."""
    if eps.domain == "unit":
        return codec.weight_from_index(eps.floor_index + eps.value, params)
    return codec.weight_from_index(eps.raw, params)


def hard_index(params: QuantParams, eps: EpsilonVar) -> np.ndarray:
    if eps.domain == "unit":
        return eps.floor_index + (eps.value >= 0.5)
    center, last = codec.weight_index_bounds(params, eps.raw.shape)
    return np.clip(codec.round_index(eps.raw, center), 0, last)


def effective_weight(params: QuantParams, eps: EpsilonVar, phase: str = "train") -> np.ndarray:
    if phase == "eval":
        return codec.weight_from_index(hard_index(params, eps), params)
    if phase != "train":
        raise ReconstructError(f"unknown phase {phase!r}")
    if eps.domain == "unit":
        return relaxed_weight(params, eps)
    return codec.weight_from_index(codec.soft_round(eps.raw, eps.beta), params)


def effective_weight_grad(params: QuantParams, eps: EpsilonVar) -> np.ndarray:
    """Elementwise d W_train / d raw."""
    if eps.domain == "unit":
        _, deps = rectified_sigmoid(eps.raw, eps.gamma, eps.zeta)
        # slope of the segment [floor, floor + 1]
        return codec.weight_index_slope(eps.floor_index + 0.5, params) * deps
    k = codec.soft_round(eps.raw, eps.beta)
    return codec.weight_index_slope(k, params) * codec.soft_round_grad(eps.raw, eps.beta)


def nearest_weight(W, params: QuantParams) -> np.ndarray:
    return codec.quantize_weight(W, params, "hard")


# ---------------------------------------------------------------------------
# bias perturbation
# ---------------------------------------------------------------------------


@dataclass
class BiasPerturbation:
    """eps_b = alpha |b| (2 sigmoid(r) - 1), strictly inside (-alpha|b|, alpha|b|)."""

    alpha: float
    base: np.ndarray
    logits: np.ndarray

    @classmethod
    def zero(cls, bias, alpha: float) -> "BiasPerturbation":
        if alpha < 0:
            raise ReconstructError("alpha must be non-negative")
        bias = np.asarray(bias, dtype=np.float64)
        return cls(float(alpha), bias.copy(), np.zeros_like(bias))

    @property
    def learnable(self) -> bool:
        return self.alpha > 0

    @property
    def value(self) -> np.ndarray:
        if not self.learnable:
            return np.zeros_like(self.base)
        return self.alpha * np.abs(self.base) * (2.0 * _sigmoid(self.logits) - 1.0)

    def bias(self) -> np.ndarray:
        return self.base + self.value if self.learnable else self.base.copy()

    def grad(self, g_bias) -> np.ndarray:
        s = _sigmoid(self.logits)
        return g_bias * self.alpha * np.abs(self.base) * 2.0 * s * (1 - s)

    def copy(self) -> "BiasPerturbation":
        return BiasPerturbation(self.alpha, self.base.copy(), self.logits.copy())


# ---------------------------------------------------------------------------
# losses and masks
# ---------------------------------------------------------------------------


def reconstruction_loss(Y, Y_hat, kind: str = "l2", with_grad: bool = False):
    """Distance between reference ``Y`` and quantized ``Y_hat`` (batch on axis 0).

    With ``with_grad`` returns ``(loss, d loss / d Y_hat)``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    Yh = np.asarray(Y_hat, dtype=np.float64)
    if Y.shape != Yh.shape:
        raise ReconstructError(f"shape mismatch {Y.shape} vs {Yh.shape}")
    n = Y.shape[0]
    if kind == "l2":
        d = Yh - Y
        loss = float(np.mean(d * d))
        grad = 2.0 * d / d.size if with_grad else None
    elif kind == "l1":
        d = Yh - Y
        loss = float(np.mean(np.abs(d)))
        grad = np.sign(d) / d.size if with_grad else None
    elif kind == "cosine":
        y, yh = Y.reshape(n, -1), Yh.reshape(n, -1)
        ny, nyh = np.linalg.norm(y, axis=1), np.linalg.norm(yh, axis=1)
        ok = (ny >= NORM_FLOOR) & (nyh >= NORM_FLOOR)
        dot = np.sum(y * yh, axis=1)
        cos = np.where(ok, dot / np.where(ok, ny * nyh, 1.0), 1.0)
        loss = float(np.mean(1.0 - cos))
        if with_grad:
            safe_y, safe_yh = np.where(ok, ny, 1.0)[:, None], np.where(ok, nyh, 1.0)[:, None]
            g = -(y / (safe_y * safe_yh) - cos[:, None] * yh / safe_yh**2) / n
            grad = np.where(ok[:, None], g, 0.0).reshape(Y.shape)
    elif kind == "kl":
        y, yh = Y.reshape(n, -1), Yh.reshape(n, -1)
        ly = y - y.max(axis=1, keepdims=True)
        ly = ly - np.log(np.exp(ly).sum(axis=1, keepdims=True))
        lq = yh - yh.max(axis=1, keepdims=True)
        lq = lq - np.log(np.exp(lq).sum(axis=1, keepdims=True))
        P = np.exp(ly)
        loss = float(np.mean(np.sum(P * (ly - lq), axis=1)))
        grad = ((np.exp(lq) - P) / n).reshape(Y.shape) if with_grad else None
    else:
        raise ReconstructError(f"unknown loss {kind!r}; expected one of {LOSSES}")
    return (loss, grad) if with_grad else loss


@dataclass(frozen=True)
class MaskSpec:
    strategy: str = "none"
    fraction: float = 1.0

    def __post_init__(self):
        if self.strategy not in MASKS:
            raise ReconstructError(f"mask strategy must be one of {MASKS}")
        if not 0 < self.fraction <= 1:
            raise ReconstructError("mask fraction must lie in (0, 1]")


def build_mask(W, params: QuantParams, spec: MaskSpec) -> np.ndarray:
    """1 marks trainable rounding variables, 0 frozen ones."""
    W = np.asarray(W, dtype=np.float64)
    if spec.strategy == "none":
        return np.ones_like(W)
    count = math.ceil(spec.fraction * W.size - 1e-9)
    if count < 1:
        raise ReconstructError("mask selects no weights")
    if spec.strategy.startswith("ambiguity"):
        K = codec.weight_to_index(W, params)
        center, _ = codec.weight_index_bounds(params, K.shape)
        score = np.abs(K - codec.round_index(K, center)).reshape(-1)
    else:
        score = np.abs(W).reshape(-1)
    idx = np.arange(score.size)
    descending = spec.strategy in ("ambiguity_most", "magnitude_high")
    order = np.lexsort((idx, -score if descending else score))
    mask = np.zeros(score.size)
    mask[order[:count]] = 1.0
    return mask.reshape(W.shape)


# ---------------------------------------------------------------------------
# one optimization unit
# ---------------------------------------------------------------------------


@dataclass
class Unit:
    """Layers ``start..stop-1`` of ``layers`` with quantization parameters.

    ``layers`` carry the activation quantizers; weights in ``params`` keys
    are replaced by their quantized counterparts.  ``context`` holds outputs
    of earlier layers (over the whole calibration set) for residual skips.
    """

    layers: list[LayerRecord]
    start: int
    stop: int
    params: dict[int, QuantParams]
    context: dict[int, np.ndarray] = field(default_factory=dict)
    index: int = 0

    @property
    def weighted(self) -> list[int]:
        return sorted(self.params)

    def forward(self, x, weights, biases, sample_idx=None, keep=False):
        ctx = self.context if sample_idx is None else {k: v[sample_idx] for k, v in self.context.items()}
        return forward_range(self.layers, x, self.start, self.stop, ctx, weights, biases, keep=keep)


@dataclass
class BlockResult:
    eps: dict[int, EpsilonVar]
    bias: dict[int, BiasPerturbation]
    weights: dict[int, np.ndarray]
    biases: dict[int, np.ndarray]
    nearest_l2: float
    hardened_l2: float
    fallback: bool
    best_step: int
    trace: list[tuple[int, float, float]]
    skipped_steps: int = 0


def _philox(seed: int, unit: int, stream: int) -> np.random.Generator:
    key = np.array([seed, (unit << 8) | stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _split(n: int, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(round(n * val_fraction)) if n > 1 else 0
    n_val = min(max(n_val, 1 if (val_fraction > 0 and n > 1) else 0), n - 1)
    train = np.arange(n - n_val)
    val = np.arange(n - n_val, n) if n_val else train
    return train, val


def loss_and_grads(unit: Unit, x, y, eps: dict[int, EpsilonVar], biases, kind: str = "l2", sample_idx=None):
    """Training loss of ``unit`` and its gradients w.r.t. each raw rounding variable and bias."""
    weights = {i: effective_weight(unit.params[i], eps[i], "train") for i in unit.weighted}
    out, tr = unit.forward(x, weights, biases, sample_idx, keep=True)
    loss, g_out = reconstruction_loss(y, out, kind, with_grad=True)
    if not math.isfinite(loss):
        return loss, {}, {}
    grads = backward_range(unit.layers, tr, g_out)
    g_eps = {i: grads.weight[i] * effective_weight_grad(unit.params[i], eps[i]) for i in unit.weighted}
    return loss, g_eps, grads.bias


def optimize_block(
    unit: Unit,
    x_in,
    y_fp,
    config: GptqConfig,
    on_event: Callable | None = None,
    learn_eps: bool = True,
    masks: dict[int, np.ndarray] | None = None,
) -> BlockResult:
    """Fit the rounding of ``unit`` so its output on ``x_in`` matches ``y_fp``.

    The returned weights are hardened and never have a larger l2 error on the
    calibration inputs than plain nearest rounding (which is returned instead
    when it is better).
    """
    x_in = np.asarray(x_in, dtype=np.float64)
    y_fp = np.asarray(y_fp, dtype=np.float64)
    emit = on_event or (lambda name, info: None)
    layers = unit.layers
    fp_w = {i: layers[i].weight for i in unit.weighted}
    fp_b = {i: layers[i].bias for i in unit.weighted if layers[i].bias is not None}

    eps = {i: init_epsilon(fp_w[i], unit.params[i], config.eps_domain, config.effective_beta) for i in unit.weighted}
    spec = MaskSpec(config.mask, config.mask_fraction)
    if masks is None:
        masks = {i: build_mask(fp_w[i], unit.params[i], spec) for i in unit.weighted}
    if not learn_eps:
        masks = {i: np.zeros_like(fp_w[i]) for i in unit.weighted}
    bias_p = {i: BiasPerturbation.zero(b, config.bias_alpha) for i, b in fp_b.items()}
    hyper = {"lr": config.lr} if config.lr is not None else {}
    opt_eps = {i: new_optimizer(config.optimizer, fp_w[i].shape, hyper) for i in unit.weighted}
    opt_bias = {i: new_optimizer(config.optimizer, bp.base.shape, hyper) for i, bp in bias_p.items() if bp.learnable}
    raw_bounds = {}
    if config.eps_domain == "real":
        for i in unit.weighted:
            raw_bounds[i] = codec.weight_index_bounds(unit.params[i], fp_w[i].shape)[1]

    train_idx, val_idx = _split(len(x_in), config.val_fraction)
    batch_rng = _philox(config.seed, unit.index, 0)
    aug_rng = _philox(config.seed, unit.index, 1)
    magnitude = config.effective_magnitude

    def current_biases():
        return {i: bp.bias() for i, bp in bias_p.items()}

    def hardened():
        return {i: effective_weight(unit.params[i], eps[i], "eval") for i in unit.weighted}

    def evaluate(weights, biases, idx, kind):
        out = unit.forward(x_in[idx], weights, biases, idx)[0]
        return reconstruction_loss(y_fp[idx], out, kind)

    trace = []
    best = None
    last_train = float("nan")

    def checkpoint(step):
        nonlocal best
        val = evaluate(hardened(), current_biases(), val_idx, config.loss)
        trace.append((step, last_train, val))
        if best is None or val < best[0]:
            best = (val, step, {i: e.copy() for i, e in eps.items()}, {i: b.copy() for i, b in bias_p.items()})

    checkpoint(0)
    trainable = any(m.any() for m in masks.values()) or bool(opt_bias)
    frozen_raw = {i: eps[i].raw.copy() for i in unit.weighted}
    iterations = config.iterations if trainable else 0
    for step in range(1, iterations + 1):
        idx = train_idx[batch_rng.integers(0, len(train_idx), config.batch_size)]
        xb = x_in[idx]
        if magnitude > 0:
            emit("augment", {"unit": unit.index, "step": step})
            xb = augment_features(xb, config.augment, magnitude, aug_rng)
        loss, g_eps, g_bias = loss_and_grads(unit, xb, y_fp[idx], eps, current_biases(), config.loss, idx)
        if not math.isfinite(loss):
            log.warning("unit %d: non-finite loss at step %d; falling back to nearest rounding", unit.index, step)
            best = None
            break
        last_train = loss
        for i in unit.weighted:
            if masks[i].any():
                g_raw = g_eps[i] * masks[i]
                new_raw = opt_eps[i].step(eps[i].raw, g_raw)
                eps[i].raw = np.where(masks[i] > 0, new_raw, frozen_raw[i])
                if i in raw_bounds:
                    eps[i].raw = np.clip(eps[i].raw, 0.0, raw_bounds[i])
                if config.debug and eps[i].domain == "unit":
                    v = eps[i].value
                    assert np.all((v >= 0) & (v <= 1)), f"eps left [0, 1] in layer {i}"
            if i in opt_bias:
                g_r = bias_p[i].grad(g_bias[i])
                bias_p[i].logits = np.clip(opt_bias[i].step(bias_p[i].logits, g_r), -BIAS_LOGIT_CLIP, BIAS_LOGIT_CLIP)
        if step % config.trace_every == 0 or step == iterations:
            checkpoint(step)

    nearest = {i: nearest_weight(fp_w[i], unit.params[i]) for i in unit.weighted}
    all_idx = np.arange(len(x_in))
    nearest_l2 = evaluate(nearest, fp_b, all_idx, "l2")
    skipped = sum(o.skipped for o in opt_eps.values())
    if best is None:
        return BlockResult(eps, bias_p, nearest, dict(fp_b), nearest_l2, nearest_l2, True, 0, trace, skipped)
    _, best_step, eps_best, bias_best = best
    eps.update(eps_best)
    bias_p.update(bias_best)
    hard = hardened()
    biases = current_biases()
    hard_l2 = evaluate(hard, biases, all_idx, "l2")
    if hard_l2 > nearest_l2:
        return BlockResult(eps, bias_p, nearest, dict(fp_b), nearest_l2, nearest_l2, True, best_step, trace, skipped)
    return BlockResult(eps, bias_p, hard, biases, nearest_l2, hard_l2, False, best_step, trace, skipped)


def optimize_bias(unit: Unit, x_in, y_fp, alpha: float, config: GptqConfig) -> dict[int, BiasPerturbation]:
    """Learn only the bias perturbations of ``unit`` (rounding variables frozen)."""
    if alpha == 0:
        return {i: BiasPerturbation.zero(unit.layers[i].bias, 0.0) for i in unit.weighted if unit.layers[i].bias is not None}
    cfg = dataclasses.replace(config, bias_alpha=alpha)
    return optimize_block(unit, x_in, y_fp, cfg, learn_eps=False).bias


# ---------------------------------------------------------------------------
# bias correction
# ---------------------------------------------------------------------------


def preactivation(layer: LayerRecord, x) -> np.ndarray:
    return _forward_cached(layer, np.asarray(x, dtype=np.float64))[1]["pre"]


def _neuron_mean(a) -> np.ndarray:
    return a.mean(axis=0) if a.ndim == 2 else a.mean(axis=(0, 2, 3))


def bias_correct(fp_layer: LayerRecord, q_layer: LayerRecord, x_fp, x_q=None) -> np.ndarray:
    """Shift the quantized layer's bias so its mean output per neuron matches."""
    x_q = x_fp if x_q is None else x_q
    shift = _neuron_mean(preactivation(fp_layer, x_fp)) - _neuron_mean(preactivation(q_layer, x_q))
    base = q_layer.bias if q_layer.bias is not None else np.zeros(q_layer.weight.shape[0])
    return base + shift


# ---------------------------------------------------------------------------
# whole network
# ---------------------------------------------------------------------------


@dataclass
class UnitReport:
    index: int
    layers: tuple[int, ...]
    nearest_l2: float
    hardened_l2: float
    fallback: bool
    best_step: int
    skipped_steps: int
    trace: list[tuple[int, float, float]]
    seconds: float = 0.0


@dataclass
class QuantReport:
    config: dict
    units: list[UnitReport]
    act_scales: dict[int, tuple[float, int]]
    layer_bits: dict[int, object]
    zero_channels: dict[int, tuple[int, ...]]
    eps_saturated: int
    allocation: object = None
    sensitivity: object = None


def schedule(net: NetworkRecord, granularity: str) -> list[tuple[int, int]]:
    """(start, stop) layer ranges of the optimization units, first to last."""
    if granularity == "layer":
        return [(i, i + 1) for i in net.weighted_indices()]
    units = []
    for block in net.blocks:
        if any(net.layers[i].weighted for i in block):
            units.append((block[0], block[-1] + 1))
    return units


def _quant_meta(params: QuantParams, config: GptqConfig) -> dict:
    bits = params.bits if isinstance(params.bits, int) else list(params.bits)
    meta = {
        "scheme": params.scheme,
        "bits": bits,
        "weight_scales": [float(s) for s in params.weight_scales],
        "eps_domain": config.eps_domain,
    }
    if params.scheme == "power":
        meta["power_exponent"] = params.power_exponent
    if params.scheme == "float" and params.float_layout is not None:
        meta["float_layout"] = list(params.float_layout)
    return meta


def quantize_network(
    net: NetworkRecord,
    calib_X,
    config: GptqConfig,
    allocation=None,
    on_event: Callable | None = None,
) -> tuple[NetworkRecord, QuantReport]:
    """Quantize every weighted layer, unit by unit, first to last.

    The first and last weighted layers use ``config.edge_bits`` for weights
    and input activations.  ``allocation`` (a mixed-precision
    ``BitAllocation``) overrides the per-neuron bits of the other layers.
    """
    from .mixedprec import mixed_precision_allocation

    emit = on_event or (lambda name, info: None)
    X = np.asarray(calib_X, dtype=np.float64)
    weighted = net.weighted_indices()
    if not weighted:
        raise ReconstructError("network has no weighted layers")
    edges = {weighted[0], weighted[-1]}

    emit("reference", {"samples": len(X)})
    fp_out = network_outputs(net, X)

    sensitivity = None
    if config.mixed_precision and allocation is None:
        middle = [i for i in weighted if i not in edges]
        if middle:
            sensitivity, allocation = mixed_precision_allocation(net, X, config.bits, middle)
    layer_bits: dict[int, object] = {i: config.edge_bits if i in edges else config.bits for i in weighted}
    if allocation is not None:
        layer_bits.update(allocation.layer_bits())

    qnet = net.copy()
    act_scales = {}
    for i in weighted:
        abits = config.edge_bits if i in edges else config.act_bits
        scale = codec.activation_scale(float(np.max(np.abs(fp_out[i - 1]))), abits)
        qnet.layers[i].act_scale, qnet.layers[i].act_bits = scale, abits
        act_scales[i] = (scale, abits)

    layout = tuple(config.float_layout) if config.float_layout else None
    params_all = {
        i: codec.make_params(net.layers[i].weight, config.scheme, layer_bits[i], config.power_exponent, layout)
        for i in weighted
    }

    q_out = {-1: X}
    pos = 0
    reports = []
    saturated = 0

    def propagate(a, b):
        if b > a:
            _, tr = forward_range(qnet.layers, q_out[a - 1], a, b, q_out, keep=True)
            q_out.update(tr.outputs)

    for u, (a, b) in enumerate(schedule(net, config.granularity)):
        propagate(pos, a)
        t0 = time.perf_counter()
        unit = Unit(qnet.layers, a, b, {i: params_all[i] for i in range(a, b) if i in params_all}, q_out, u)
        emit("unit", {"unit": unit, "inputs": q_out[a - 1], "targets": fp_out[b - 1]})
        res = optimize_block(unit, q_out[a - 1], fp_out[b - 1], config, emit)
        saturated += sum(e.saturated for e in res.eps.values())
        for i in unit.weighted:
            qnet.layers[i].weight = res.weights[i]
            if i in res.biases:
                qnet.layers[i].bias = res.biases[i]
            qnet.layers[i].quant = _quant_meta(params_all[i], config)
        for i in unit.weighted:
            propagate(a, i)
            qnet.layers[i].bias = bias_correct(net.layers[i], qnet.layers[i], fp_out[i - 1], q_out[i - 1])
        propagate(a, b)
        pos = b
        seconds = time.perf_counter() - t0
        reports.append(
            UnitReport(
                u, tuple(range(a, b)), res.nearest_l2, res.hardened_l2, res.fallback, res.best_step, res.skipped_steps, res.trace, seconds
            )
        )
        log.info("unit %d layers %d..%d: nearest l2 %.6g -> %.6g%s", u, a, b - 1, res.nearest_l2, res.hardened_l2, " (fallback)" if res.fallback else "")

    zero = {i: p.zero_channels for i, p in params_all.items() if p.zero_channels}
    report = QuantReport(config.to_dict(), reports, act_scales, layer_bits, zero, saturated, allocation, sensitivity)
    qnet.meta["quantized"] = True
    return qnet, report
