"""Dense float64 layers, sequential networks with residual skips, and exact
reverse-mode gradients.

Arrays are plain ``numpy.ndarray`` in float64 with the batch on axis 0:
linear layers take ``(N, features)``, conv layers ``(N, C, H, W)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .codec import quantize_activation

KINDS = ("linear", "conv2d", "relu", "residual_add", "global_avg_pool", "flatten")
WEIGHTED = ("linear", "conv2d")


class ShapeError(ValueError):
    pass


class NetworkError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class LayerRecord:
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    activation: str | None = None
    # residual_add: index of the layer whose output is added; -1 is the network input
    skip: int | None = None
    # input fake-quantization, set on quantized networks only
    act_scale: float | None = None
    act_bits: int | None = None
    quant: dict | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise NetworkError(f"unknown layer kind {self.kind!r}")
        if self.weight is not None:
            self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kind in WEIGHTED:
            ndim = 2 if self.kind == "linear" else 4
            if self.weight is None or self.weight.ndim != ndim:
                raise ShapeError(f"{self.kind} needs a {ndim}-D weight")
            if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
                raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs")
        elif self.weight is not None or self.bias is not None:
            raise ShapeError(f"{self.kind} carries no parameters")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("conv stride must be >= 1 and padding >= 0")
        if self.activation not in (None, "relu"):
            raise NetworkError(f"unsupported fused activation {self.activation!r}")
        if self.kind == "residual_add" and self.skip is None:
            raise NetworkError("residual_add needs a skip reference")

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED


@dataclass
class NetworkRecord:
    layers: list[LayerRecord]
    blocks: list[list[int]] | None = None
    input_shape: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.blocks is None:
            self.blocks = [[i] for i in range(len(self.layers))]
        validate_network(self)

    def weighted_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.weighted]

    def copy(self) -> "NetworkRecord":
        layers = [
            replace(
                l,
                weight=None if l.weight is None else l.weight.copy(),
                bias=None if l.bias is None else l.bias.copy(),
                quant=None if l.quant is None else json.loads(json.dumps(l.quant)),
            )
            for l in self.layers
        ]
        return NetworkRecord(layers, [list(b) for b in self.blocks], self.input_shape, json.loads(json.dumps(self.meta)))


def validate_network(net: NetworkRecord) -> None:
    n = len(net.layers)
    for i, layer in enumerate(net.layers):
        if layer.kind == "residual_add" and not -1 <= layer.skip < i:
            raise NetworkError(f"layer {i}: residual reference {layer.skip} must point backward")
    flat = [i for b in net.blocks for i in b]
    if flat != list(range(n)) or any(len(b) == 0 for b in net.blocks):
        raise NetworkError("blocks must partition the layers in order")


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _conv2d(x, W, stride, pad):
    n, c, h, w = x.shape
    o, ci, kh, kw = W.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, ho, wo, o))
    for p in range(kh):
        for q in range(kw):
            patch = xp[:, :, p : p + stride * ho : stride, q : q + stride * wo : stride]
            out += np.tensordot(patch, W[:, :, p, q], axes=([1], [1]))
    return out.transpose(0, 3, 1, 2), xp


def _conv2d_backward(xp, W, gy, stride, pad):
    o, c, kh, kw = W.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gW = np.zeros_like(W)
    gxp = np.zeros_like(xp)
    for p in range(kh):
        for q in range(kw):
            sl = (slice(None), slice(None), slice(p, p + stride * ho, stride), slice(q, q + stride * wo, stride))
            gW[:, :, p, q] = np.tensordot(gy, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
            gxp[sl] += np.tensordot(gy, W[:, :, p, q], axes=([1], [0])).transpose(0, 3, 1, 2)
    if pad:
        gxp = gxp[:, :, pad:-pad, pad:-pad]
    return gxp, gW


def _check_input(layer: LayerRecord, x, index):
    tag = f"layer {index} ({layer.kind})"
    if layer.kind == "linear":
        if x.ndim != 2 or x.shape[1] != layer.weight.shape[1]:
            raise ShapeError(f"{tag}: expected (N, {layer.weight.shape[1]}), got {x.shape}")
    elif layer.kind == "conv2d":
        if x.ndim != 4 or x.shape[1] != layer.weight.shape[1]:
            raise ShapeError(f"{tag}: expected (N, {layer.weight.shape[1]}, H, W), got {x.shape}")
        kh = layer.weight.shape[2]
        if x.shape[2] + 2 * layer.padding < kh or x.shape[3] + 2 * layer.padding < layer.weight.shape[3]:
            raise ShapeError(f"{tag}: spatial size {x.shape[2:]} smaller than kernel")
    elif layer.kind == "global_avg_pool" and x.ndim != 4:
        raise ShapeError(f"{tag}: expected (N, C, H, W), got {x.shape}")


def _forward_cached(layer: LayerRecord, x, skip=None, index=None, weight=None, bias=None):
    """Forward pass returning (output, cache).  ``weight``/``bias`` override the record."""
    _check_input(layer, x, index)
    cache = {"x_shape": x.shape}
    W = layer.weight if weight is None else weight
    b = layer.bias if bias is None else bias
    kind = layer.kind
    if kind in WEIGHTED:
        if layer.act_scale is not None:
            x, cache["ste"] = quantize_activation(x, layer.act_scale, layer.act_bits)
        if kind == "linear":
            a = x @ W.T
            cache["x"] = x
        else:
            a, cache["xp"] = _conv2d(x, W, layer.stride, layer.padding)
        if b is not None:
            a = a + (b if kind == "linear" else b[None, :, None, None])
        cache["W"] = W
        cache["pre"] = a
        y = np.maximum(a, 0.0) if layer.activation == "relu" else a
        return y, cache
    if kind == "relu":
        cache["x"] = x
        return np.maximum(x, 0.0), cache
    if kind == "residual_add":
        if skip is None or skip.shape != x.shape:
            got = None if skip is None else skip.shape
            raise ShapeError(f"layer {index} (residual_add): branch {x.shape} vs skip {got}")
        return x + skip, cache
    if kind == "global_avg_pool":
        return x.mean(axis=(2, 3), keepdims=True), cache
    return x.reshape(x.shape[0], -1), cache


def _backward_cached(layer: LayerRecord, cache, gy):
    """Returns (grad_input, grad_weight, grad_bias, grad_skip, grad_preactivation)."""
    kind = layer.kind
    if kind in WEIGHTED:
        a = cache["pre"]
        ga = gy * (a > 0) if layer.activation == "relu" else gy
        W = cache["W"]
        gb = None
        if layer.bias is not None:
            gb = ga.sum(axis=0) if kind == "linear" else ga.sum(axis=(0, 2, 3))
        if kind == "linear":
            gW = ga.T @ cache["x"]
            gx = ga @ W
        else:
            gx, gW = _conv2d_backward(cache["xp"], W, ga, layer.stride, layer.padding)
        if "ste" in cache:
            gx = gx * cache["ste"]
        return gx, gW, gb, None, ga
    if kind == "relu":
        return gy * (cache["x"] > 0), None, None, None, None
    if kind == "residual_add":
        return gy, None, None, gy, None
    if kind == "global_avg_pool":
        n, c, h, w = cache["x_shape"]
        return np.broadcast_to(gy / (h * w), (n, c, h, w)).copy(), None, None, None, None
    return gy.reshape(cache["x_shape"]), None, None, None, None


def layer_forward(layer: LayerRecord, x, skip=None, index: int | None = None) -> np.ndarray:
    """Forward one layer on a batch.  ``skip`` feeds residual_add."""
    return _forward_cached(layer, np.asarray(x, dtype=np.float64), skip, index)[0]


# ---------------------------------------------------------------------------
# ranges of layers
# ---------------------------------------------------------------------------


@dataclass
class Trace:
    start: int
    stop: int
    outputs: dict[int, np.ndarray]
    caches: dict[int, dict]


def forward_range(
    layers: list[LayerRecord],
    x,
    start: int = 0,
    stop: int | None = None,
    context: dict[int, np.ndarray] | None = None,
    weights: dict[int, np.ndarray] | None = None,
    biases: dict[int, np.ndarray] | None = None,
    keep: bool = False,
) -> tuple[np.ndarray, Trace]:
    """Run layers ``start..stop-1`` on ``x`` (the output of layer ``start-1``).

    Residual references that point before ``start - 1`` are read from
    ``context`` and treated as constants by :func:`backward_range`.
    """
    stop = len(layers) if stop is None else stop
    context = context or {}
    weights = weights or {}
    biases = biases or {}
    outputs = {start - 1: np.asarray(x, dtype=np.float64)}
    caches = {}
    cur = outputs[start - 1]
    for i in range(start, stop):
        layer = layers[i]
        skip = None
        if layer.kind == "residual_add":
            ref = layer.skip
            skip = outputs[ref] if ref in outputs else context.get(ref)
            if skip is None:
                raise NetworkError(f"layer {i}: residual reference {ref} unavailable")
        cur, cache = _forward_cached(layer, cur, skip, i, weights.get(i), biases.get(i))
        if keep:
            caches[i] = cache
        outputs[i] = cur
    if not keep:
        outputs = {stop - 1: cur}
    return cur, Trace(start, stop, outputs, caches)


@dataclass
class Gradients:
    weight: dict[int, np.ndarray]
    bias: dict[int, np.ndarray]
    preactivation: dict[int, np.ndarray]
    input: np.ndarray


def backward_range(layers: list[LayerRecord], trace: Trace, seed_grad) -> Gradients:
    grads = {trace.stop - 1: np.asarray(seed_grad, dtype=np.float64)}
    gW, gB, gpre = {}, {}, {}
    for i in range(trace.stop - 1, trace.start - 1, -1):
        layer = layers[i]
        gy = grads.pop(i, None)
        if gy is None:
            gy = np.zeros_like(trace.outputs[i])
        if not np.all(np.isfinite(gy)):
            raise NonFiniteError(f"layer {i}: non-finite gradient")
        gx, gw, gb, gskip, ga = _backward_cached(layer, trace.caches[i], gy)
        if gw is not None:
            gW[i] = gw
            if gb is not None:
                gB[i] = gb
            gpre[i] = ga
        prev = i - 1
        grads[prev] = grads[prev] + gx if prev in grads else gx
        if gskip is not None and layer.skip >= trace.start - 1:
            ref = layer.skip
            grads[ref] = grads[ref] + gskip if ref in grads else gskip
    return Gradients(gW, gB, gpre, grads[trace.start - 1])


def network_forward(net: NetworkRecord, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    context = {-1: x}
    return forward_range(net.layers, x, context=context)[0]


def network_outputs(net: NetworkRecord, x) -> dict[int, np.ndarray]:
    """Every layer's output (key -1 is the input)."""
    x = np.asarray(x, dtype=np.float64)
    return forward_range(net.layers, x, keep=True)[1].outputs


def backward(net: NetworkRecord, x, seed_grad) -> Gradients:
    """Gradients of <seed_grad, F(x)> w.r.t. every parameter and pre-activation."""
    x = np.asarray(x, dtype=np.float64)
    y, trace = forward_range(net.layers, x, keep=True)
    seed_grad = np.asarray(seed_grad, dtype=np.float64)
    if seed_grad.shape != y.shape:
        raise ShapeError(f"seed gradient {seed_grad.shape} does not match output {y.shape}")
    for i, out in trace.outputs.items():
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"layer {i}: non-finite activation")
    return backward_range(net.layers, trace, seed_grad)


# ---------------------------------------------------------------------------
# toy architectures and trainer
# ---------------------------------------------------------------------------


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build_mlp(input_dim: int, classes: int, hidden: Iterable[int] = (32, 32), seed: int = 0) -> NetworkRecord:
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden]
    layers = []
    for a, b in zip(dims[:-1], dims[1:]):
        layers.append(LayerRecord("linear", _he(rng, (b, a), a), np.zeros(b), activation="relu"))
    layers.append(LayerRecord("linear", _he(rng, (classes, dims[-1]), dims[-1]), np.zeros(classes)))
    return NetworkRecord(layers, None, (input_dim,), {"arch": "mlp"})


def build_cnn(input_shape: tuple[int, int, int], classes: int, width: int = 6, seed: int = 0) -> NetworkRecord:
    """Small residual CNN: stem, one residual block, strided conv, two linear layers."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    k = 3

    def conv(ci, co, **kw):
        return LayerRecord("conv2d", _he(rng, (co, ci, k, k), ci * k * k), np.zeros(co), padding=1, **kw)

    ho, wo = _conv_out(h, k, 2, 1), _conv_out(w, k, 2, 1)
    flat = 2 * width * ho * wo
    hidden = 16
    layers = [
        conv(c, width, activation="relu"),  # 0
        conv(width, width, activation="relu"),  # 1
        conv(width, width),  # 2
        LayerRecord("residual_add", skip=0),  # 3
        LayerRecord("relu"),  # 4
        conv(width, 2 * width, stride=2, activation="relu"),  # 5
        LayerRecord("flatten"),  # 6
        LayerRecord("linear", _he(rng, (hidden, flat), flat), np.zeros(hidden), activation="relu"),  # 7
        LayerRecord("linear", _he(rng, (classes, hidden), hidden), np.zeros(classes)),  # 8
    ]
    blocks = [[0], [1, 2, 3, 4], [5], [6, 7], [8]]
    return NetworkRecord(layers, blocks, input_shape, {"arch": "cnn"})


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def accuracy(net: NetworkRecord, X, y, batch: int = 256) -> float:
    X = np.asarray(X, dtype=np.float64)
    correct = 0
    for i in range(0, len(X), batch):
        logits = network_forward(net, X[i : i + batch])
        correct += int(np.sum(np.argmax(logits, axis=1) == y[i : i + batch]))
    return correct / len(X)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite; last finite epoch {epoch}")
        self.last_finite_epoch = epoch


def train_toy(
    arch,
    dataset,
    epochs: int,
    seed: int = 0,
    lr: float = 1e-2,
    batch_size: int = 32,
    optimizer: str = "adam",
) -> tuple[NetworkRecord, float]:
    """Train a full-precision fixture with softmax cross-entropy.

    ``arch`` is "mlp", "cnn" or an initialized :class:`NetworkRecord`.
    ``dataset`` is anything with ``inputs`` and ``labels`` arrays.
    """
    from .optim import new_optimizer

    X = np.asarray(dataset.inputs, dtype=np.float64)
    y = np.asarray(dataset.labels, dtype=np.int64)
    classes = int(y.max()) + 1
    if isinstance(arch, NetworkRecord):
        net = arch.copy()
    elif arch == "mlp":
        net = build_mlp(int(np.prod(X.shape[1:])), classes, seed=seed)
        X = X.reshape(len(X), -1)
    elif arch == "cnn":
        net = build_cnn(tuple(X.shape[1:]), classes, seed=seed)
    else:
        raise NetworkError(f"unknown architecture {arch!r}")

    rng = np.random.default_rng(seed + 1)
    opts = {}
    for i in net.weighted_indices():
        opts[(i, "w")] = new_optimizer(optimizer, net.layers[i].weight.shape, {"lr": lr})
        opts[(i, "b")] = new_optimizer(optimizer, net.layers[i].bias.shape, {"lr": lr})
    last_finite = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(X))
        for s in range(0, len(X), batch_size):
            idx = order[s : s + batch_size]
            logits, trace = forward_range(net.layers, X[idx], keep=True)
            p = softmax(logits)
            loss = -np.mean(np.log(p[np.arange(len(idx)), y[idx]] + 1e-300))
            if not np.isfinite(loss):
                raise TrainingDiverged(last_finite)
            g = p.copy()
            g[np.arange(len(idx)), y[idx]] -= 1.0
            grads = backward_range(net.layers, trace, g / len(idx))
            for i in net.weighted_indices():
                layer = net.layers[i]
                layer.weight = opts[(i, "w")].step(layer.weight, grads.weight[i])
                layer.bias = opts[(i, "b")].step(layer.bias, grads.bias[i])
        last_finite = epoch
    acc = accuracy(net, X, y)
    net.meta["train_accuracy"] = acc
    return net, acc


# ---------------------------------------------------------------------------
# persistence: manifest.json + one little-endian float64 blob per tensor
# ---------------------------------------------------------------------------


def _write_blob(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_blob(path: Path, shape) -> np.ndarray:
    data = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    if data.size != int(np.prod(shape)):
        raise NetworkError(f"{path.name}: expected {int(np.prod(shape))} values, found {data.size}")
    return data.reshape(shape)


def save_network(net: NetworkRecord, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, layer in enumerate(net.layers):
        e = {"kind": layer.kind}
        for name in ("weight", "bias"):
            arr = getattr(layer, name)
            if arr is not None:
                fname = f"layer{i:03d}.{name}.bin"
                _write_blob(path / fname, arr)
                e[name] = {"file": fname, "shape": list(arr.shape)}
        if layer.kind == "conv2d":
            e["stride"], e["padding"] = layer.stride, layer.padding
        for name in ("activation", "skip", "act_scale", "act_bits", "quant"):
            v = getattr(layer, name)
            if v is not None:
                e[name] = v
        entries.append(e)
    manifest = {
        "format": "gptqlab-model/1",
        "input_shape": list(net.input_shape),
        "blocks": net.blocks,
        "layers": entries,
        "meta": net.meta,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_network(path) -> NetworkRecord:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no model manifest at {manifest_path}")
    m = json.loads(manifest_path.read_text())
    layers = []
    for e in m["layers"]:
        kw = {k: e[k] for k in ("stride", "padding", "activation", "skip", "act_scale", "act_bits", "quant") if k in e}
        for name in ("weight", "bias"):
            if name in e:
                kw[name] = _read_blob(path / e[name]["file"], e[name]["shape"])
        layers.append(LayerRecord(e["kind"], **kw))
    return NetworkRecord(layers, m["blocks"], tuple(m["input_shape"]), m.get("meta", {}))


def files_digest(path) -> dict[str, bytes]:
    """Raw bytes of every file below ``path``; handy for byte-identity checks."""
    path = Path(path)
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}
