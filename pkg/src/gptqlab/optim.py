"""First-order optimizers with frozen default hyperparameters.

One :class:`Optimizer` owns the state of exactly one learnable tensor.
``step`` returns the updated tensor and never mutates its inputs.
"""

from __future__ import annotations

import numpy as np

KINDS = ("sgd", "nesterov", "adam", "adamw", "adamax", "adagrad", "adadelta", "rmsprop")

# adagrad and adadelta get larger step sizes, otherwise they
# cannot make progress in a few thousand steps
DEFAULTS: dict[str, dict[str, float]] = {
    "sgd": {"lr": 1e-2, "momentum": 0.0},
    "nesterov": {"lr": 1e-2, "momentum": 0.9},
    "adam": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "adamw": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 1e-2},
    "adamax": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "adagrad": {"lr": 5e-2, "eps": 1e-8},
    "adadelta": {"lr": 1.0, "rho": 0.9, "eps": 1e-6},
    "rmsprop": {"lr": 1e-3, "alpha": 0.99, "eps": 1e-8},
}

_ACCUMULATORS = {
    "sgd": ("buf",),
    "nesterov": ("buf",),
    "adam": ("m", "v"),
    "adamw": ("m", "v"),
    "adamax": ("m", "u"),
    "adagrad": ("sum",),
    "adadelta": ("v", "delta"),
    "rmsprop": ("v",),
}


class OptimizerError(ValueError):
    pass


class Optimizer:
    def __init__(self, kind: str, shape, **overrides):
        if kind not in KINDS:
            raise OptimizerError(f"unknown optimizer {kind!r}; expected one of {KINDS}")
        unknown = set(overrides) - set(DEFAULTS[kind])
        if unknown:
            raise OptimizerError(f"{kind} has no hyperparameter(s) {sorted(unknown)}")
        self.kind = kind
        self.shape = tuple(shape)
        self.hyper = {**DEFAULTS[kind], **{k: float(v) for k, v in overrides.items()}}
        if self.hyper["lr"] <= 0:
            raise OptimizerError("lr must be positive")
        self.t = 0
        self.skipped = 0
        self.state = {name: np.zeros(self.shape) for name in _ACCUMULATORS[kind]}

    def __repr__(self):
        return f"Optimizer({self.kind!r}, t={self.t}, hyper={self.hyper})"

    def step(self, params, grads) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64)
        g = np.asarray(grads, dtype=np.float64)
        if params.shape != self.shape or g.shape != self.shape:
            raise OptimizerError(f"shape mismatch: state {self.shape}, params {params.shape}, grads {g.shape}")
        if not np.all(np.isfinite(g)):
            self.skipped += 1
            return params.copy()
        self.t += 1
        h, s, t = self.hyper, self.state, self.t
        lr = h["lr"]
        kind = self.kind

        if kind == "sgd":
            if h["momentum"]:
                s["buf"] = h["momentum"] * s["buf"] + g
                return params - lr * s["buf"]
            return params - lr * g
        if kind == "nesterov":
            s["buf"] = h["momentum"] * s["buf"] + g
            return params - lr * (g + h["momentum"] * s["buf"])
        if kind in ("adam", "adamw"):
            if kind == "adamw":
                params = params - lr * h["weight_decay"] * params
            s["m"] = h["beta1"] * s["m"] + (1 - h["beta1"]) * g
            s["v"] = h["beta2"] * s["v"] + (1 - h["beta2"]) * g * g
            m_hat = s["m"] / (1 - h["beta1"] ** t)
            v_hat = s["v"] / (1 - h["beta2"] ** t)
            return params - lr * m_hat / (np.sqrt(v_hat) + h["eps"])
        if kind == "adamax":
            s["m"] = h["beta1"] * s["m"] + (1 - h["beta1"]) * g
            s["u"] = np.maximum(h["beta2"] * s["u"], np.abs(g))
            m_hat = s["m"] / (1 - h["beta1"] ** t)
            return params - lr * m_hat / (s["u"] + h["eps"])
        if kind == "adagrad":
            s["sum"] = s["sum"] + g * g
            return params - lr * g / (np.sqrt(s["sum"]) + h["eps"])
        if kind == "adadelta":
            s["v"] = h["rho"] * s["v"] + (1 - h["rho"]) * g * g
            delta = np.sqrt(s["delta"] + h["eps"]) / np.sqrt(s["v"] + h["eps"]) * g
            s["delta"] = h["rho"] * s["delta"] + (1 - h["rho"]) * delta * delta
            return params - lr * delta
        # rmsprop
        s["v"] = h["alpha"] * s["v"] + (1 - h["alpha"]) * g * g
        return params - lr * g / (np.sqrt(s["v"]) + h["eps"])


def new_optimizer(kind: str, param_shape, hyper_overrides: dict | None = None) -> Optimizer:
    return Optimizer(kind, param_shape, **(hyper_overrides or {}))
