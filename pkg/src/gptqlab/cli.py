"""Command-line experiment runner.

Configuration precedence, lowest to highest: built-in desk defaults,
``--config`` file, ``--paper-defaults``, ``--preset``, explicit flags.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import logging
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import yaml

from . import codec
from .calib import AUGMENTATIONS, KINDS as CALIB_KINDS, load_dataset, make_dataset
from .intsim import exhaustive_rounding_oracle, write_oracle_csv
from .mixedprec import write_allocation_csv
from .optim import KINDS as OPTIMIZERS
from .reconstruct import DOMAINS, GRANULARITIES, LOSSES, MASKS, GptqConfig, quantize_network
from .tensor import accuracy, load_network, save_network, train_toy

log = logging.getLogger("gptqlab")

REPORT_NAME = "report.csv"
FACTORS = ("loss", "optimizer", "mask", "bias_alpha", "eps_domain", "scheme", "calib_kind", "augmentation")
DEFAULT_SEEDS = (0, 1, 2)

DESK_DEFAULTS = {"iterations": 2000, "calib_size": 256, "batch_size": 32}
FULL_RUN_DEFAULTS = {"iterations": 10000, "calib_size": 1024, "batch_size": 32}
PRESETS = {
    "best-practice": {
        "loss": "l2",
        "mask": "none",
        "mask_fraction": 1.0,
        "augment": "none",
        "bias_alpha": 0.0,
        "optimizer": "adamax",
        "eps_domain": "real",
        "mixed_precision": True,
    }
}

# flag name -> GptqConfig field
FLAG_FIELDS = {
    "scheme": "scheme",
    "bits": "bits",
    "act_bits": "act_bits",
    "eps_domain": "eps_domain",
    "beta": "beta",
    "optimizer": "optimizer",
    "loss": "loss",
    "mask": "mask",
    "mask_fraction": "mask_fraction",
    "bias_alpha": "bias_alpha",
    "augment": "augment",
    "mixed_precision": "mixed_precision",
    "granularity": "granularity",
    "iters": "iterations",
    "batch": "batch_size",
    "lr": "lr",
    "calib_size": "calib_size",
}


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


def default_experiment() -> dict:
    gptq = GptqConfig(**DESK_DEFAULTS).to_dict()
    gptq.pop("seed")
    return {
        "model": None,
        "calib": {"kind": "train_split", "path": None, "shift": 0.5},
        "eval": {"kind": "test_split", "size": 512},
        "gptq": gptq,
        "seed": 0,
    }


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if k not in out:
            raise CliError(f"unknown config key {where + k!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise CliError(f"config key {where + k!r} must be a mapping")
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config_file(path) -> dict:
    """Read a YAML config, or the echoed header of a previous report."""
    text = Path(path).read_text()
    if text.startswith("#"):
        header = [ln[2:] for ln in text.splitlines() if ln.startswith("# ")]
        doc = yaml.safe_load("\n".join(header)) or {}
        if "config" not in doc:
            raise CliError(f"{path}: report header carries no config")
        return doc["config"]
    doc = yaml.safe_load(text) or {}
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config must be a mapping")
    return doc


def resolve_config(args) -> dict:
    cfg = default_experiment()
    if getattr(args, "config", None):
        cfg = _merge(cfg, load_config_file(args.config))
    if getattr(args, "paper_defaults", False):
        cfg["gptq"].update(FULL_RUN_DEFAULTS)
    if getattr(args, "preset", None):
        cfg["gptq"].update(PRESETS[args.preset])
    for flag, name in FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg["gptq"][name] = v
    if getattr(args, "model", None) is not None:
        cfg["model"] = str(args.model)
    calib = getattr(args, "calib", None)
    if calib is not None:
        if calib in CALIB_KINDS:
            cfg["calib"]["kind"], cfg["calib"]["path"] = calib, None
        else:
            cfg["calib"]["kind"], cfg["calib"]["path"] = None, str(calib)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    gptq_config(cfg)  # validate early
    return cfg


def gptq_config(cfg: dict) -> GptqConfig:
    d = dict(cfg["gptq"])
    if d.get("float_layout") is not None:
        d["float_layout"] = list(d["float_layout"])
    return GptqConfig.from_dict({**d, "seed": int(cfg["seed"])})


def _task(meta: dict) -> tuple[int, tuple[int, ...], int]:
    try:
        return int(meta["task_seed"]), tuple(meta["data_shape"]), int(meta["classes"])
    except KeyError as e:
        raise CliError(f"model metadata lacks {e}; train it with `train-toy` or pass a dataset path") from None


def calibration_inputs(cfg: dict, net) -> np.ndarray:
    c = cfg["calib"]
    size = int(cfg["gptq"]["calib_size"])
    if c.get("path"):
        ds = load_dataset(c["path"])
        if len(ds) < size:
            raise CliError(f"calibration set has {len(ds)} samples, {size} requested")
        return ds.inputs[:size]
    seed, shape, classes = _task(net.meta)
    return make_dataset(c["kind"], size, seed, shape, classes, c.get("shift", 0.5)).inputs


def eval_set(cfg: dict, net):
    seed, shape, classes = _task(net.meta)
    return make_dataset(cfg["eval"]["kind"], int(cfg["eval"]["size"]), seed, shape, classes)


# ---------------------------------------------------------------------------
# output handling
# ---------------------------------------------------------------------------


class StagedOutput:
    """Write into a sibling temp dir; move into place only on success."""

    def __init__(self, out):
        self.out = Path(out)
        if self.out.exists() and (not self.out.is_dir() or any(self.out.iterdir())):
            raise CliError(f"output {self.out} exists and is not an empty directory")

    def __enter__(self) -> Path:
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            if self.out.exists():
                self.out.rmdir()
            self.tmp.rename(self.out)
        else:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _header(doc: dict) -> str:
    text = yaml.safe_dump(doc, sort_keys=True, default_flow_style=False)
    return "".join(f"# {ln}\n" for ln in text.splitlines())


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header: dict, columns: list[str], rows) -> None:
    buf = io.StringIO()
    buf.write(_header(header))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> tuple[dict, list[dict]]:
    text = Path(path).read_text()
    lines = text.splitlines()
    header = yaml.safe_load("\n".join(ln[2:] for ln in lines if ln.startswith("# "))) or {}
    body = [ln for ln in lines if not ln.startswith("#")]
    return header, list(csv.DictReader(body))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _load_model(path):
    if path is None:
        raise CliError("no model given (--model)")
    if not (Path(path) / "manifest.json").is_file():
        raise CliError(f"model {path} not found")
    return load_network(path)


def run_quantize(cfg: dict, out) -> dict:
    """Quantize, then write model/, report.csv, traces/ and timing.csv under ``out``."""
    gcfg = gptq_config(cfg)
    net = _load_model(cfg["model"])
    X = calibration_inputs(cfg, net)
    with StagedOutput(out) as tmp:
        t0 = time.perf_counter()
        qnet, rep = quantize_network(net, X, gcfg)
        elapsed = time.perf_counter() - t0
        save_network(qnet, tmp / "model")
        summary = {"config": cfg, "units": len(rep.units)}
        if "task_seed" in net.meta:
            ev = eval_set(cfg, net)
            summary["accuracy_fp"] = accuracy(net, ev.inputs, ev.labels)
            summary["accuracy_quantized"] = accuracy(qnet, ev.inputs, ev.labels)
        summary["eps_saturated"] = rep.eps_saturated
        if rep.zero_channels:
            summary["zero_channels"] = {int(k): list(map(int, v)) for k, v in rep.zero_channels.items()}
        if rep.allocation is not None:
            summary["allocation_mean_bits"] = rep.allocation.mean
            summary["allocation_feasible"] = rep.allocation.feasible
            write_allocation_csv(rep.allocation, tmp / "allocation.csv")
        rows = [
            (u.index, "-".join(map(str, u.layers)), u.nearest_l2, u.hardened_l2, u.fallback, u.best_step, u.skipped_steps)
            for u in rep.units
        ]
        cols = ["unit", "layers", "nearest_l2", "hardened_l2", "fallback", "best_step", "skipped_steps"]
        write_csv(tmp / REPORT_NAME, summary, cols, rows)
        (tmp / "traces").mkdir()
        for u in rep.units:
            write_csv(tmp / "traces" / f"unit{u.index:03d}.csv", {"unit": u.index}, ["step", "train_loss", "val_loss"], u.trace)
        # wall-clock kept apart so reports stay byte-reproducible
        timing = [(u.index, f"{u.seconds:.3f}") for u in rep.units] + [("total", f"{elapsed:.3f}")]
        write_csv(tmp / "timing.csv", {}, ["unit", "seconds"], timing)
    return summary


def _parse_level(factor: str, level: str):
    if factor == "bias_alpha":
        return float(level)
    return level


def sweep_levels(factor: str) -> list[str]:
    return {
        "loss": list(LOSSES),
        "optimizer": list(OPTIMIZERS),
        "mask": list(MASKS),
        "bias_alpha": ["0", "0.33", "0.66", "1"],
        "eps_domain": list(DOMAINS),
        "scheme": list(codec.SCHEMES),
        "calib_kind": list(CALIB_KINDS),
        "augmentation": ["none", *AUGMENTATIONS],
    }[factor]


def apply_factor(cfg: dict, factor: str, level) -> dict:
    cfg = copy.deepcopy(cfg)
    if factor not in FACTORS:
        raise CliError(f"unknown sweep factor {factor!r}; valid factors: {', '.join(FACTORS)}")
    if factor == "calib_kind":
        cfg["calib"]["kind"], cfg["calib"]["path"] = level, None
    elif factor == "augmentation":
        cfg["gptq"]["augment"] = level
    else:
        cfg["gptq"][factor] = _parse_level(factor, level)
    gptq_config(cfg)
    return cfg


def run_sweep(base: dict, factor: str, levels, out, seeds=DEFAULT_SEEDS) -> list[dict]:
    if factor not in FACTORS:
        raise CliError(f"unknown sweep factor {factor!r}; valid factors: {', '.join(FACTORS)}")
    levels = list(levels) if levels else sweep_levels(factor)
    configs = [apply_factor(base, factor, lv) for lv in levels]
    _load_model(base["model"])
    rows = []
    with StagedOutput(out) as tmp:
        for lv, cfg in zip(levels, configs):
            accs = []
            for seed in seeds:
                run_cfg = {**cfg, "seed": int(seed)}
                summary = run_quantize(run_cfg, tmp / f"{factor}={lv}" / f"seed{seed}")
                accs.append(summary.get("accuracy_quantized", float("nan")))
            rows.append({"level": str(lv), "accuracies": accs})
        cols = ["level"] + [f"acc_seed{s}" for s in seeds] + ["acc_mean"]
        table = [(r["level"], *r["accuracies"], float(np.mean(r["accuracies"]))) for r in rows]
        write_csv(tmp / "sweep.csv", {"config": base, "factor": factor, "seeds": list(seeds)}, cols, table)
    return rows


def run_eval(model, dataset) -> float:
    net = _load_model(model)
    X = np.asarray(dataset.inputs, dtype=np.float64)
    if tuple(X.shape[1:]) != tuple(net.input_shape):
        raise CliError(f"dataset shape {X.shape[1:]} does not match model input {tuple(net.input_shape)}")
    if dataset.labels is None:
        raise CliError("dataset has no labels")
    return accuracy(net, X, dataset.labels)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _csv_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _add_quant_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="model directory")
    p.add_argument("--calib", help=f"calibration kind ({', '.join(CALIB_KINDS)}) or dataset directory")
    p.add_argument("--config", help="YAML config file or previous report.csv")
    p.add_argument("--scheme", choices=codec.SCHEMES)
    p.add_argument("--bits", type=int)
    p.add_argument("--act-bits", type=int)
    p.add_argument("--eps-domain", choices=DOMAINS)
    p.add_argument("--beta", type=float)
    p.add_argument("--optimizer", choices=OPTIMIZERS)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss", choices=LOSSES)
    p.add_argument("--mask", choices=MASKS)
    p.add_argument("--mask-fraction", type=float)
    p.add_argument("--bias-alpha", type=float)
    p.add_argument("--augment", choices=("none", *AUGMENTATIONS))
    p.add_argument("--mixed-precision", action="store_true", default=None)
    p.add_argument("--granularity", choices=GRANULARITIES)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--calib-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--paper-defaults", action="store_true", help="full-length run: 10000 iterations, 1024 samples, batch 32")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gptqlab", description="Learned-rounding post-training quantization.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="train a full-precision toy classifier")
    p.add_argument("--arch", choices=("cnn", "mlp"), default="cnn")
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--train-size", type=int, default=2048)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("quantize", help="quantize a model")
    _add_quant_flags(p)

    p = sub.add_parser("sweep", help="quantize once per level of one factor")
    _add_quant_flags(p)
    p.add_argument("--factor", required=True)
    p.add_argument("--levels", help="comma-separated levels (default: all)")
    p.add_argument("--seeds", default=",".join(map(str, DEFAULT_SEEDS)))

    p = sub.add_parser("eval", help="top-1 accuracy of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default="test_split", help="dataset kind or dataset directory")
    p.add_argument("--size", type=int, default=512)

    p = sub.add_parser("report", help="print a quantize or sweep report")
    p.add_argument("--out", required=True)

    p = sub.add_parser("oracle", help="exhaustive rounding search on a tiny dot product")
    p.add_argument("--weights", required=True, type=_csv_floats)
    p.add_argument("--inputs", required=True, type=_csv_floats)
    p.add_argument("--target", required=True, type=float)
    p.add_argument("--offsets", default="-1,0,1,2", type=lambda s: [int(v) for v in _csv_floats(s)])
    p.add_argument("--out", help="write the assignment as CSV")
    return parser


def _cmd_train_toy(args) -> int:
    net_out = Path(args.out)
    with StagedOutput(net_out) as tmp:
        probe = build_probe_shape(args.arch)
        ds = make_dataset("train_split", args.train_size, args.seed, probe, args.classes)
        net, acc = train_toy(args.arch, ds, args.epochs, seed=args.seed, lr=args.lr)
        test = make_dataset("test_split", 512, args.seed, probe, args.classes)
        net.meta.update(
            {"arch": args.arch, "task_seed": args.seed, "data_shape": list(probe), "classes": args.classes, "epochs": args.epochs}
        )
        net.meta["test_accuracy"] = accuracy(net, test.inputs, test.labels)
        save_network(net, tmp)
    print(f"train accuracy {acc:.4f}  test accuracy {net.meta['test_accuracy']:.4f}")
    return 0


def build_probe_shape(arch: str) -> tuple[int, ...]:
    return (1, 8, 8) if arch == "cnn" else (64,)


def _cmd_quantize(args) -> int:
    cfg = resolve_config(args)
    summary = run_quantize(cfg, args.out)
    if "accuracy_quantized" in summary:
        print(f"accuracy fp {summary['accuracy_fp']:.4f}  quantized {summary['accuracy_quantized']:.4f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    levels = [v for v in args.levels.split(",")] if args.levels else None
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_sweep(cfg, args.factor, levels, args.out, seeds)
    for r in rows:
        print(r["level"], " ".join(f"{a:.4f}" for a in r["accuracies"]))
    return 0


def _cmd_eval(args) -> int:
    net = _load_model(args.model)
    if args.data in CALIB_KINDS:
        seed, shape, classes = _task(net.meta)
        ds = make_dataset(args.data, args.size, seed, shape, classes)
    else:
        ds = load_dataset(args.data)
    print(f"{run_eval(args.model, ds):.6f}")
    return 0


def _cmd_report(args) -> int:
    out = Path(args.out)
    if (out / "sweep.csv").is_file():
        header, rows = read_csv(out / "sweep.csv")
        print(f"factor {header['factor']}  seeds {header['seeds']}")
        for r in rows:
            print(f"{r['level']:>16}  mean {float(r['acc_mean']):.4f}")
        return 0
    if not (out / REPORT_NAME).is_file():
        raise CliError(f"no report in {out}")
    header, rows = read_csv(out / REPORT_NAME)
    for key in ("accuracy_fp", "accuracy_quantized", "allocation_mean_bits"):
        if key in header:
            print(f"{key}: {header[key]}")
    for r in rows:
        flag = "  (nearest)" if r["fallback"] == "true" else ""
        print(f"unit {r['unit']:>3} layers {r['layers']:>8}  l2 {float(r['nearest_l2']):.6g} -> {float(r['hardened_l2']):.6g}{flag}")
    return 0


def _cmd_oracle(args) -> int:
    res = exhaustive_rounding_oracle(args.weights, args.inputs, args.target, args.offsets)
    print(f"weights {list(res.weights)}  value {res.value!r}  loss {res.loss!r}  offsets {list(res.offsets)}")
    if args.out:
        write_oracle_csv(res, args.weights, args.inputs, args.target, args.out)
    return 0


COMMANDS = {
    "train-toy": _cmd_train_toy,
    "quantize": _cmd_quantize,
    "sweep": _cmd_sweep,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "oracle": _cmd_oracle,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError, FloatingPointError) as e:
        print(f"gptqlab {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
