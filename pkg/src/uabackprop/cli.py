"""Command-line pipelines: gen-data, train, attribute, blur-test, anomaly-test, mitigate, report.

Every command resolves its settings as built-in defaults, then an optional
``--config`` INI file, then explicit flags, and writes the fully resolved
configuration to ``<out>/config.ini``. Re-running with only
``--config <out>/config.ini --out <elsewhere>`` reproduces the outputs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import evaluation as ev
from .attribution import METHODS, MethodConfig, attribute, save_map, write_pgm
from .attribution.mapio import MapFormatError
from .data import DatasetError, LabeledDataset, SyntheticSpec, gen_synthetic, load_dataset, load_idx, save_dataset
from .mitigation import accuracy, build_attention, nll, retrain_with_attention
from .nn import EnsemblePosterior, ModelFormatError, TrainConfig, load_model, reference_arch, save_model, train_ensemble
from .uq import KINDS

CSV_COLUMNS = ("id", "method", "kind", "MURR", "AUC-URR", "sigma", "IoU", "hit")


class CliError(Exception):
    """Failure reported as ``error: CODE: message`` with a nonzero exit status."""

    def __init__(self, code: str, message: str, status: int = 1):
        super().__init__(message)
        self.code = code
        self.status = status


@dataclass(frozen=True)
class Option:
    name: str
    section: str
    type: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple | None = None


def _opt_float(text: str) -> float | None:
    return None if str(text).strip().lower() in ("", "none", "auto") else float(text)


def _opt_str(text: str) -> str | None:
    return None if str(text).strip() in ("", "none") else str(text)


OPTIONS = {o.name: o for o in (
    Option("dataset", "data", _opt_str, None, "dataset file (.npz) or IDX pair 'images,labels'"),
    Option("test_dataset", "data", _opt_str, None, "held-out dataset for mitigate"),
    Option("n", "data", int, 400, "number of synthetic images"),
    Option("classes", "data", int, 4, "number of synthetic classes"),
    Option("size", "data", int, 16, "synthetic image side length"),
    Option("noise", "data", float, 0.05, "additive Gaussian noise level"),
    Option("occluder", "data", int, 0, "occluder side length (0 disables)"),
    Option("split", "data", str, "train", "split tag stored with the dataset"),
    Option("model", "model", _opt_str, None, "ensemble model file"),
    Option("members", "model", int, 5, "ensemble size"),
    Option("epochs", "model", int, 10, "training epochs"),
    Option("lr", "model", float, 0.05, "learning rate"),
    Option("momentum", "model", float, 0.9, "SGD momentum"),
    Option("batch_size", "model", int, 64, "minibatch size"),
    Option("dropout", "model", float, 0.0, "dropout rate after the hidden dense layer"),
    Option("width", "model", int, 8, "conv filters per layer"),
    Option("hidden", "model", int, 32, "hidden dense units"),
    Option("method", "attribution", str, "ua", "attribution method", METHODS),
    Option("kind", "attribution", str, "epistemic", "uncertainty kind", KINDS),
    Option("tau1", "attribution", _opt_float, None, "logit temperature (default by channel count)"),
    Option("tau2", "attribution", _opt_float, None, "pixel temperature (default by channel count)"),
    Option("smooth_k", "attribution", int, 50, "SmoothGrad sample count"),
    Option("smooth_sigma", "attribution", float, 0.1, "SmoothGrad noise level"),
    Option("ig_steps", "attribution", int, 100, "integration steps for IG and blur IG"),
    Option("blur_ig_max_sigma", "attribution", float, 20.0, "largest blur of the blur IG path"),
    Option("limit", "attribution", int, 0, "process only the first N images (0 = all)"),
    Option("budget_pct", "eval", float, 2.0, "blurring budget in percent of pixels"),
    Option("count", "eval", int, 200, "number of most uncertain images to evaluate"),
    Option("box_size", "eval", int, 5, "side length of the swapped anomaly patch"),
    Option("sigma_max", "eval", float, 20.0, "largest blur level searched"),
    Option("sigma_step", "eval", float, 0.2, "blur level search step"),
    Option("alpha", "mitigation", float, 0.2, "attention strength"),
    Option("placement", "mitigation", str, "latent", "where attention is applied", ("latent", "input")),
    Option("temperature", "mitigation", float, 1.0, "softmax temperature used to build attention"),
    Option("train_limit", "mitigation", int, 0, "use only the first N training images (0 = all)"),
    Option("seed", "run", int, 0, "random seed"),
    Option("jobs", "run", int, 1, "parallel workers"),
)}

COMMANDS: dict[str, tuple[str, ...]] = {
    "gen-data": ("n", "classes", "size", "noise", "occluder", "split", "seed"),
    "train": ("dataset", "members", "epochs", "lr", "momentum", "batch_size", "dropout", "width", "hidden",
              "seed", "jobs"),
    "attribute": ("model", "dataset", "method", "kind", "tau1", "tau2", "smooth_k", "smooth_sigma", "ig_steps",
                  "blur_ig_max_sigma", "limit", "seed", "jobs"),
    "blur-test": ("model", "dataset", "method", "kind", "tau1", "tau2", "smooth_k", "smooth_sigma", "ig_steps",
                  "blur_ig_max_sigma", "budget_pct", "count", "sigma_max", "sigma_step", "seed", "jobs"),
    "anomaly-test": ("model", "dataset", "method", "kind", "tau1", "tau2", "smooth_k", "smooth_sigma", "ig_steps",
                     "blur_ig_max_sigma", "count", "box_size", "seed", "jobs"),
    "mitigate": ("model", "dataset", "test_dataset", "kind", "tau1", "tau2", "alpha", "placement", "temperature",
                 "train_limit", "epochs", "lr", "momentum", "batch_size", "seed"),
    "report": (),
}


# -- configuration ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message, status=2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uabackprop", description="Uncertainty attribution for deep ensembles.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command, names in COMMANDS.items():
        p = sub.add_parser(command)
        if command == "report":
            p.add_argument("csvs", nargs="*", type=Path, help="result CSV files")
            p.add_argument("--out", type=Path, default=None, help="markdown file (stdout if omitted)")
            continue
        p.add_argument("--out", type=Path, required=True, help="output file (gen-data, train) or directory")
        p.add_argument("--config", type=Path, default=None, help="INI file; explicit flags override it")
        for name in names:
            o = OPTIONS[name]
            flag = "--" + name.replace("_", "-")
            p.add_argument(flag, dest=name, type=o.type, choices=o.choices, default=None, help=o.help)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    values = {name: OPTIONS[name].default for name in COMMANDS[command]}
    if args.config is not None:
        ini = configparser.ConfigParser()
        try:
            with open(args.config, encoding="utf-8") as fh:
                ini.read_file(fh)
        except OSError as exc:
            raise CliError("E_IO", f"cannot read config {args.config}: {exc.strerror}") from exc
        except configparser.Error as exc:
            raise CliError("E_CONFIG", f"{args.config}: {str(exc).splitlines()[0]}") from exc
        for name in values:
            o = OPTIONS[name]
            if ini.has_option(o.section, name):
                raw = ini.get(o.section, name)
                try:
                    values[name] = o.type(raw)
                except ValueError as exc:
                    raise CliError("E_CONFIG", f"{o.section}.{name}: {exc}") from exc
                if o.choices and values[name] not in o.choices:
                    raise CliError("E_CONFIG", f"{o.section}.{name}: {raw!r} not in {o.choices}")
    for name in values:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    for name in ("dataset", "test_dataset", "model"):
        if values.get(name):
            values[name] = _absolute_dataset_ref(values[name])
    return values


def _absolute_dataset_ref(ref: str) -> str:
    return ",".join(str(Path(p).resolve()) for p in ref.split(","))


def dump_config(command: str, values: dict[str, Any]) -> str:
    ini = configparser.ConfigParser()
    ini["run"] = {"command": command}
    for name, value in values.items():
        section = OPTIONS[name].section
        if not ini.has_section(section):
            ini.add_section(section)
        ini.set(section, name, "none" if value is None else repr(value) if isinstance(value, float) else str(value))
    buf = io.StringIO()
    ini.write(buf)
    return buf.getvalue()


# -- io helpers -------------------------------------------------------------------


def atomic_write(path: Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in CSV_COLUMNS])
    atomic_write(path, buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        return []
    reader = csv.DictReader(io.StringIO(text))
    missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise CliError("E_FORMAT", f"{path}: missing columns {sorted(missing)}")
    return list(reader)


def write_json(path: Path, obj: dict) -> None:
    atomic_write(path, json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n")


def load_data(ref: str | None, what: str = "dataset") -> LabeledDataset:
    if not ref:
        raise CliError("E_USAGE", f"--{what.replace('_', '-')} is required", status=2)
    parts = ref.split(",")
    try:
        if len(parts) == 2:
            return load_idx(parts[0], parts[1])
        return load_dataset(ref)
    except FileNotFoundError as exc:
        raise CliError("E_IO", f"{what} not found: {exc.filename}") from exc
    except (DatasetError, ValueError, KeyError) as exc:
        raise CliError("E_DATA", f"{what} {ref}: {exc}") from exc


def load_ensemble(ref: str | None) -> EnsemblePosterior:
    if not ref:
        raise CliError("E_USAGE", "--model is required", status=2)
    try:
        obj = load_model(ref)
    except FileNotFoundError as exc:
        raise CliError("E_IO", f"model not found: {ref}") from exc
    except ModelFormatError as exc:
        raise CliError("E_FORMAT", str(exc)) from exc
    if not isinstance(obj, EnsemblePosterior):
        obj = EnsemblePosterior([obj], [obj.seed if obj.seed is not None else 0])
    return obj


def _check_compatible(ens: EnsemblePosterior, ds: LabeledDataset) -> None:
    if tuple(ens.input_shape) != ds.image_shape:
        raise CliError("E_DATA", f"dataset images {ds.image_shape} do not match model input {tuple(ens.input_shape)}")
    if ds.labels.max() >= ens.num_classes:
        raise CliError("E_DATA", f"dataset has labels >= model class count {ens.num_classes}")


def method_config(v: dict, channels: int) -> MethodConfig:
    overrides = {k: v[k] for k in ("tau1", "tau2") if v.get(k) is not None}
    return MethodConfig.for_channels(
        channels, smooth_k=v["smooth_k"], smooth_sigma=v["smooth_sigma"], ig_steps=v["ig_steps"],
        blur_ig_steps=v["ig_steps"], blur_ig_max_sigma=v["blur_ig_max_sigma"], seed=v["seed"], **overrides,
    )


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _median(xs: Sequence[float]) -> float | None:
    return float(np.median(xs)) if len(xs) else None


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(v: dict, out: Path) -> dict:
    spec = SyntheticSpec(n=v["n"], classes=v["classes"], size=v["size"], noise=v["noise"],
                         occluder=v["occluder"], split=v["split"])
    ds = gen_synthetic(spec, v["seed"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    return {"images": len(ds), "classes": ds.num_classes}


def cmd_train(v: dict, out: Path) -> dict:
    ds = load_data(v["dataset"])
    arch = reference_arch(ds.image_shape, ds.num_classes, width=v["width"], hidden=v["hidden"])
    cfg = TrainConfig(lr=v["lr"], momentum=v["momentum"], batch_size=v["batch_size"], epochs=v["epochs"],
                      seed=v["seed"], dropout=v["dropout"])
    ens = train_ensemble(arch, ds.images, ds.labels, cfg, v["members"], jobs=v["jobs"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(ens, out)
    acc = float(np.mean(ens.predict_proba(ds.images).mean(axis=0).argmax(axis=1) == ds.labels))
    return {"members": ens.size, "train_accuracy": acc}


def cmd_attribute(v: dict, out: Path) -> dict:
    ens = load_ensemble(v["model"])
    ds = load_data(v["dataset"])
    _check_compatible(ens, ds)
    if ens.size == 1 and v["kind"] == "epistemic":
        warn("single-member ensemble has zero epistemic uncertainty; maps are all zero")
    cfg = method_config(v, ds.image_shape[0])
    ids = list(range(len(ds) if v["limit"] <= 0 else min(v["limit"], len(ds))))
    maps = _pmap(lambda k: attribute(v["method"], ens, ds.images[k], v["kind"], cfg, seed=v["seed"] + k), ids, v["jobs"])
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    for k, amap in zip(ids, maps):
        stem = out / f"{k:05d}_{v['method']}_{v['kind']}"
        save_map(amap, stem.with_suffix(".uamap"), config_hash=digest)
        write_pgm(amap.values, stem.with_suffix(".pgm"))
    return {"maps": len(maps)}


def _blur_row(ens, ds, k, v, cfg, budget, sigmas) -> dict | None:
    x = ds.images[k]
    amap = attribute(v["method"], ens, x, v["kind"], cfg, seed=v["seed"] + int(k))
    try:
        curve = ev.blur_test(ens, amap.values, x, budget, v["kind"], sigmas=sigmas)
    except ev.NotUncertainError:
        return None
    s = ev.summarize(curve.urr)
    return {"id": int(k), "method": v["method"], "kind": v["kind"], "MURR": s.murr, "AUC-URR": s.auc_urr,
            "sigma": curve.sigma}


def cmd_blur_test(v: dict, out: Path) -> dict:
    ens = load_ensemble(v["model"])
    ds = load_data(v["dataset"])
    _check_compatible(ens, ds)
    if not 0 < v["budget_pct"] <= 100:
        raise CliError("E_VALUE", f"budget-pct must lie in (0, 100], got {v['budget_pct']}")
    cfg = method_config(v, ds.image_shape[0])
    h, w = ds.image_shape[1:]
    budget = ev.budget_pixels(v["budget_pct"] / 100.0, h, w)
    sigmas = ev.sigma_grid(0.0, v["sigma_max"], v["sigma_step"])
    ids = ev.top_uncertain(ens, ds.images, min(v["count"], len(ds)), v["kind"])
    rows = _pmap(lambda k: _blur_row(ens, ds, k, v, cfg, budget, sigmas), list(ids), v["jobs"])
    skipped = sum(r is None for r in rows)
    rows = [r for r in rows if r is not None]
    if skipped:
        warn(f"{skipped} image(s) carry no {v['kind']} uncertainty and were skipped")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "results.csv", rows)
    summary = {"command": "blur-test", "method": v["method"], "kind": v["kind"], "budget_pixels": budget,
               "images": len(rows), "skipped": skipped,
               "median_MURR": _median([r["MURR"] for r in rows]),
               "median_AUC-URR": _median([r["AUC-URR"] for r in rows])}
    write_json(out / "summary.json", summary)
    return summary


def cmd_anomaly_test(v: dict, out: Path) -> dict:
    ens = load_ensemble(v["model"])
    ds = load_data(v["dataset"])
    _check_compatible(ens, ds)
    cfg = method_config(v, ds.image_shape[0])
    h, w = ds.image_shape[1:]
    if not 1 <= v["box_size"] <= min(h, w):
        raise CliError("E_VALUE", f"box-size {v['box_size']} does not fit {h}x{w} images")
    if len(np.unique(ds.labels)) < 2:
        raise CliError("E_DATA", "anomaly test needs at least two classes")
    images, boxes = ev.patch_swap_set(ds.images, ds.labels, v["box_size"], v["seed"])
    gain = ev.uncertainty_batch(ens, images, v["kind"]) - ev.uncertainty_batch(ens, ds.images, v["kind"])
    ids = np.argsort(-gain, kind="stable")[: min(v["count"], len(ds))]
    size = (v["box_size"], v["box_size"])

    def one(k):
        amap = attribute(v["method"], ens, images[k], v["kind"], cfg, seed=v["seed"] + int(k))
        pred = ev.detect_box(amap.values, size)
        res = ev.AnomalyResult(boxes[k], pred, ev.iou(boxes[k], pred))
        return {"id": int(k), "method": v["method"], "kind": v["kind"], "IoU": res.iou, "hit": res.hit}, res

    pairs = _pmap(one, list(ids), v["jobs"])
    rows = [p[0] for p in pairs]
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "results.csv", rows)
    summary = {"command": "anomaly-test", "method": v["method"], "kind": v["kind"], "images": len(rows),
               "box_size": v["box_size"], "ADA": ev.ada([p[1] for p in pairs]) if pairs else None,
               "median_IoU": _median([r["IoU"] for r in rows])}
    write_json(out / "summary.json", summary)
    return summary


def attention_maps(ens: EnsemblePosterior, images: np.ndarray, v: dict) -> np.ndarray:
    cfg = MethodConfig.for_channels(images.shape[1], **{k: v[k] for k in ("tau1", "tau2") if v.get(k) is not None})
    return np.stack([build_attention(attribute("ua", ens, x, v["kind"], cfg).values,
                                     temperature=v["temperature"]).values for x in images])


def cmd_mitigate(v: dict, out: Path) -> dict:
    ens = load_ensemble(v["model"])
    tr = load_data(v["dataset"])
    te = load_data(v["test_dataset"], "test_dataset")
    _check_compatible(ens, tr)
    _check_compatible(ens, te)
    if v["alpha"] < 0:
        raise CliError("E_VALUE", f"alpha must be >= 0, got {v['alpha']}")
    if v["train_limit"] > 0:
        tr = tr.subset(np.arange(min(v["train_limit"], len(tr))))
    att_tr, att_te = attention_maps(ens, tr.images, v), attention_maps(ens, te.images, v)
    cfg = TrainConfig(lr=v["lr"], momentum=v["momentum"], batch_size=v["batch_size"], epochs=v["epochs"], seed=v["seed"])
    rows, nets = [], {}
    for label, alpha in (("no-attention", 0.0), ("attention", v["alpha"])):
        net = retrain_with_attention(ens.arch, tr.images, tr.labels, att_tr, alpha, cfg, v["placement"])
        nets[label] = net
        rows.append({"setting": label, "alpha": alpha,
                     "accuracy": accuracy(net, te.images, te.labels, att_te, alpha, v["placement"]),
                     "nll": nll(net, te.images, te.labels, att_te, alpha, v["placement"])})
    out.mkdir(parents=True, exist_ok=True)
    save_model(nets["attention"], out / "mitigated.uabp")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("setting", "alpha", "accuracy", "nll"))
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in ("setting", "alpha", "accuracy", "nll")])
    atomic_write(out / "metrics.csv", buf.getvalue())
    summary = {"command": "mitigate", "placement": v["placement"], "train_images": len(tr),
               "before": rows[0], "after": rows[1]}
    write_json(out / "summary.json", summary)
    return summary


def render_report(paths: Sequence[Path]) -> str:
    """Markdown table per (test, method, kind): medians of MURR/AUC-URR and ADA."""
    groups: dict[tuple[str, str, str], list[dict]] = {}
    for path in paths:
        for row in read_csv(path):
            test = "blur" if row["MURR"] != "" else "anomaly"
            groups.setdefault((test, row["method"], row["kind"]), []).append(row)
    lines = ["| test | method | kind | images | median MURR | median AUC-URR | ADA |",
             "|---|---|---|---|---|---|---|"]

    def med(rows, col):
        vals = [float(r[col]) for r in rows if r[col] != ""]
        return f"{np.median(vals):.4f}" if vals else ""

    for (test, method, kind), rows in sorted(groups.items()):
        hits = [r["hit"] == "1" for r in rows if r["hit"] != ""]
        ada_txt = f"{np.mean(hits):.4f}" if hits else ""
        lines.append(f"| {test} | {method} | {kind} | {len(rows)} | {med(rows, 'MURR')} | "
                     f"{med(rows, 'AUC-URR')} | {ada_txt} |")
    return "\n".join(lines) + "\n"


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attribute": cmd_attribute,
    "blur-test": cmd_blur_test,
    "anomaly-test": cmd_anomaly_test,
    "mitigate": cmd_mitigate,
}


def _config_path(command: str, out: Path) -> Path:
    """Directory outputs get ``config.ini`` inside; file outputs get ``<file>.ini`` beside them."""
    return out.with_name(out.name + ".ini") if command in ("gen-data", "train") else out / "config.ini"


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        missing = [p for p in args.csvs if not p.exists()]
        if missing:
            raise CliError("E_IO", f"CSV not found: {missing[0]}")
        text = render_report(args.csvs)
        if args.out is None:
            sys.stdout.write(text)
        else:
            atomic_write(args.out, text)
        return 0
    values = resolve(args.command, args)
    for name in ("jobs",):
        if name in values and values[name] < 1:
            raise CliError("E_VALUE", f"--{name} must be >= 1")
    summary = HANDLERS[args.command](values, args.out)
    atomic_write(_config_path(args.command, args.out), dump_config(args.command, values))
    print(json.dumps(summary, sort_keys=True))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.status
    except (ModelFormatError, MapFormatError) as exc:
        print(f"error: E_FORMAT: {exc}", file=sys.stderr)
    except DatasetError as exc:
        print(f"error: E_DATA: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"error: E_IO: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
    except ValueError as exc:
        print(f"error: E_VALUE: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        print(f"error: E_INTERNAL: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
