"""Command-line entry point: ``arrul <command> [options]``.

Commands: gen-data, train, predict, evaluate, fpt and replay. Every
command writes a JSON run manifest next to its outputs; ``replay`` reruns
one. Option values resolve as flag > ``--config`` file > default.
"""

from __future__ import annotations

import os

_THREADS = os.environ.get("AR_RUL_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import platform  # noqa: E402
import sys  # noqa: E402
import tempfile  # noqa: E402
import time  # noqa: E402
from dataclasses import fields  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Any, Callable, Sequence  # noqa: E402

import matplotlib  # noqa: E402
import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .armodel import load_model  # noqa: E402
from .config import format_config, parse_value, read_config  # noqa: E402
from .datapipe import (BearingRecord, Fpt3SigmaConfig, canonical_bearing_id, detect_fpt,  # noqa: E402
                       load_native_bearing, load_phm2012_bearing, lookup_fpt_seconds, make_labels,
                       normalize, pad_and_window, prepare, write_native_bearing)
from .errors import ConfigError, ContractViolation, FormatError, IngestionError, StateError  # noqa: E402
from .evaluator import ROLLOUT_MODES, aggregate, evaluate, rollout, write_prediction_csv  # noqa: E402
from .plotting import plot_prediction  # noqa: E402
from .synthgen import Spike, SynthSpec, generate_suite  # noqa: E402
from .trainer import ABLATIONS, TrainConfig, train  # noqa: E402

log = logging.getLogger("arrul")

MANIFEST = "manifest.json"
TRAIN_CONFIG_FILE = "train.cfg"
HANDLED = (ConfigError, ContractViolation, FormatError, IngestionError, StateError, OSError, KeyError)


def thread_cap() -> int:
    try:
        value = int(_THREADS)
    except ValueError:
        raise ConfigError(f"AR_RUL_THREADS must be a positive integer, got {_THREADS!r}") from None
    if value < 1:
        raise ConfigError(f"AR_RUL_THREADS must be a positive integer, got {value}")
    return value


# -- option resolution --------------------------------------------------------

def resolve(defaults: dict[str, Any], config: dict[str, Any], flags: dict[str, Any]) -> dict[str, Any]:
    """Merge option sources with precedence flag > config file > default."""
    unknown = sorted(set(config) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    out = dict(defaults)
    out.update(config)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _flag_values(args: argparse.Namespace, names: Sequence[str]) -> dict[str, Any]:
    return {n: getattr(args, n, None) for n in names}


def _load_config(args: argparse.Namespace) -> dict[str, Any]:
    return read_config(args.config) if args.config else {}


GEN_DEFAULTS: dict[str, Any] = {
    "count": 3, "seed": 0, "acquisitions": 300, "points": 256, "amplitude": 1.0,
    "onset_fraction": 0.5, "growth_rate": 0.02, "spike": None, "prefix": "syn",
}

TRAIN_DEFAULTS: dict[str, Any] = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}
TRAIN_DEFAULTS["points"] = None  # taken from the data unless set


# -- manifests ------------------------------------------------------------------

def versions() -> dict[str, str]:
    return {"arrul": __version__, "numpy": np.__version__, "matplotlib": matplotlib.__version__,
            "python": platform.python_version()}


def write_json_atomic(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_manifest(out: Path, command: str, argv: list[str], resolved: dict[str, Any],
                   inputs: list[str], outputs: list[Path], started: float) -> Path:
    payload = {
        "command": command,
        "argv": argv,
        "config": resolved,
        "seed": resolved.get("seed"),
        "inputs": inputs,
        "outputs": sorted(str(p.relative_to(out)) if p.is_relative_to(out) else str(p) for p in outputs),
        "versions": versions(),
        "threads": thread_cap(),
        "wall_time_s": round(time.perf_counter() - started, 6),
    }
    return write_json_atomic(out / MANIFEST, payload)


# -- bearing loading --------------------------------------------------------------

def _expand(paths: Sequence[str]) -> list[Path]:
    out: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir() and not any(p.glob("acc_*.csv")):
            found = sorted(p.glob("*.csv"))
            if not found:
                found = sorted(d for d in p.iterdir() if d.is_dir() and any(d.glob("acc_*.csv")))
            if not found:
                raise IngestionError(f"{p}: no bearing files found")
            out.extend(found)
        elif p.exists():
            out.append(p)
        else:
            raise IngestionError(f"{p}: no such file or directory")
    return out


def load_bearing(path: Path, fpt_source: str = "auto") -> BearingRecord:
    """Load a native CSV or a PHM2012 directory and make sure it has labels.

    ``fpt_source``: ``auto`` keeps sidecar labels, else uses the FPT table
    for known PHM2012 ids, else the 3-sigma detector; ``table`` and
    ``detect`` force one of the latter two.
    """
    rec = load_phm2012_bearing(path) if path.is_dir() else load_native_bearing(path)
    if fpt_source == "auto" and rec.labels is not None:
        return rec
    if fpt_source in ("auto", "table"):
        try:
            seconds = lookup_fpt_seconds(rec.id)
        except KeyError:
            if fpt_source == "table":
                raise
        else:
            return make_labels(rec, min(int(round(seconds / rec.sample_period_s)), len(rec) - 1))
    return make_labels(rec, detect_fpt(rec))


def load_bearings(paths: Sequence[str], fpt_source: str = "auto") -> tuple[list[BearingRecord], list[str]]:
    files = _expand(paths)
    return [load_bearing(p, fpt_source) for p in files], [str(p) for p in files]


def _stem(path: str) -> str:
    p = Path(path)
    return p.name if p.is_dir() else p.stem


def _training_n(model_dir: Path) -> int:
    cfg = model_dir / TRAIN_CONFIG_FILE
    if cfg.is_file():
        return int(read_config(cfg).get("n", 1))
    return 1


def _check_model_dir(model_dir: Path) -> None:
    if not (model_dir / "weights.arrul").is_file():
        raise IngestionError(f"{model_dir}: no checkpoint (weights.arrul) found")


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace, out: Path) -> tuple[dict, list[str], list[Path]]:
    opts = resolve(GEN_DEFAULTS, _load_config(args), _flag_values(args, GEN_DEFAULTS))
    spike = None
    if opts["spike"]:
        pos, mult, dur = (s.strip() for s in str(opts["spike"]).split(","))
        spike = Spike(float(pos), float(mult), int(dur))
    base = SynthSpec(acquisitions=int(opts["acquisitions"]), points=int(opts["points"]),
                     amplitude=float(opts["amplitude"]), onset_fraction=float(opts["onset_fraction"]),
                     growth_rate=float(opts["growth_rate"]), spike=spike, id=str(opts["prefix"]))
    records = generate_suite(int(opts["count"]), base, seed=int(opts["seed"]))
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records:
        p = write_native_bearing(rec, out / f"{rec.id}.csv")
        written += [p, p.with_suffix(".meta")]
        print(f"{rec.id}: {len(rec)} acquisitions, onset {rec.fpt_index}")
    return opts, [], written


def train_config_from(opts: dict[str, Any]) -> TrainConfig:
    values = {k: v for k, v in opts.items() if k in TRAIN_DEFAULTS}
    if isinstance(values.get("iters_schedule"), str):
        values["iters_schedule"] = parse_value(values["iters_schedule"])
    return TrainConfig.from_mapping(values)


def cmd_train(args: argparse.Namespace, out: Path) -> tuple[dict, list[str], list[Path]]:
    opts = resolve(TRAIN_DEFAULTS, _load_config(args), _flag_values(args, TRAIN_DEFAULTS))
    records, inputs = load_bearings(args.data, args.fpt_source)
    if opts["points"] is None:
        opts["points"] = records[0].points
    cfg = train_config_from(opts)
    datasets = prepare(records, cfg.k, cfg.n)
    model, report = train(datasets, cfg, checkpoint_dir=out)
    written = [out / f"epoch_{e + 1}.arrul" for e in range(cfg.epochs)]
    written += [out / "weights.arrul", out / "model.txt"]
    cfg_path = out / TRAIN_CONFIG_FILE
    cfg_path.write_text(format_config(cfg.to_dict()))
    payload = {"epoch_loss": report.epoch_loss, "backward_passes": report.backward_passes,
               "shifts": report.shifts, "checkpoint": "weights.arrul",
               "bearings": [r.id for r in records]}
    written += [cfg_path, write_json_atomic(out / "train_report.json", payload)]
    print(f"trained on {len(records)} bearing(s); epoch loss {', '.join(f'{v:.6f}' for v in report.epoch_loss)}")
    print(f"wall time {report.wall_time_s:.1f} s; checkpoint {out / 'weights.arrul'}")
    return cfg.to_dict(), inputs, written


def _windowed(model_dir: Path, paths: Sequence[str], fpt_source: str, need_labels: bool):
    _check_model_dir(model_dir)
    model = load_model(model_dir)
    n = _training_n(model_dir)
    files = _expand(paths)
    out = []
    for p in files:
        rec = load_phm2012_bearing(p) if p.is_dir() else load_native_bearing(p)
        if need_labels or fpt_source != "auto":
            rec = load_bearing(p, fpt_source)
        if rec.points != model.config.points:
            raise ContractViolation(
                f"{p}: S={rec.points} but the checkpoint expects S={model.config.points}")
        out.append((p, pad_and_window(normalize(rec), model.config.k, n)))
    return model, out


def cmd_predict(args: argparse.Namespace, out: Path) -> tuple[dict, list[str], list[Path]]:
    opts = {"model": args.model, "init_mode": args.init_mode, "ablation": args.ablation, "clamp": args.clamp}
    model, items = _windowed(Path(args.model), args.bearing, "auto", need_labels=False)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for path, wb in items:
        curve = rollout(model, wb, init_mode=args.init_mode, ablation=args.ablation, clamp=args.clamp)
        stem = _stem(str(path))
        written.append(write_prediction_csv(curve, out / f"{stem}_pred.csv"))
        written.append(plot_prediction(curve, out / f"{stem}_pred.svg"))
        print(f"{wb.id}: {len(curve)} predictions -> {written[-2]}")
    return opts, [str(p) for p, _ in items], written


def cmd_evaluate(args: argparse.Namespace, out: Path) -> tuple[dict, list[str], list[Path]]:
    opts = {"model": args.model, "init_mode": args.init_mode, "ablation": args.ablation,
            "fpt_source": args.fpt_source}
    model, items = _windowed(Path(args.model), args.bearing, args.fpt_source, need_labels=True)
    out.mkdir(parents=True, exist_ok=True)
    written, reports, per = [], [], {}
    for path, wb in items:
        rep, curve = evaluate(model, wb, init_mode=args.init_mode, ablation=args.ablation)
        reports.append(rep)
        per[wb.id] = rep.to_dict()
        written.append(write_json_atomic(out / f"{wb.id}_metrics.json", rep.to_dict()))
        written.append(write_prediction_csv(curve, out / f"{wb.id}_pred.csv"))
        print(f"{wb.id}: rmse {rep.rmse:.4f}  mae {rep.mae:.4f}  score {rep.score:.4f}  n {rep.n}")
    summary = {"ablation": args.ablation, "aggregate": aggregate(reports), "bearings": per}
    written.append(write_json_atomic(out / "summary.json", summary))
    agg = summary["aggregate"]
    print(f"mean: rmse {agg['rmse']:.4f}  mae {agg['mae']:.4f}  score {agg['score']:.4f}")
    return opts, [str(p) for p, _ in items], written


def cmd_fpt(args: argparse.Namespace, out: Path | None) -> tuple[dict, list[str], list[Path]]:
    opts = {"baseline": args.baseline, "consecutive": args.consecutive, "table": args.table}
    lines = []
    for bid in args.table or []:
        seconds = lookup_fpt_seconds(bid)
        lines.append(f"{canonical_bearing_id(bid)},{seconds:g}")
        print(f"{canonical_bearing_id(bid)}: {seconds:g} s")
    inputs = []
    if args.bearing:
        files = _expand(args.bearing)
        cfg = Fpt3SigmaConfig(args.baseline, args.consecutive)
        for p in files:
            rec = load_phm2012_bearing(p) if p.is_dir() else load_native_bearing(p)
            idx = detect_fpt(rec, cfg)
            lines.append(f"{rec.id},{idx}")
            inputs.append(str(p))
            print(f"{rec.id}: FPT index {idx} ({idx * rec.sample_period_s:g} s)")
    if not lines:
        raise ConfigError("fpt needs --bearing and/or --table")
    written = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "fpt.csv"
        path.write_text("bearing_id,fpt\n" + "\n".join(lines) + "\n")
        written.append(path)
    return opts, inputs, written


def cmd_replay(args: argparse.Namespace, out: Path | None) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest["argv"])
    if out is not None:
        if "--out" in argv:
            argv[argv.index("--out") + 1] = str(out)
        else:
            argv += ["--out", str(out)]
    return main(argv)


COMMANDS: dict[str, Callable] = {
    "gen-data": cmd_gen_data, "train": cmd_train, "predict": cmd_predict,
    "evaluate": cmd_evaluate, "fpt": cmd_fpt,
}


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value options file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="arrul", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"arrul {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic bearings")
    g.add_argument("--count", type=int)
    g.add_argument("--acquisitions", type=int)
    g.add_argument("--points", type=int)
    g.add_argument("--amplitude", type=float)
    g.add_argument("--onset-fraction", type=float)
    g.add_argument("--growth-rate", type=float)
    g.add_argument("--spike", metavar="POS,MULT,DUR", help="transient burst added to every bearing")
    g.add_argument("--prefix", help="bearing id prefix")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", nargs="+", required=True, help="native CSVs, directories of them, or PHM2012 dirs")
    t.add_argument("--fpt-source", choices=("auto", "table", "detect"), default="auto")
    for f in fields(TrainConfig):
        if f.name == "seed":
            continue
        kind = {"int": int, "float": float}.get(str(f.type), str)
        if f.name == "iters_schedule":
            t.add_argument("--iters-schedule", help="e.g. [2,2,2,2,2,1,2,1,1]")
        elif f.name == "ablation":
            t.add_argument("--ablation", choices=ABLATIONS)
        elif f.name == "init_mode":
            t.add_argument("--init-mode", choices=("teacher", "ones"))
        else:
            t.add_argument("--" + f.name.replace("_", "-"), type=kind)

    for name, help_text in (("predict", "roll out a model and plot HI curves"),
                            ("evaluate", "score rollouts against labels")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--model", required=True, help="training output directory")
        p.add_argument("--bearing", nargs="+", required=True)
        p.add_argument("--init-mode", choices=ROLLOUT_MODES, default="carryover")
        p.add_argument("--ablation", choices=ABLATIONS, default="none")
        if name == "predict":
            p.add_argument("--clamp", action="store_true", help="clip reported HI to [0, 1]")
        else:
            p.add_argument("--fpt-source", choices=("auto", "table", "detect"), default="auto")

    f = sub.add_parser("fpt", parents=[common], help="detect or look up first prediction times")
    f.add_argument("--bearing", nargs="+")
    f.add_argument("--table", nargs="+", metavar="ID", help="tabulated PHM2012 values, e.g. B1-3")
    f.add_argument("--baseline", type=int, default=100)
    f.add_argument("--consecutive", type=int, default=2)

    r = sub.add_parser("replay", parents=[common], help="rerun the command recorded in a manifest")
    r.add_argument("manifest")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out) if args.out else None
    try:
        thread_cap()
        if args.command == "replay":
            return cmd_replay(args, out)
        if out is None:
            if args.command != "fpt":
                out = Path(".")
        started = time.perf_counter()
        opts, inputs, written = COMMANDS[args.command](args, out)
        if out is not None:
            write_manifest(out, args.command, argv, opts, inputs, written, started)
    except HANDLED as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"arrul {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"arrul {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
