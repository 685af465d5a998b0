"""``tdnnq`` command line: train a toy model, quantize, evaluate, compare, and run QAT.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Set ``TDNNQ_LOG`` to a
logging level name (``DEBUG``, ``INFO``, ...) to change verbosity; the default
is ``WARNING``.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import re
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model_io, ptq, qat
from .lowrank import FACTORIZED_TARGET_RATIO, factorize_model
from .qat import QatSchedule, QatState, ToyConfig, TrainCheckpoint
from .report import MetricsReport, comparison_report, dumps, float_weight_bytes, validate_report, write_report
from .tdnn import TdnnModel, build_plans, forward_float, forward_quantized

log = logging.getLogger("tdnnq")

QAT_TARGETS = {"full-requant": ("asymmetric", True), "full-custom": ("symmetric", False)}
SIDECAR_FORMAT = "tdnnq-qat-state"


class UsageError(Exception):
    """Bad arguments or configuration; exits with status 2."""


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class QatOptions:
    epochs: int = 1
    lr: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    bits: int = 8
    target_scheme: str = "full-requant"
    schedule: str = "full-epoch"
    activate_after_fraction: float = 0.9
    observer: str = "ema"
    observer_momentum: float = 0.99

    def make_schedule(self) -> QatSchedule:
        return QatSchedule(
            self.schedule.replace("-", "_"), self.activate_after_fraction, self.observer_momentum, self.observer
        )


def _option_lines(text: str) -> dict[tuple[str, str], int]:
    lines, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"\s*([^#;\s=:][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            lines[(section, m.group(1).strip().lower())] = n
    return lines


def _convert(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw.strip()


def _section(cp, lines, path, name, cls):
    if not cp.has_section(name):
        return cls()
    fields = {f.name: f.default for f in dataclasses.fields(cls)}
    kw = {}
    for key, raw in cp.items(name):
        where = f"{path}:{lines.get((name, key), '?')}"
        if key not in fields:
            raise UsageError(f"{where}: unknown key {key!r} in [{name}]; expected one of {sorted(fields)}")
        try:
            kw[key] = _convert(raw, fields[key])
        except ValueError as e:
            raise UsageError(f"{where}: bad value for {key!r}: {e}") from None
    try:
        out = cls(**kw)
        if isinstance(out, QatOptions):
            out.make_schedule()
            if out.target_scheme not in QAT_TARGETS:
                raise ValueError(f"target_scheme must be one of {sorted(QAT_TARGETS)}")
        return out
    except (TypeError, ValueError) as e:
        raise UsageError(f"{path}: invalid [{name}] section: {e}") from None


def load_config(path) -> tuple[ToyConfig, QatOptions]:
    """INI file with optional ``[toy]`` and ``[qat]`` sections; errors carry ``file:line``."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    text = path.read_text()
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=str(path))
    except configparser.MissingSectionHeaderError as e:
        raise UsageError(f"{path}:{e.lineno}: option before any [section] header") from None
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise UsageError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from None
    except configparser.Error as e:
        where = f"{path}:{e.lineno}" if getattr(e, "lineno", None) else str(path)
        raise UsageError(f"{where}: {e.message.splitlines()[0]}") from None
    for name in cp.sections():
        if name not in ("toy", "qat"):
            raise UsageError(f"{path}: unknown section [{name}]; expected [toy] or [qat]")
    lines = _option_lines(text)
    return _section(cp, lines, path, "toy", ToyConfig), _section(cp, lines, path, "qat", QatOptions)


# -- helpers --------------------------------------------------------------------


def _load_model(path) -> TdnnModel:
    try:
        return model_io.load_model(path)
    except FileNotFoundError:
        raise
    except model_io.ModelFormatError as e:
        raise RuntimeError(f"{path}: corrupt or unsupported model file ({e})") from None


def _stack(features: list[np.ndarray]):
    if len({u.shape for u in features}) == 1:
        return np.stack(features)
    return None


def _infer(model: TdnnModel, features: list[np.ndarray], plans=None) -> list[np.ndarray]:
    integer = ptq.is_integer_model(model)
    if integer and plans is None:
        plans = build_plans(model)
    run = (lambda x: forward_quantized(model, x, plans)) if integer else (lambda x: forward_float(model, x))
    stacked = _stack(features)
    if stacked is not None:
        return list(run(stacked))
    return [run(u) for u in features]


def _check_dims(model: TdnnModel, features: list[np.ndarray], path) -> None:
    if features[0].shape[-1] != model.feat_dim:
        raise RuntimeError(f"{path}: feature dim {features[0].shape[-1]} != model input dim {model.feat_dim}")


def _accuracy(model: TdnnModel, features, labels, plans=None) -> float:
    outs = _infer(model, features, plans)
    pred = np.concatenate([o.argmax(-1) for o in outs])
    return float(np.mean(pred == np.concatenate(labels)))


def _scheme_of(model: TdnnModel) -> str:
    if "quant_scheme" in model.metadata:
        return str(model.metadata["quant_scheme"])
    if "qat_schedule" in model.metadata:
        return "qat-float"
    if any(layer.factors is not None for layer in model.all_layers):
        return "factorized"
    return "float"


def _report_path(out: Path, explicit) -> Path:
    return Path(explicit) if explicit else out.with_name(out.name + ".json")


# -- commands -------------------------------------------------------------------


def cmd_train_toy(args) -> int:
    cfg, _ = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    model, metrics, data = qat.train_toy(cfg)
    seconds = time.perf_counter() - t0
    model = dataclasses.replace(model, metadata=dict(model.metadata, seed=cfg.seed))
    model_path = out / "float.tdnq"
    model_io.save_model(model, model_path)
    model_io.save_features(out / "train.npz", data.train_x, data.train_y)
    model_io.save_features(out / "eval.npz", data.eval_x, data.eval_y)
    model_io.save_features(out / "calib.npz", data.calib_x)
    rep = MetricsReport.for_model(
        "train-toy", model, model_path,
        eval_accuracy=metrics["eval_accuracy"],
        details={"config": cfg.to_dict(), "curve": metrics["curve"], "train_frames": metrics["train_frames"]},
        timing={"train_seconds": seconds},
    ).to_dict()
    write_report(rep, out / "train_report.json")
    print(f"float eval accuracy {metrics['eval_accuracy']:.4f}; wrote {model_path}")
    return 0


def _stats_from_sidecar(path) -> ptq.CalibrationStats:
    try:
        side = json.loads(Path(path).read_text())
        if side.get("format") != SIDECAR_FORMAT:
            raise ValueError("not a QAT observer sidecar")
        return QatState.from_dict(side["state"]).to_stats()
    except (KeyError, TypeError, ValueError) as e:
        raise RuntimeError(f"{path}: bad observer sidecar ({e})") from None


def cmd_quantize(args) -> int:
    cfg = ptq.QuantConfig.for_scheme(args.scheme, args.bits)
    if not cfg.weight_only and args.calib is None and args.ranges is None:
        raise UsageError(f"scheme {args.scheme} needs calibration data: pass --calib FEATURES or --ranges SIDECAR")
    model = _load_model(args.model)
    calib = None
    stats = None
    if args.calib is not None:
        calib = model_io.load_features(args.calib)
        _check_dims(model, calib, args.calib)
        calib = calib[: args.calib_utts]
    if not cfg.weight_only:
        stats = _stats_from_sidecar(args.ranges) if args.ranges else ptq.calibrate(model, calib)
        if cfg.requant_output and not stats.per_layer_output:
            raise RuntimeError("output requantization needs observed output ranges")
    qmodel = ptq.apply_config(model, cfg, stats)
    qmodel = dataclasses.replace(qmodel, name=f"{model.name}-{cfg.scheme}-int{args.bits}")
    out = Path(args.out)
    model_io.save_model(qmodel, out)
    layers = ptq.quantization_report(qmodel, stats, calib if not cfg.weight_only else None)
    details = {"source": Path(args.model).name, "calibration_frames": stats.frames_seen if stats else None}
    rep = MetricsReport.for_model("quantize", qmodel, out, cfg.to_dict(), layers=layers, details=details).to_dict()
    write_report(rep, _report_path(out, args.report))
    print(f"{cfg.scheme} int{args.bits}: weight payload {rep['weight_bytes']} bytes ({rep['size_ratio']:.4f}x float32)")
    return 0


def cmd_eval(args) -> int:
    if args.runs < 30 or args.warmup < 5:
        raise UsageError("latency needs at least 30 timed runs after 5 warmups")
    model = _load_model(args.model)
    feats = model_io.load_features(args.features)
    labels = model_io.load_labels(args.labels or args.features)
    _check_dims(model, feats, args.features)
    if len(feats) != len(labels) or any(f.shape[0] != l.shape[0] for f, l in zip(feats, labels)):
        raise RuntimeError("features and labels are not aligned (utterance count or frame counts differ)")
    integer = ptq.is_integer_model(model)
    plans = build_plans(model) if integer else None
    acc = _accuracy(model, feats, labels, plans)
    for _ in range(args.warmup):
        _infer(model, feats, plans)
    times = []
    for _ in range(args.runs):
        t0 = time.perf_counter()
        _infer(model, feats, plans)
        times.append(time.perf_counter() - t0)
    frames = int(sum(f.shape[0] for f in feats))
    median = float(np.median(times))
    out = Path(args.model)
    rep = MetricsReport.for_model(
        "eval", model, out,
        ptq.QuantConfig.for_scheme(model.metadata["quant_scheme"], int(model.metadata["weight_bits"])).to_dict()
        if "quant_scheme" in model.metadata else None,
        eval_accuracy=acc,
        details={"path": "integer" if integer else "float", "frames": frames, "utterances": len(feats)},
        timing={"median_seconds": median, "median_us_per_frame": 1e6 * median / frames, "runs": args.runs,
                "warmup": args.warmup},
    ).to_dict()
    if args.report:
        write_report(rep, args.report)
    print(f"accuracy {acc:.4f} over {frames} frames; median latency {1e3 * median:.2f} ms "
          f"({rep['timing']['median_us_per_frame']:.2f} us/frame, {'integer' if integer else 'float'} path)")
    return 0


def _fmt_params(n: int) -> str:
    return f"{n / 1e6:.2f}M" if n >= 1e5 else f"{n / 1e3:.1f}K"


def cmd_compare(args) -> int:
    paths = [args.baseline, *args.candidates]
    models = [_load_model(p) for p in paths]
    for p, m in zip(paths[1:], models[1:]):
        if m.feat_dim != models[0].feat_dim:
            raise RuntimeError(f"{p}: feature dim {m.feat_dim} differs from baseline's {models[0].feat_dim}")
    feats = labels = None
    if args.eval:
        feats = model_io.load_features(args.eval)
        labels = model_io.load_labels(args.labels or args.eval)
        _check_dims(models[0], feats, args.eval)
    base_bytes = model_io.weight_payload_bytes(paths[0])
    rows = []
    for p, m in zip(paths, models):
        wb = model_io.weight_payload_bytes(p)
        rows.append({
            "model": Path(p).name,
            "scheme": _scheme_of(m),
            "params": m.param_count,
            "weight_bytes": wb,
            "size_ratio": wb / base_bytes,
            "eval_accuracy": _accuracy(m, feats, labels) if feats is not None else None,
        })
    rep = comparison_report(Path(paths[0]).name, rows)
    validate_report(rep)
    header = f"{'Model':<28} {'Scheme':<14} {'Params':>8} {'Size':>7} {'Accuracy':>9}"
    print(header)
    print("-" * len(header))
    for r in rows:
        acc = f"{100 * r['eval_accuracy']:.2f}%" if r["eval_accuracy"] is not None else "-"
        print(f"{r['model']:<28} {r['scheme']:<14} {_fmt_params(r['params']):>8} {r['size_ratio']:>6.2f}x {acc:>9}")
    if args.json:
        Path(args.json).write_text(dumps(rep))
    return 0


def cmd_qat(args) -> int:
    _, opts = load_config(args.config)
    if args.schedule:
        opts = dataclasses.replace(opts, schedule=args.schedule)
    if args.fraction is not None:
        opts = dataclasses.replace(opts, activate_after_fraction=args.fraction)
    try:
        schedule = opts.make_schedule()
    except ValueError as e:
        raise UsageError(str(e)) from None
    model = _load_model(args.checkpoint)
    x = np.stack(model_io.load_features(args.train))
    y = np.stack(model_io.load_labels(args.labels or args.train))
    _check_dims(model, list(x[:1]), args.train)
    act_mode, quantize_output = QAT_TARGETS[opts.target_scheme]
    resume = None
    if args.resume:
        try:
            resume = TrainCheckpoint.load(args.resume)
        except (OSError, ValueError, KeyError) as e:
            raise RuntimeError(f"{args.resume}: unreadable resume checkpoint ({e})") from None
    res = qat.train(
        model, x, y, epochs=opts.epochs, lr=opts.lr, batch_size=opts.batch_size, seed=opts.seed,
        schedule=schedule, bits=opts.bits, act_mode=act_mode, quantize_output=quantize_output,
        resume=resume, stop_after_steps=args.stop_after_steps,
    )
    out = Path(args.out)
    if not res.finished:
        ckpt = out.with_name(out.name + ".resume.npz")
        res.checkpoint.save(ckpt)
        print(f"stopped at step {res.checkpoint.step}; resume with --resume {ckpt}")
        return 0
    qmodel = dataclasses.replace(
        res.model, name=f"{model.name}-qat",
        metadata=dict(model.metadata, qat_schedule=opts.schedule, qat_target=opts.target_scheme),
    )
    model_io.save_model(qmodel, out)
    sidecar = {
        "format": SIDECAR_FORMAT,
        "version": 1,
        "source": Path(args.checkpoint).name,
        "options": dataclasses.asdict(opts),
        "schedule": dataclasses.asdict(schedule),
        "state": res.qat_state.to_dict(),
        "history": res.history,
    }
    out.with_name(out.name + ".qat.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    print(f"QAT ({opts.schedule}, target {opts.target_scheme}) finished after {res.checkpoint.step} steps; wrote {out}")
    return 0


def cmd_factorize(args) -> int:
    model = _load_model(args.model)
    fmodel, info = factorize_model(model, args.ratio)
    out = Path(args.out)
    model_io.save_model(fmodel, out)
    rep = MetricsReport.for_model("factorize", fmodel, out, details=info).to_dict()
    rep["baseline_weight_bytes"] = float_weight_bytes(model)
    rep["size_ratio"] = rep["weight_bytes"] / rep["baseline_weight_bytes"]
    write_report(rep, _report_path(out, args.report))
    print(f"params {info['params_before']} -> {info['params_after']} ({info['param_ratio']:.3f}x)")
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdnnq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-toy", help="train the float model on the synthetic task")
    s.add_argument("config", help="INI config with a [toy] section")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_train_toy)

    s = sub.add_parser("quantize", help="post-training quantization")
    s.add_argument("model")
    s.add_argument("out")
    s.add_argument("--bits", type=int, choices=(8, 16), default=8)
    s.add_argument("--scheme", choices=ptq.SCHEMES, default="weights-only")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--calib", help="calibration features (.npz or .txt)")
    g.add_argument("--ranges", help="QAT observer sidecar to use instead of calibration")
    s.add_argument("--calib-utts", type=int, default=ptq.DEFAULT_CALIB_UTTS)
    s.add_argument("--report", help="JSON report path (default: OUT.json)")
    s.set_defaults(fn=cmd_quantize)

    s = sub.add_parser("eval", help="frame accuracy and latency")
    s.add_argument("model")
    s.add_argument("features")
    s.add_argument("labels", nargs="?", help="defaults to the labels array inside FEATURES")
    s.add_argument("--runs", type=int, default=30)
    s.add_argument("--warmup", type=int, default=5)
    s.add_argument("--report")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("compare", help="size and accuracy table")
    s.add_argument("baseline")
    s.add_argument("candidates", nargs="+")
    s.add_argument("--eval", help="evaluation features")
    s.add_argument("--labels")
    s.add_argument("--json", help="write the table as JSON")
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("qat", help="quantization-aware fine-tuning")
    s.add_argument("checkpoint", help="float model to fine-tune")
    s.add_argument("--config", required=True, help="INI config with a [qat] section")
    s.add_argument("--train", required=True, help="training features with labels")
    s.add_argument("--labels")
    s.add_argument("--out", required=True)
    s.add_argument("--schedule", choices=("full-epoch", "final-iterations"))
    s.add_argument("--fraction", type=float, help="final-iterations activation point within the last epoch")
    s.add_argument("--stop-after-steps", type=int, help="stop early and write a resume checkpoint")
    s.add_argument("--resume", help="resume checkpoint from an earlier --stop-after-steps run")
    s.set_defaults(fn=cmd_qat)

    s = sub.add_parser("factorize", help="truncated-SVD factorization")
    s.add_argument("model")
    s.add_argument("out")
    s.add_argument("--ratio", type=float, default=FACTORIZED_TARGET_RATIO, help="target ratio of total parameters (default 3.1/7.9)")
    s.add_argument("--report")
    s.set_defaults(fn=cmd_factorize)
    return p


def main(argv=None) -> int:
    level = os.environ.get("TDNNQ_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"tdnnq {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report every runtime failure as exit 1
        log.debug("failure", exc_info=True)
        print(f"tdnnq {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
