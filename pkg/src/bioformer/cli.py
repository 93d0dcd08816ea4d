"""Command-line pipeline: gen-data, import, train, quantize, eval, profile.

Every command accepts ``--config FILE`` with flat ``key = value`` lines
(keys are the long flag names, dashes or underscores); explicit flags win.
Each run writes a JSON manifest next to its primary output.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import profile as P
from . import quant as Q
from . import training as TR
from .model import BioformerConfig, CheckpointError, load_checkpoint, load_params, save_params

log = logging.getLogger("bioformer")


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _truthy(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise CLIError(f"not a boolean: {v!r}")


def apply_config_defaults(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    unknown = sorted(set(values) - set(actions) - {"config"})
    if unknown:
        raise CLIError(f"unknown config keys: {', '.join(unknown)}")
    defaults = {}
    for k, v in values.items():
        if k == "config":
            continue
        a = actions[k]
        if isinstance(a, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[k] = _truthy(v)
        elif a.nargs in ("+", "*"):
            defaults[k] = [a.type(x) if a.type else x for x in v.replace(",", " ").split()]
        else:
            defaults[k] = v  # argparse converts string defaults through ``type``
    sub.set_defaults(**defaults)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_manifest(args, inputs: list, outputs: list, started: float, extra: dict | None = None) -> Path:
    snapshot = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func", "manifest")}
    manifest = {
        "command": args.command,
        "config": snapshot,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "wall_clock_s": round(time.time() - started, 3),
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        **(extra or {}),
    }
    path = Path(args.manifest) if args.manifest else Path(str(outputs[0]) + ".manifest.json")
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def thread_limit():
    n = os.environ.get("BIOFORMER_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        n = int(n)
    except ValueError:
        raise CLIError(f"BIOFORMER_THREADS must be an integer, got {n!r}") from None
    if n < 1:
        raise CLIError("BIOFORMER_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _recording_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CLIError(f"data directory not found: {d}")
    files = sorted(d.glob("*.semg"))
    if not files:
        raise CLIError(f"no .semg recordings in {d}")
    return files


def _load_dataset(directory):
    files = _recording_files(directory)
    return D.build_dataset(D.load_recordings(directory)), files


def _model_cfg(args) -> BioformerConfig:
    return BioformerConfig(heads=args.heads, depth=args.depth, filter=args.filter,
                           use_pos_embedding=not args.no_pos_embedding)


def _sessions(args):
    return tuple(args.train_sessions), tuple(args.test_sessions)


def _load_any(path):
    """fp32 params or a quantized model, by checkpoint content."""
    path = Path(path)
    if not path.is_file():
        raise CLIError(f"checkpoint not found: {path}")
    cfg, tensors, meta = load_checkpoint(path)
    if meta.get("kind") == "int8":
        return cfg, None, Q.load_quantized(path)
    params, cfg = load_params(path)
    return cfg, params, None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = time.time()
    recs = D.generate_synthetic(args.subjects, args.sessions, args.reps, args.seed,
                                gesture_s=args.gesture_s, rest_s=args.rest_s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = D.save_recordings(recs, out, args.format)
    write_manifest(args, [], paths, started)
    print(f"wrote {len(paths)} recordings to {out}")
    return 0


def cmd_import(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec = D.import_recording(args.input, args.format, args.subject, args.session, args.sample_rate)
    dest = out / f"s{rec.subject:02d}_sess{rec.session:02d}.semg"
    D.export_recording(rec, dest)
    write_manifest(args, [args.input], [dest], started)
    print(f"imported {rec.n_samples} samples x {rec.n_channels} channels -> {dest}")
    return 0


def _train_config(args) -> TR.TrainConfig:
    train_s, test_s = _sessions(args)
    drop = args.drop_epoch if args.drop_epoch is not None else args.finetune_epochs // 2
    return TR.TrainConfig(pretrain_epochs=args.pretrain_epochs, finetune_epochs=args.finetune_epochs,
                          warmup_epochs=args.warmup_epochs, lr_peak=args.lr_peak, finetune_lr=args.finetune_lr,
                          finetune_drop_epoch=drop, batch_size=args.batch_size, seed=args.seed,
                          train_sessions=train_s, test_sessions=test_s)


def cmd_train(args) -> int:
    started = time.time()
    ds, files = _load_dataset(args.data)
    cfg = _model_cfg(args)
    tcfg = _train_config(args)
    metrics = TR.MetricsLog(sessions=tcfg.test_sessions)
    res = TR.two_stage(ds, args.subject, cfg, tcfg, pretrain=not args.no_pretrain, metrics=metrics)
    out = Path(args.out)
    metrics_path = Path(args.metrics) if args.metrics else out.with_suffix(".metrics.csv")
    save_params(out, res.params, cfg, {"kind": "fp32", "subject": args.subject, "pretrain": not args.no_pretrain})
    atomic_write_text(metrics_path, metrics.to_csv())
    mean = float(np.mean(list(res.session_acc.values())))
    write_manifest(args, files, [out, metrics_path], started,
                   {"session_acc": {str(k): v for k, v in res.session_acc.items()}, "mean_test_acc": mean})
    for s, a in sorted(res.session_acc.items()):
        print(f"session {s}: {a:.4f}")
    print(f"mean test accuracy: {mean:.4f}")
    return 0


def cmd_quantize(args) -> int:
    started = time.time()
    cfg, params, qm = _load_any(args.checkpoint)
    if params is None:
        raise CLIError("checkpoint is already quantized")
    ds, files = _load_dataset(args.data)
    own = ds.subset(ds.subjects == args.subject)
    train_s, test_s = _sessions(args)
    train, test = D.split_sessions(own, train_s, test_s)
    if len(train) == 0 or len(test) == 0:
        raise CLIError(f"subject {args.subject} has no train or test windows")
    rng = np.random.default_rng([args.seed, 3])
    calib = train.get(np.sort(rng.choice(len(train), min(args.calib_windows, len(train)), replace=False)))
    held = test.get(np.sort(rng.choice(len(test), min(args.eval_windows, len(test)), replace=False)))
    tcfg = TR.TrainConfig(batch_size=args.batch_size, seed=args.seed, train_sessions=train_s, test_sessions=test_s)
    _, stats, qm = Q.quantize_pipeline(params, cfg, calib, train, args.qat_epochs, tcfg, args.qat_lr)
    agree = Q.agreement(params, qm, held, cfg)
    audit = Q.audit_graph(qm, qm.quantize_input(held[:4]))
    if not audit.ok:
        raise CLIError(f"integer graph audit failed: {audit}")
    out = Path(args.out)
    Q.save_quantized(out, qm, {"agreement_top1": agree.top1, "agreement_cosine": agree.cosine,
                               "qat_epochs": args.qat_epochs})
    write_manifest(args, [args.checkpoint, *files], [out], started,
                   {"agreement_top1": agree.top1, "agreement_cosine": agree.cosine, "n": agree.n,
                    "model_bytes": Q.model_memory_bytes(qm)})
    mode = "PTQ" if args.qat_epochs == 0 else f"QAT {args.qat_epochs} epochs"
    print(f"{mode}: top-1 agreement {agree.top1:.4f} on {agree.n} windows, "
          f"logit cosine {agree.cosine:.4f}, model {Q.model_memory_bytes(qm)} bytes")
    return 0


def confusion(pred: np.ndarray, true: np.ndarray, n: int) -> np.ndarray:
    m = np.zeros((n, n), np.int64)
    np.add.at(m, (true, pred), 1)
    return m


def cmd_eval(args) -> int:
    started = time.time()
    cfg, params, qm = _load_any(args.checkpoint)
    for flag in ("heads", "depth", "filter"):
        want = getattr(args, flag)
        if want is not None and want != getattr(cfg, flag):
            raise CLIError(f"config mismatch: --{flag} {want} but checkpoint has {getattr(cfg, flag)}")
    ds, files = _load_dataset(args.data)
    _, test_s = _sessions(args)
    subjects = sorted(np.unique(ds.subjects).tolist()) if args.all_subjects else [args.subject]
    fwd = qm.forward if qm is not None else None
    rows = []
    for subj in subjects:
        own = ds.subset((ds.subjects == subj) & np.isin(ds.sessions, test_s))
        if len(own) == 0:
            raise CLIError(f"no test-session windows for subject {subj}")
        pred = TR.evaluate(params, own, cfg, forward=fwd)
        for s in sorted(np.unique(own.sessions).tolist()):
            m = own.sessions == s
            cm = confusion(pred[m], own.labels[m], cfg.num_classes)
            rows.append((subj, s, np.trace(cm) / cm.sum(), int(cm.sum())))
    sessions = sorted({r[1] for r in rows})
    per_session = {s: float(np.mean([r[2] for r in rows if r[1] == s])) for s in sessions}
    text = io.StringIO()
    w = csv.writer(text, lineterminator="\n")
    w.writerow(["session", "accuracy", "subjects", "windows"])
    for s in sessions:
        sel = [r for r in rows if r[1] == s]
        w.writerow([s, f"{per_session[s]:.6f}", len(sel), sum(r[3] for r in sel)])
    w.writerow(["mean", f"{np.mean(list(per_session.values())):.6f}", len(subjects), sum(r[3] for r in rows)])
    if args.out:
        atomic_write_text(args.out, text.getvalue())
        write_manifest(args, [args.checkpoint, *files], [args.out], started, {"per_session": per_session})
    sys.stdout.write(text.getvalue())
    return 0


def cmd_profile(args) -> int:
    started = time.time()
    if args.grid:
        cfgs = P.grid_configs(args.heads_set, args.depth_set, args.filter_set)
    elif args.checkpoint:
        cfgs = [load_checkpoint(args.checkpoint)[0]]
    else:
        cfgs = [BioformerConfig(heads=args.heads or 8, depth=args.depth or 1, filter=args.filter or 10)]
    dm = P.DeployModel(period_ms=args.period_ms, battery_Wh=args.battery_wh)
    if args.grid:
        # one summary line instead of a warning per saturated config
        plog = logging.getLogger(P.__name__)
        level, plog.level = plog.level, logging.ERROR
        try:
            reports = [P.profile_config(c, dm) for c in cfgs]
        finally:
            plog.setLevel(level)
        over = sum(r.est_latency_ms > dm.period_ms for r in reports)
        if over:
            print(f"bioformer: warning: {over} of {len(reports)} configs exceed the {dm.period_ms:g} ms period",
                  file=sys.stderr)
    else:
        reports = [P.profile_config(c, dm) for c in cfgs]
    ref = [P.reference_row_for(c) for c in cfgs]
    extra = [{"table_row": r.name if r else "", "table_mmac": r.mmac if r else "",
              "table_memory_kB": r.memory_kB if r else ""} for r in ref]
    if args.csv:
        atomic_write_text(args.csv, P.reports_to_csv(reports, extra))
        write_manifest(args, [args.checkpoint] if args.checkpoint else [], [args.csv], started)
    if args.format == "csv":
        sys.stdout.write(P.reports_to_csv(reports, extra))
    else:
        sys.stdout.write(P.reports_to_table(reports, ref))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _int(s: str) -> int:
    return int(s, 0)


def _model_flags(p, required_defaults=True):
    d = (lambda v: v) if required_defaults else (lambda v: None)
    p.add_argument("--heads", type=int, default=d(8))
    p.add_argument("--depth", type=int, default=d(1))
    p.add_argument("--filter", type=int, default=d(10), help="tokenizer filter (= stride)")


def _session_flags(p):
    p.add_argument("--train-sessions", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--test-sessions", type=int, nargs="+", default=[6, 7, 8, 9, 10])


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value file; explicit flags override it")
    common.add_argument("--seed", type=_int, default=TR.DEFAULT_SEED)
    common.add_argument("--manifest", help="manifest path (default: <output>.manifest.json)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="bioformer", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic sEMG corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=4)
    p.add_argument("--sessions", type=int, default=10)
    p.add_argument("--reps", type=int, default=1, help="repetitions per gesture per session")
    p.add_argument("--gesture-s", type=float, default=6.0)
    p.add_argument("--rest-s", type=float, default=2.0)
    p.add_argument("--format", choices=["bin-v1"], default="bin-v1")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("import", parents=[common], help="convert a bin-v1 or CSV recording into a data directory")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["bin-v1", "csv"])
    p.add_argument("--subject", type=int, default=1)
    p.add_argument("--session", type=int, default=1)
    p.add_argument("--sample-rate", type=int, default=D.SAMPLE_RATE)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("train", parents=[common], help="inter-subject pre-training + subject fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--subject", type=int, default=1)
    _model_flags(p)
    p.add_argument("--no-pos-embedding", action="store_true")
    p.add_argument("--no-pretrain", action="store_true", help="subject-only baseline arm")
    p.add_argument("--pretrain-epochs", type=int, default=100)
    p.add_argument("--finetune-epochs", type=int, default=20)
    p.add_argument("--warmup-epochs", type=int, default=10)
    p.add_argument("--drop-epoch", type=int, help="fine-tune epoch where lr drops (default: half)")
    p.add_argument("--lr-peak", type=float, default=5e-4)
    p.add_argument("--finetune-lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=64)
    _session_flags(p)
    p.add_argument("--out", required=True, help="fp32 checkpoint path")
    p.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", parents=[common], help="calibrate, QAT, lower to int8")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subject", type=int, default=1)
    p.add_argument("--qat-epochs", type=int, default=Q.QAT_EPOCHS, help="0 = post-training quantization")
    p.add_argument("--qat-lr", type=float, default=Q.QAT_LR)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--calib-windows", type=int, default=512)
    p.add_argument("--eval-windows", type=int, default=1000)
    _session_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", parents=[common], help="per-session test accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subject", type=int, default=1)
    p.add_argument("--all-subjects", action="store_true")
    _model_flags(p, required_defaults=False)
    _session_flags(p)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", parents=[common], help="MAC / memory / energy report")
    p.add_argument("--grid", action="store_true", help="sweep heads x depth x filter")
    p.add_argument("--checkpoint")
    _model_flags(p, required_defaults=False)
    p.add_argument("--heads-set", type=int, nargs="+", default=list(P.HEADS_GRID))
    p.add_argument("--depth-set", type=int, nargs="+", default=list(P.DEPTH_GRID))
    p.add_argument("--filter-set", type=int, nargs="+", default=list(P.FILTER_GRID))
    p.add_argument("--period-ms", type=float, default=15.0)
    p.add_argument("--battery-wh", type=float, default=3.3)
    p.add_argument("--format", choices=["table", "csv"], default="table")
    p.add_argument("--csv", help="also write the report CSV here")
    p.set_defaults(func=cmd_profile)
    return ap


def parse_args(argv=None) -> argparse.Namespace:
    ap = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = ap.parse_args(argv)
    if args.config:
        sub = ap._subparsers._group_actions[0].choices[args.command]
        try:
            values = read_config_file(args.config)
        except OSError as e:
            raise CLIError(f"cannot read config: {e}") from None
        apply_config_defaults(sub, values)
        args = ap.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except CLIError as e:
        print(f"bioformer: error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except (CLIError, CheckpointError, D.FormatError, D.SplitError, ValueError, OSError) as e:
        print(f"bioformer: error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("bioformer: interrupted", file=sys.stderr)
        return 130
    except Exception as e:  # noqa: BLE001  last-resort one-line diagnostic
        if args.verbose:
            log.exception("unexpected failure")
        print(f"bioformer: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
