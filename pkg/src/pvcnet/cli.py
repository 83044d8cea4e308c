"""Command-line entry point: ``pvcnet <command> [flags]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import explain, metrics, plotting, training, verify
from .model import AdmissibilityError, NetworkConfig, VARIANTS, build
from .preprocess import RawRecording, process_recording

log = logging.getLogger("pvcnet")

THREADS_ENV = "PVCNET_THREADS"


class CliError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _paths(text: str) -> list[Path]:
    return [Path(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pvcnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic beat files, one train/test pair per rate")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--rates", type=_floats, default=[360.0, 250.0, 128.0])
    s.add_argument("--per-class", type=int, default=400)
    s.add_argument("--pvc-ratio", type=float, default=1.0, help="PVC beats per non-PVC beat")
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--jitter", type=float, default=0.1)
    s.add_argument("--test-fraction", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("extract", help="filter, window and normalize raw recordings")
    e.add_argument("--in", dest="input", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train a model on one or more beat files")
    t.add_argument("--data", type=_paths, required=True)
    t.add_argument("--model", choices=VARIANTS, default="dense-spp")
    t.add_argument("--loss", choices=("weighted", "unweighted", "focal"), default="weighted")
    t.add_argument("--gamma", type=float, default=3.0)
    t.add_argument("--ckpt", type=Path, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--batch-size", type=int, default=100)
    t.add_argument("--val-fraction", type=float, default=0.2)
    t.add_argument("--epochs-per-round", type=int, default=20)
    t.add_argument("--max-epochs", type=int, default=None)
    t.add_argument("--growth", type=int, default=32)
    t.add_argument("--blocks", type=_ints, default=[3, 6, 9])
    t.add_argument("--levels", type=_ints, default=[1, 4])
    t.add_argument("--resume", type=Path, default=None, help="continue from a training checkpoint")
    t.add_argument("--no-figures", action="store_true")

    v = sub.add_parser("eval", help="per-database and overall detection scores")
    v.add_argument("--ckpt", type=Path, required=True)
    v.add_argument("--data", type=_paths, required=True)
    v.add_argument("--out", type=Path, default=None, help="CSV path (a PNG chart is written beside it)")
    v.add_argument("--threshold", type=float, default=0.5)
    v.add_argument("--no-figures", action="store_true")

    x = sub.add_parser("explain", help="occlusion attention map for one beat")
    x.add_argument("--ckpt", type=Path, required=True)
    x.add_argument("--data", type=Path, required=True)
    x.add_argument("--id", required=True)
    x.add_argument("--out", type=Path, required=True)
    x.add_argument("--window", type=int, default=5)
    x.add_argument("--no-figures", action="store_true")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("inspect", help="describe a checkpoint")
    i.add_argument("--ckpt", type=Path, required=True)
    return p


def _effective(args: argparse.Namespace) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, list):
            v = [str(e) if isinstance(e, Path) else e for e in v]
        out[k] = v
    return out


def _load_sets(paths: list[Path]) -> list[ds.DatabaseSet]:
    sets = []
    for path in paths:
        if not path.exists():
            raise CliError(f"data file {path} does not exist")
        d = ds.load(path)
        if not len(d):
            raise CliError(f"data file {path} holds no beats")
        sets.append(d)
    return sets


def _load_ckpt(path: Path) -> training.Checkpoint:
    if not path.exists():
        raise CliError(f"checkpoint {path} does not exist")
    return training.Checkpoint.load(path)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = ds.SyntheticConfig(per_class=args.per_class, rates=args.rates, pvc_ratio=args.pvc_ratio,
                             noise=args.noise, jitter=args.jitter, seed=args.seed)
    for k, d in enumerate(ds.synthesize(cfg)):
        s = ds.split(d, args.test_fraction, seed=args.seed * 7919 + k)
        ds.save(d.subset(s.train), args.out / f"{d.name}_train.jsonl")
        ds.save(d.subset(s.val), args.out / f"{d.name}_test.jsonl")
        print(f"{d.name}: fs={d.fs:g} length={d.length} train={len(s.train)} test={len(s.val)}")
    return 0


def cmd_extract(args) -> int:
    if not args.input.exists():
        raise CliError(f"raw recording file {args.input} does not exist")
    beats, rate = [], None
    with open(args.input, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = RawRecording(obj["samples"], float(obj["fs"]), obj["r_peaks"], obj["beat_labels"],
                                   str(obj.get("record_id", lineno)), str(obj.get("database_id", "db")))
            except (ValueError, KeyError, TypeError) as exc:
                raise CliError(f"{args.input} line {lineno}: {exc}") from None
            if rate is not None and rec.fs != rate:
                raise CliError(f"{args.input}: mixed sampling rates ({rate:g} and {rec.fs:g}); one rate per file")
            rate = rec.fs
            try:
                beats.extend(process_recording(rec))
            except ValueError as exc:
                raise CliError(f"{args.input} line {lineno}: {exc}") from None
    records = [ds.BeatRecord.from_window(b) for b in beats]
    name = records[0].db if records else args.out.stem
    ds.save(ds.DatabaseSet(name, rate or 0.0, records), args.out)
    print(f"extracted {len(records)} beats to {args.out}")
    return 0


def _history_csv(history, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(training.HISTORY_COLUMNS)
        for h in history:
            w.writerow([h.epoch, h.database, repr(h.lr), repr(h.train_loss), repr(h.val_loss),
                        repr(h.pooled_val_loss), repr(h.pooled_val_acc)])


def cmd_train(args) -> int:
    sets = _load_sets(args.data)
    if args.resume is not None:
        trainer = _load_ckpt(args.resume).trainer(sets)
        trainer.config.max_epochs = args.max_epochs
    else:
        lengths = {d.length for d in sets}
        if args.model == "plain20" and len(lengths) > 1:
            raise CliError(f"plain20 needs a single input length, data has lengths {sorted(lengths)}")
        net = NetworkConfig(variant=args.model, growth=args.growth, block_layers=args.blocks,
                            spp_levels=args.levels, seed=args.seed, input_length=min(lengths))
        cfg = training.TrainConfig(initial_lr=args.lr, batch_size=args.batch_size, val_fraction=args.val_fraction,
                                   loss=args.loss, gamma=args.gamma, epochs_per_round=args.epochs_per_round,
                                   max_epochs=args.max_epochs, seed=args.seed)
        model = build(net)
        print(f"model: {net.variant} params={model.param_count()} min_length={model.min_length}")
        trainer = training.Trainer(model, sets, cfg)
    try:
        trainer.run(args.max_epochs)
    except training.TrainingError:
        diag = args.ckpt.with_suffix(".diagnostic.ckpt")
        training.Checkpoint.from_trainer(trainer).save(diag)
        raise CliError(f"training diverged; diagnostic checkpoint at {diag}") from None
    training.Checkpoint.from_trainer(trainer).save(args.ckpt)
    hist = args.ckpt.with_suffix(".history.csv")
    _history_csv(trainer.history, hist)
    if not args.no_figures and trainer.history:
        plotting.plot_history(trainer.history, hist.with_suffix(".png"))
    visited = sorted({h.database for h in trainer.history})
    status = "finished" if trainer.finished else "paused"
    print(f"{status} after {trainer.epoch} epochs; best epoch {trainer.best_epoch} "
          f"(pooled val loss {trainer.best_pooled:.6f}); databases visited: {','.join(visited)}")
    print(f"checkpoint: {args.ckpt}")
    return 0


def evaluate(model, sets: list[ds.DatabaseSet], threshold: float = 0.5):
    rows = []
    total = metrics.ConfusionMatrix()
    for d in sets:
        model.check_length(d.length)
        cm = metrics.confusion(training.predict(model, d), d.labels(), threshold)
        total = total + cm
        rows.append((d.name, cm, metrics.metrics(cm)))
    rows.append(("Overall", total, metrics.metrics(total)))
    return rows


def render_eval_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("database", "n", *metrics.CSV_COLUMNS))
    for name, cm, rep in rows:
        w.writerow((name, cm.total, *rep.csv_row()))
    return buf.getvalue()


def cmd_eval(args) -> int:
    model = _load_ckpt(args.ckpt).model()
    sets = _load_sets(args.data)
    try:
        rows = evaluate(model, sets, args.threshold)
    except AdmissibilityError as exc:
        raise CliError(str(exc)) from None
    text = render_eval_csv(rows)
    sys.stdout.write(text)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
        if not args.no_figures:
            plotting.plot_metrics([(n, r.values()) for n, _, r in rows], plotting.figure_path(args.out))
    return 0


def cmd_explain(args) -> int:
    model = _load_ckpt(args.ckpt).model()
    (d,) = _load_sets([args.data])
    try:
        rec = d.find(args.id)
    except KeyError as exc:
        raise CliError(str(exc.args[0])) from None
    try:
        model.check_length(rec.samples.size)
        amap = explain.occlusion_map(model, rec.samples, args.window, rec.id)
    except (AdmissibilityError, ValueError) as exc:
        raise CliError(str(exc)) from None
    amap.to_csv(args.out)
    if not args.no_figures:
        plotting.plot_attention(amap, plotting.figure_path(args.out),
                                f"{rec.id} (label {rec.label}, p={amap.p0:.3f})")
    print(f"attention map for {rec.id}: p={amap.p0:.6f} peak at sample {int(np.argmax(amap.intensities))}")
    return 0


def cmd_gradcheck(args) -> int:
    results = verify.run_suite(args.seed)
    failed = 0
    for r in results:
        flag = "PASS" if r.ok else "FAIL"
        failed += not r.ok
        print(f"{flag} {r.name:28s} max_rel_err={r.max_error:.3e} checked={r.checked} kinks={r.kinks}")
    print(f"{len(results) - failed}/{len(results)} checks within {verify.TOLERANCE:g}")
    return 1 if failed else 0


def cmd_inspect(args) -> int:
    ck = _load_ckpt(args.ckpt)
    model = ck.model()
    print("network:", ck.network.to_json())
    print("train:", json.dumps(asdict(ck.train), sort_keys=True))
    print("params:", model.param_count())
    print("min_length:", model.min_length)
    print("channel_trace:", " -> ".join(f"{n} {c}" for n, c in model.channel_trace))
    s = ck.state
    if s:
        print(f"epochs: {s['epoch']} best_epoch: {s['best_epoch']} finished: {s['stopped']}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def _limit_threads():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    print("config:", json.dumps(_effective(args), sort_keys=True))
    _limit_threads()
    try:
        return COMMANDS[args.command](args)
    except (CliError, training.CheckpointError, ds.FormatError, AdmissibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
