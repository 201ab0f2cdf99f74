"""Command-line entry point: ``ppgbp {synth,preprocess,train,evaluate,grade}``.

Exit status: 0 success, 1 finished with warnings or a few failed folds,
2 bad input or configuration (or more than 10% of folds failed).
"""
import argparse
import logging
import os
import sys
import warnings

from .config import FOLD_MODES, MODELS, load_run_config
from .errors import AlignmentWarning, PPGBPError

log = logging.getLogger("ppgbp")

EXIT_OK, EXIT_PARTIAL, EXIT_INPUT = 0, 1, 2
MAX_FAILED_FRACTION = 0.10


def _common(p):
    p.add_argument("--config", help="flat key = value file mirroring the run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--fold-mode", choices=FOLD_MODES)
    p.add_argument("--exclusion-radius", type=int)
    p.add_argument("--paper-faithful", action="store_true", default=None,
                   help="one target scaler over all windows instead of one per fold")
    p.add_argument("--jobs", type=int)
    p.add_argument("--model", choices=MODELS)
    p.add_argument("--epochs", type=int, help="shorthand for train.epochs")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any config key, e.g. --set hp.lstm_units=32")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="ppgbp", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic PPG/ABP record")
    p.add_argument("spec", help="synthetic spec file (key = value)")
    p.add_argument("out", help="output record CSV")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("preprocess", help="align, resample and window a record")
    p.add_argument("record", help="t,ppg,abp CSV")
    p.add_argument("out", help="output window dataset CSV")
    p.add_argument("--max-lag", type=float, default=2.0, help="alignment search range, s")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("train", help="train one network on a window dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--exclude", default="", help="comma-separated window indices to hold out")
    _common(p)

    p = sub.add_parser("evaluate", help="cross-validate on a window dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoints", action="store_true", default=None,
                   help="save each fold's network under checkpoints/")
    _common(p)

    p = sub.add_parser("grade", help="score an existing records CSV")
    p.add_argument("records")
    p.add_argument("--out", help="also write metrics files here")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _resolve(args, **extra):
    kv = {}
    for item in args.set:
        if "=" not in item:
            raise PPGBPError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    flags = {"seed": args.seed, "fold_mode": args.fold_mode,
             "exclusion_radius": args.exclusion_radius, "paper_faithful": args.paper_faithful,
             "jobs": args.jobs, "model": args.model, "train.epochs": args.epochs, **extra}
    kv.update({k: v for k, v in flags.items() if v is not None})
    return load_run_config(args.config, kv)


def _write_config(cfg, out_dir, **paths):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.txt"), "w", encoding="utf-8") as fh:
        # inputs as comments so the file loads back through --config
        for k, v in paths.items():
            fh.write(f"# {k}: {v}\n")
        fh.write(cfg.to_text())


def cmd_synth(args):
    from .data import parse_synth_spec, preprocess_record, synthesize, write_record
    with open(args.spec, encoding="utf-8") as fh:
        spec = parse_synth_spec(fh.read())
    rec = synthesize(spec)
    write_record(rec, args.out)
    print(f"wrote {args.out}: {rec.duration:.1f} s at {rec.fs:g} Hz")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", AlignmentWarning)
            _, ds = preprocess_record(rec)
    except PPGBPError as exc:
        print(f"windows: 0 ({exc})")
        return EXIT_OK
    sbp = [w.sbp for w in ds.windows]
    dbp = [w.dbp for w in ds.windows]
    print(f"windows: {len(ds)}")
    print(f"SBP {min(sbp):.1f}..{max(sbp):.1f} mmHg, DBP {min(dbp):.1f}..{max(dbp):.1f} mmHg")
    return EXIT_OK


def cmd_preprocess(args):
    from .data import load_record, preprocess_record, write_dataset
    rec = load_record(args.record)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        aligned, ds = preprocess_record(rec, max_lag_s=args.max_lag)
    write_dataset(ds, args.out)
    notes = [str(w.message) for w in caught] + (
        [f"skipped {len(ds.skipped)} degenerate window(s): {ds.skipped}"] if ds.skipped else [])
    print(f"{rec.subject_id}: lag {aligned.metadata['lag_samples']} samples "
          f"({aligned.metadata['lag_s']:+.3f} s), peak correlation {aligned.metadata['align_peak']:.3f}")
    print(f"windows: {len(ds)} (skipped {len(ds.skipped)})")
    for n in notes:
        print(f"warning: {n}", file=sys.stderr)
    return EXIT_PARTIAL if notes else EXIT_OK


def _parse_indices(text):
    try:
        return sorted({int(t) for t in text.split(",") if t.strip()})
    except ValueError:
        raise PPGBPError(f"--exclude expects comma-separated integers, got {text!r}") from None


def cmd_train(args):
    from .data import read_dataset
    from .net.checkpoint import save_checkpoint
    from .train import train_subject, write_log
    cfg = _resolve(args)
    ds = read_dataset(args.dataset)
    exclude = _parse_indices(args.exclude)
    res = train_subject(ds.windows, cfg.train_config(), exclude=set(exclude), hp=cfg.hp)
    _write_config(cfg, args.out, dataset=args.dataset, exclude=",".join(map(str, exclude)))
    save_checkpoint(os.path.join(args.out, "model.ckpt"), res.params, res.adam, res.scaler,
                    seed=cfg.seed, extra={"exclude": exclude, "subject": ds.subject_id})
    write_log(res.history, os.path.join(args.out, "train_log.ndjson"))
    last = res.history[-1]
    print(f"trained {len(res.history)} epoch(s) on {len(res.train_indices)} windows; "
          f"final loss {last['loss']:.5f}")
    return EXIT_OK


def cmd_evaluate(args):
    from .data import read_dataset
    from .eval import run_lowo, write_bland_altman, write_histogram, write_metrics, write_records
    from .net.checkpoint import save_checkpoint
    extra = {} if args.checkpoints is None else {"save_checkpoints": True}
    cfg = _resolve(args, **extra)
    ds = read_dataset(args.dataset)
    res = run_lowo(ds.windows, cfg, keep_results=cfg.save_checkpoints and cfg.model == "net")
    out = args.out
    _write_config(cfg, out, dataset=args.dataset)
    write_records(res.records, os.path.join(out, "records.csv"))
    write_metrics(res.report, out)
    write_bland_altman(res.records, os.path.join(out, "bland_altman.csv"))
    write_histogram(res.records, os.path.join(out, "error_histogram.csv"))
    with open(os.path.join(out, "folds.txt"), "w", encoding="utf-8") as fh:
        fh.write("fold,test_indices,status\n")
        for f in res.folds:
            test = ";".join(map(str, f.test))
            fh.write(f"{f.fold},{test},{'ok' if f.error is None else f.error}\n")
    if cfg.save_checkpoints and cfg.model == "net":
        ck_dir = os.path.join(out, "checkpoints")
        os.makedirs(ck_dir, exist_ok=True)
        for f in res.folds:
            if f.result is not None:
                save_checkpoint(os.path.join(ck_dir, f"fold_{f.fold:04d}.ckpt"), f.result.params,
                                f.result.adam, f.result.scaler, seed=cfg.seed,
                                extra={"fold": f.fold, "test": list(f.test)})
    print(res.report.to_text(), end="")
    failed = len(res.failures)
    if failed:
        print(f"{failed} of {len(res.folds)} folds failed; see folds.txt", file=sys.stderr)
        if failed > MAX_FAILED_FRACTION * len(res.folds):
            return EXIT_INPUT
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_grade(args):
    from .eval import metrics_report, read_records, write_metrics
    report = metrics_report(read_records(args.records))
    print(report.to_text(), end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_metrics(report, args.out)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
            "evaluate": cmd_evaluate, "grade": cmd_grade}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (PPGBPError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
