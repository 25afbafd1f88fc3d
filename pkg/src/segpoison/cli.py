"""``segpoison`` command line: generate, cooccur, poison, train, eval, defend, reproduce.

Exit codes: 0 success, 1 validation error (bad config, arguments or inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .attack import PoisonLog, poison_dataset, triggered_copies
from .context import cooccurrence_table, top_cooccurring
from .dataset import ClassTable, DatasetManifest, class_pixel_histogram, load_manifest, write_dataset
from .defense import dct_detect, finetune_sweep, strip_detect
from .experiment import ExperimentConfig, generate, load_config, reproduce
from .metrics import evaluate, rows_to_csv
from .model import load_model, save_model, train


class UsageError(ValueError):
    pass


def _class_id(classes: ClassTable, token: str) -> int:
    if token.isdigit():
        cid = int(token)
        if cid >= len(classes):
            raise UsageError(f"class id {cid} out of range")
        return cid
    try:
        return classes.id_of(token)
    except KeyError:
        raise UsageError(f"unknown class {token!r}; known: {', '.join(classes.names)}") from None


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    poison = {}
    if getattr(args, "mode", None) is not None:
        poison["mode"] = args.mode
    if getattr(args, "rate", None) is not None:
        poison["poison_rate"] = args.rate
    if getattr(args, "t", None) is not None:
        poison["t"] = args.t
    if getattr(args, "p", None) is not None:
        poison["p"] = args.p
    if poison:
        cfg = replace(cfg, poison=replace(cfg.poison, **poison))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _single(args) -> ExperimentConfig:
    cfg = _config(args)
    return cfg.with_seed(cfg.seeds[0])


def _write(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _log_trigger(path: str):
    log = PoisonLog.from_json(json.loads(Path(path).read_text()))
    if log.trigger is None:
        raise UsageError(f"poison log {path} records no trigger (rate 0?)")
    return log


def _triggered_test(test: DatasetManifest, log: PoisonLog, seed: int) -> DatasetManifest:
    return triggered_copies(test, log.trigger, range(len(test.classes)), log.victim_classes, seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = args.out or cfg.dataset_root
    if out is None:
        raise UsageError("generate needs --out or dataset_root in the config")
    ds = generate(cfg, out)
    hist = class_pixel_histogram(ds)
    print(f"wrote {len(ds)} images to {out}")
    for cid, count in sorted(hist.items()):
        print(f"  {ds.classes.names[cid]:<12s} {count}")
    return 0


def cmd_cooccur(args) -> int:
    ds = load_manifest(args.dataset)
    table = cooccurrence_table(ds)
    target = _class_id(ds.classes, args.target)
    victims = [_class_id(ds.classes, v) for v in args.victim]
    top = top_cooccurring(table, target, victims, args.t)
    csv_text = table.to_csv(ds.classes.names)
    if args.out:
        _write(args.out, csv_text)
    else:
        sys.stdout.write(csv_text)
    print("top: " + ", ".join(f"{ds.classes.names[c]}({int(table.counts[c, target])})" for c in top))
    return 0


def cmd_poison(args) -> int:
    cfg = _single(args)
    ds = load_manifest(args.dataset)
    poisoned, log = poison_dataset(ds, cfg.poison)
    write_dataset(poisoned, args.out)
    _write(str(Path(args.out) / "poison_log.json"), log.dumps())
    print(f"poisoned {len(log.entries)} of {len(ds)} samples ({log.mode}); log at {Path(args.out) / 'poison_log.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = _single(args)
    ds = load_manifest(args.dataset)
    model, report = train(ds, cfg.train, cfg.features)
    save_model(model, args.out)
    print(f"trained {cfg.train.epochs} epochs, final loss {report.final_loss:.4f}; model at {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _single(args)
    model = load_model(args.model)
    test = load_manifest(args.test)
    if args.log:
        log = _log_trigger(args.log)
        triggered = _triggered_test(test, log, cfg.seeds[0])
        victims, target = log.victim_classes, log.target_class
    else:
        triggered = test.replace_samples([])
        victims, target = cfg.poison.victim_classes, cfg.poison.target_class
    report = evaluate(model, test, triggered, victims, target)
    _write(args.out, report.dumps())
    return 0


def cmd_defend(args) -> int:
    cfg = _single(args)
    if args.kind == "dct":
        if not (args.clean and args.suspect):
            raise UsageError("defend dct needs --clean and --suspect")
        report = dct_detect(load_manifest(args.clean), load_manifest(args.suspect), cfg.dct)
        _write(args.out, report.dumps())
        if args.scores:
            _write(args.scores, report.scores_csv())
        return 0
    if not (args.model and args.test and args.log):
        raise UsageError(f"defend {args.kind} needs --model, --test and --log")
    model = load_model(args.model)
    test = load_manifest(args.test)
    log = _log_trigger(args.log)
    triggered = _triggered_test(test, log, cfg.seeds[0])
    if args.kind == "strip":
        report = strip_detect(model, test, triggered, cfg.strip)
        _write(args.out, report.dumps())
        if args.scores:
            _write(args.scores, report.scores_csv())
        return 0
    if not args.clean:
        raise UsageError("defend finetune needs --clean (the clean fine-tuning pool)")
    rows = finetune_sweep(
        model, load_manifest(args.clean), cfg.sweeps.cdr, cfg.finetune, test, triggered, log.victim_classes, log.target_class
    )
    _write(args.out, rows_to_csv(rows))
    return 0


def cmd_reproduce(args) -> int:
    cfg = _config(args)
    out = args.out or cfg.output_root
    summary = reproduce(cfg, out, jobs=args.jobs)
    med = summary["median"]
    for metric in ("asr", "miou"):
        print(f"median {metric}: " + ", ".join(f"{m}={v:.3f}" for m, v in med[metric].items() if v is not None))
    print(f"reports in {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="segpoison", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, poison=False):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="overrides every seed in the config")
        p.add_argument("--out", help="output path")
        if poison:
            p.add_argument("--mode", choices=("conseg", "fgba", "iba_lite"))
            p.add_argument("--rate", type=float, help="poisoning rate")
            p.add_argument("--t", type=int, help="number of co-occurring classes")
            p.add_argument("--p", type=int, help="pixels per co-occurring class")
        return p

    p = common(sub.add_parser("generate", help="write a synthetic street dataset"))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("cooccur", help="co-occurrence table and top-t classes for a target")
    p.add_argument("--dataset", required=True)
    p.add_argument("--target", required=True, help="class name or id")
    p.add_argument("--victim", nargs="+", default=[], help="class names or ids to exclude")
    p.add_argument("--t", type=int, default=3)
    p.add_argument("--out", help="CSV output (default stdout)")
    p.set_defaults(func=cmd_cooccur)

    p = common(sub.add_parser("poison", help="poison a dataset and write the audit log"), poison=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_poison)

    p = common(sub.add_parser("train", help="train a model on a dataset"))
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="MIoU/PA on a test set, ASR with a poison log's trigger"))
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--log", help="poison log whose trigger is injected into test images")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("defend", help="run a defense"))
    p.add_argument("kind", choices=("strip", "dct", "finetune"))
    p.add_argument("--model")
    p.add_argument("--test")
    p.add_argument("--log")
    p.add_argument("--clean", help="clean set (DCT negatives, or the fine-tuning pool)")
    p.add_argument("--suspect", help="poisoned set for DCT")
    p.add_argument("--scores", help="per-sample score CSV")
    p.set_defaults(func=cmd_defend)

    p = common(sub.add_parser("reproduce", help="multi-seed comparison and ablation sweeps"), poison=True)
    p.add_argument("--jobs", type=int, default=1, help="seeds run in parallel")
    p.set_defaults(func=cmd_reproduce)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
