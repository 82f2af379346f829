"""Command-line entry point: synth, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import DataError, SynthSpec, load_dataset, save_dataset, split_by_dialog, synth_dialogs
from .experiments import ablation_markdown, check_model_gradients, run_ablation, run_repeats
from .seqmodel import SYSTEMS, ConfigError, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import NumericError, ShapeError
from .trainer import TrainConfig, evaluate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get("CONVEMO_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of flag defaults (CLI flags still win)")
    p.add_argument("--seed", type=int, default=_default_seed(), help="random seed (fallback: $CONVEMO_SEED)")
    p.add_argument("--threads", type=int, default=1, help="evaluation worker threads; 1 is the reproducible mode")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=int, default=100, help="model dimension (fusion layers, GRU output, attention states)")
    p.add_argument("--heads", type=int, default=4, help="attention heads")
    p.add_argument("--scaled-attention", action="store_true", help="divide attention scores by sqrt(d/heads)")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=20, help="dialogs per batch")
    p.add_argument("--dropout", type=float, default=0.2, help="dropout probability on the attention output")
    p.add_argument("--l2", type=float, default=1e-5, help="L2 coefficient added to gradients")
    p.add_argument("--epochs", type=int, default=200, help="maximum epochs")
    p.add_argument("--patience", type=int, default=20, help="early-stop patience on validation UA (0 disables)")
    p.add_argument("--repeats", type=int, default=1, help="independent runs with seeds seed..seed+N-1")
    p.add_argument("--no-plots", action="store_true", help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="convemo", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic train/test dialog files", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--out-dir", type=Path, default=Path("data"))
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--dialogs", type=int, default=200)
    p.add_argument("--regime", choices=["pointwise", "contextual", "speaker"], default="pointwise")
    p.add_argument("--sigma", type=float, default=0.1, help="feature noise std")
    p.add_argument("--d-a", type=int, default=8, help="acoustic feature dim")
    p.add_argument("--d-t", type=int, default=8, help="lexical feature dim")
    p.add_argument("--d-s", type=int, default=4, help="speaker embedding dim")
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--speakers", type=int, default=10, help="speaker count (sessions of two)")
    p.add_argument("--train-fraction", type=float, default=0.8)

    p = sub.add_parser("train", help="train one system preset", formatter_class=fmt)
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--system", choices=sorted(SYSTEMS), default="S5")
    p.add_argument("--data", type=Path, required=True, help="training dataset (JSON lines)")
    p.add_argument("--val", type=Path, help="held-out dataset for UA tracking and early stopping")
    p.add_argument("--out", type=Path, default=Path("run"), help="output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="metrics JSON path (default: stdout only)")
    p.add_argument("--dump-attn", type=Path, help="CSV of per-utterance fusion weights")
    p.add_argument("--plots", type=Path, help="directory for confusion/fusion-weight figures")

    p = sub.add_parser("ablate", help="train S1..S5 and report a UA table", formatter_class=fmt)
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--systems", default="S1,S2,S3,S4,S5", help="comma-separated subset")
    p.add_argument("--out", type=Path, default=Path("ablation"))

    p = sub.add_parser("gradcheck", help="finite-difference check of all model gradients", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--system", choices=sorted(SYSTEMS), default="S5")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--length", type=int, default=4, help="utterances per dialog")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--dialogs", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            overrides = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error("--config must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        known = {a.dest for a in sub._actions}  # noqa: SLF001
        unknown = sorted(set(k.replace("-", "_") for k in overrides) - known)
        if unknown:
            parser.error(f"--config has unknown keys: {unknown}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    return args


# --- helpers ---------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _class_balance(dialogs, n_classes: int) -> list[int]:
    counts = np.zeros(n_classes, dtype=int)
    for d in dialogs:
        counts += np.bincount(d.labels, minlength=n_classes)
    return counts.tolist()


def _configs(args, meta, system: str | None) -> tuple[dict, TrainConfig]:
    base = dict(d_a=meta.d_a, d_t=meta.d_t, d_s=meta.d_s, n_classes=meta.c, d=args.d, h=args.heads,
                dropout_p=args.dropout, scaled_attention=args.scaled_attention)
    if system is not None:
        ModelConfig.for_system(system, **base)  # fail fast on bad dims
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, l2_coeff=args.l2,
                       dropout_p=args.dropout, seed=args.seed, patience=args.patience)
    return base, tcfg


def _write_log_csv(path: Path, log_rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "train_ua", "val_ua", "seconds"])
        for e in log_rows:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.train_ua), repr(e.val_ua), f"{e.seconds:.4f}"])


# --- commands --------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_classes=args.classes, d_a=args.d_a, d_t=args.d_t, d_s=args.d_s, n_dialogs=args.dialogs,
        min_len=args.min_len, max_len=args.max_len, n_speakers=args.speakers, sigma=args.sigma,
        regime=args.regime,
    )
    try:
        spec.validate()
    except DataError as exc:
        raise UsageError(str(exc)) from exc
    if not 0.0 < args.train_fraction < 1.0:
        raise UsageError(f"--train-fraction must be in (0, 1), got {args.train_fraction}")
    meta, dialogs = synth_dialogs(spec, args.seed)
    train_d, test_d = split_by_dialog(dialogs, args.train_fraction, args.seed)
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        save_dataset(args.out_dir / "train.jsonl", replace(meta, split_tag=f"{meta.split_tag}-train"), train_d)
        save_dataset(args.out_dir / "test.jsonl", replace(meta, split_tag=f"{meta.split_tag}-test"), test_d)
    except OSError as exc:
        raise DataError(f"cannot write to {args.out_dir}: {exc}") from exc
    for name, part in (("train", train_d), ("test", test_d)):
        n_utt = sum(len(d) for d in part)
        balance = dict(zip(meta.class_names, _class_balance(part, meta.c)))
        print(f"{name}: {len(part)} dialogs, {n_utt} utterances, class balance {balance}")
    print(f"wrote {args.out_dir / 'train.jsonl'} and {args.out_dir / 'test.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    meta, dialogs = load_dataset(args.data)
    val = load_dataset(args.val)[1] if args.val else None
    base, tcfg = _configs(args, meta, args.system)
    cfg = ModelConfig.for_system(args.system, **base)
    args.out.mkdir(parents=True, exist_ok=True)
    echo = {"system": args.system, "model": cfg.to_json(), "train": vars(tcfg), "data": str(args.data),
            "val": str(args.val) if args.val else None, "repeats": args.repeats}
    print(f"config: {json.dumps(echo, sort_keys=True)}")
    _write_json(args.out / "config.json", echo)

    eval_set = val if val else dialogs
    summary = run_repeats(cfg, tcfg, dialogs, eval_set, args.repeats, val_dialogs=val, track_train_ua=True)
    for k, res in enumerate(summary.results):
        suffix = "" if k == 0 else f"_r{k}"
        save_checkpoint(args.out / f"checkpoint{suffix}.json", res.model)
        _write_log_csv(args.out / f"train_log{suffix}.csv", res.log)
        metrics = evaluate(res.model, eval_set, threads=args.threads)
        _write_json(args.out / f"metrics{suffix}.json", metrics.to_json(meta.class_names))
        if k == 0 and not args.no_plots:
            from .plotting import plot_confusion, plot_training_curve

            plot_training_curve(res.log, args.out / "training_curve.png")
            plot_confusion(metrics.confusion, meta.class_names, args.out / "confusion.png",
                           title=f"{args.system} UA={metrics.unweighted_accuracy:.3f}")
        last = res.log[-1] if res.log else None
        loss_txt = f"{last.train_loss:.4f}" if last else "n/a"
        print(f"run {k} (seed {tcfg.seed + k}): epochs={len(res.log)} best_epoch={res.best_epoch} "
              f"final_loss={loss_txt} UA={summary.uas[k]:.4f}")
    label = "val" if val else "train"
    print(f"{label} UA over {args.repeats} run(s): {100 * summary.mean:.2f} ± {100 * summary.std:.2f} %")
    if args.repeats > 1:
        _write_json(args.out / "repeats.json", {"system": args.system, "uas": summary.uas,
                                                 "ua_mean": summary.mean, "ua_std": summary.std})
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{args.checkpoint}: malformed checkpoint: {exc}") from exc
    meta, dialogs = load_dataset(args.data)
    cfg = model.config
    if (meta.d_a, meta.d_t, meta.d_s, meta.c) != (cfg.d_a, cfg.d_t, cfg.d_s, cfg.n_classes):
        raise DataError(
            f"dataset dims (d_a={meta.d_a}, d_t={meta.d_t}, d_s={meta.d_s}, c={meta.c}) do not match the "
            f"checkpoint (d_a={cfg.d_a}, d_t={cfg.d_t}, d_s={cfg.d_s}, c={cfg.n_classes})"
        )
    metrics = evaluate(model, dialogs, threads=args.threads)
    doc = metrics.to_json(meta.class_names)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text, encoding="utf-8")
    sys.stdout.write(text)

    alphas = None
    if args.dump_attn or args.plots:
        alphas = []
        for chunk_start in range(0, len(dialogs), 64):
            chunk = dialogs[chunk_start:chunk_start + 64]
            _, al = model.predict_batch(chunk)
            alphas.extend(zip(chunk, al))
    labels = ["alpha_a", "alpha_t", "alpha_s"][: cfg.fusion_mode.n_modalities]
    if args.dump_attn:
        if not cfg.fusion_mode.uses_attention:
            raise UsageError("--dump-attn needs an attention fusion model (ATS or AT), this one uses ADD")
        args.dump_attn.parent.mkdir(parents=True, exist_ok=True)
        with args.dump_attn.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["utt_id"] + labels)
            for dialog, al in alphas:
                for t, row in enumerate(al):
                    w.writerow([f"{dialog.id}/{t}"] + [repr(float(x)) for x in row])
    if args.plots:
        from .plotting import plot_confusion, plot_fusion_weights

        plot_confusion(metrics.confusion, meta.class_names, args.plots / "confusion.png",
                       title=f"UA={metrics.unweighted_accuracy:.3f}")
        if cfg.fusion_mode.uses_attention:
            plot_fusion_weights(np.concatenate([al for _, al in alphas]), labels, args.plots / "fusion_weights.png")
    return EXIT_OK


def cmd_ablate(args) -> int:
    systems = [s.strip() for s in args.systems.split(",") if s.strip()]
    bad = [s for s in systems if s not in SYSTEMS]
    if bad or not systems:
        raise UsageError(f"unknown systems {bad}; choose from {sorted(SYSTEMS)}")
    meta, train_d = load_dataset(args.train)
    _, test_d = load_dataset(args.test)
    base, tcfg = _configs(args, meta, None)
    for s in systems:
        ModelConfig.for_system(s, **base)

    def progress(row):
        print(f"{row['system']}: UA {100 * row['ua_mean']:.2f} ± {100 * row['ua_std']:.2f} % "
              f"over {row['repeats']} run(s)", flush=True)

    rows = run_ablation(systems, base, tcfg, train_d, test_d, args.repeats, on_row=progress)
    args.out.mkdir(parents=True, exist_ok=True)
    with (args.out / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["system", "modalities", "fusion", "classifier", "ua_mean", "ua_std", "repeats"])
        for r in rows:
            w.writerow([r["system"], r["modalities"], r["fusion"], r["classifier"],
                        repr(r["ua_mean"]), repr(r["ua_std"]), r["repeats"]])
    table = ablation_markdown(rows)
    (args.out / "ablation.md").write_text(table + "\n", encoding="utf-8")
    _write_json(args.out / "ablation.json", rows)
    if not args.no_plots:
        from .plotting import plot_ablation

        plot_ablation(rows, args.out / "ablation.png")
    print(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = check_model_gradients(
        system=args.system, d=args.d, h=args.heads, length=args.length, n_classes=args.classes,
        n_dialogs=args.dialogs, seed=args.seed, tol=args.tol,
    )
    for line in report.lines():
        print(line)
    n_fail = len(report.failures())
    print(f"{len(report.checks)} tensors checked, {n_fail} failed at tol={args.tol:g}; "
          f"max rel err {report.max_rel_error:.3e}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = parse_args(argv)
    if args.threads < 1:
        print("convemo: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"convemo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, FileNotFoundError) as exc:
        print(f"convemo: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"convemo: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"convemo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
