"""Command-line interface: gen-data, train, sweep, attend, eval.

Every subcommand echoes its fully-resolved configuration into the output
directory before doing any work. Values resolve as: explicit flag > config
file (flat ``key = value`` lines) > built-in default.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .attention import ConfigError
from .data import GeneratorConfig, generate, load_dataset, save_dataset
from .models import ModelConfig, build_variant, load_checkpoint, save_checkpoint
from .train import (
    export_attention,
    paired_t_test,
    paired_uars,
    read_run_table,
    run_cv,
    sweep_windows,
    write_attention_series,
    write_plot_data,
    write_run_table,
    write_summary,
    write_sweep_table,
)

GEN_FLAGS = {
    "subjects": (int, 44),
    "per_subject": (int, 38),
    "minority": (float, 0.14),
    "min_len": (int, 160),
    "max_len": (int, 320),
    "event_min": (float, 2.0),
    "event_max": (float, 5.0),
    "event_shape": (str, "bump"),
    "amplitude": (float, 5.0),
    "noise": (float, 1.0),
    "subject_sigma": (float, 0.4),
    "distractor_rate": (float, 3.0),
    "distractor_dims": (lambda s: tuple(int(x) for x in s.replace(",", " ").split()),
                        (0, 1, 2)),
    "seed": (int, 0),
}

MODEL_FLAGS = {
    "variant": (str, "swan"),
    "d_model": (int, 10),
    "heads": (int, 2),
    "r": (int, 30),
    "s": (int, 15),
    "r_self": (int, 10),
    "max_len": (int, 1500),
    "depth": (int, 2),
    "epochs": (int, 30),
    "lr": (float, 1e-3),
    "batch_size": (int, 16),
    "seed": (int, 0),
}

RUN_FLAGS = {
    "seeds": (int, 5),
    "folds": (int, 5),
    "jobs": (int, 1),
}

DEFAULT_SWEEP_SECONDS = [0.5, 1.0, 3.0, 5.0, 10.0, 20.0]


def _parse_ranges(text: str):
    return [float(x) for x in text.replace(",", " ").split()]


def _load_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _resolve(args, tables: list[dict]) -> dict:
    """Merge flag > config-file > default for every known key."""
    spec = {}
    for table in tables:
        spec.update(table)
    file_values = _load_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = sorted(set(file_values) - set(spec))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    resolved = {}
    for name, (cast, default) in spec.items():
        flag = getattr(args, name, None)
        if flag is not None:
            resolved[name] = flag
        elif name in file_values:
            if cast is _parse_ranges:
                resolved[name] = _parse_ranges(file_values[name])
            else:
                resolved[name] = cast(file_values[name])
        else:
            resolved[name] = default
    return resolved


def _echo_config(out_dir: Path, subcommand: str, resolved: dict, extra: dict | None = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"subcommand = {subcommand}"]
    merged = dict(resolved)
    if extra:
        merged.update(extra)
    for key in sorted(merged):
        lines.append(f"{key} = {merged[key]}")
    (out_dir / "effective_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        variant=cfg["variant"], d_model=cfg["d_model"], heads=cfg["heads"],
        r=cfg["r"], s=cfg["s"], r_self=cfg["r_self"], max_len=cfg["max_len"],
        depth=cfg["depth"], epochs=cfg["epochs"], lr=cfg["lr"],
        batch_size=cfg["batch_size"], seed=cfg["seed"],
    )


def _seed_list(cfg: dict):
    return list(range(cfg["seed"], cfg["seed"] + cfg["seeds"]))


def _print_failures(failures):
    for (seed, fold), message in failures:
        print(f"FAILED run (fold={fold}, seed={seed}): {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _resolve(args, [GEN_FLAGS])
    out = Path(args.out)
    _echo_config(out, "gen-data", cfg)
    gen = GeneratorConfig(
        subjects=cfg["subjects"], per_subject=cfg["per_subject"],
        minority_fraction=cfg["minority"], min_len=cfg["min_len"],
        max_len=cfg["max_len"], event_duration_s=(cfg["event_min"], cfg["event_max"]),
        event_shape=cfg["event_shape"], amplitude=cfg["amplitude"],
        noise_level=cfg["noise"], subject_sigma=cfg["subject_sigma"],
        distractor_rate=cfg["distractor_rate"],
        distractor_dims=tuple(cfg["distractor_dims"]), seed=cfg["seed"],
    )
    samples = generate(gen)
    save_dataset(samples, out)
    minority = sum(1 for s in samples if s.label == 0)
    print(f"wrote {len(samples)} samples to {out}")
    print(f"minority (label 0): {minority} ({minority / len(samples):.1%})")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args, [MODEL_FLAGS, RUN_FLAGS])
    samples = load_dataset(args.data)
    out = Path(args.out)
    _echo_config(out, "train", cfg, {"data": args.data, "compare": args.compare})
    config = _model_config(cfg)
    seeds = _seed_list(cfg)
    cv = run_cv(samples, config, seeds, folds=cfg["folds"], jobs=cfg["jobs"],
                collect_errors=True,
                progress=lambda r: print(
                    f"run seed={r.seed} fold={r.fold}: test UAR {r.test_uar:.4f}"))
    if cv.runs:
        write_run_table(out / "runs.csv", cv.runs)
        write_summary(out / "summary.txt", cv)
        best = cv.best_run()
        model = build_variant(ModelConfig(**best.config))
        model.set_state(best.model_state)
        save_checkpoint(model, out / "best_checkpoint.json")
        print(f"{config.variant}: mean test UAR {cv.mean_uar:.4f} "
              f"+/- {cv.std_uar:.4f} over {len(cv.runs)} runs")
        print(f"best run: seed={best.seed} fold={best.fold} UAR {best.test_uar:.4f}")
    if args.compare and cv.runs:
        ours = read_run_table(out / "runs.csv")
        theirs = read_run_table(args.compare)
        a, b = paired_uars(ours, theirs)
        t, p = paired_t_test(a, b)
        (out / "compare.txt").write_text(
            f"compare = {args.compare}\nt = {t!r}\np = {p!r}\n"
            f"mean_delta = {float(np.mean(a - b))!r}\n", encoding="utf-8")
        print(f"paired t-test vs {args.compare}: t={t:.4f} p={p:.6f}")
    if cv.failures:
        _print_failures(cv.failures)
        return 1
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(args, [MODEL_FLAGS, RUN_FLAGS,
                          {"ranges": (_parse_ranges, DEFAULT_SWEEP_SECONDS)}])
    samples = load_dataset(args.data)
    out = Path(args.out)
    _echo_config(out, "sweep", cfg, {"data": args.data})
    config = _model_config(cfg)
    ranges_steps = [max(1, int(round(sec * 10))) for sec in cfg["ranges"]]
    report = sweep_windows(
        samples, config, ranges_steps, _seed_list(cfg), folds=cfg["folds"],
        jobs=cfg["jobs"],
        progress=lambda r: print(f"  run seed={r.seed} fold={r.fold} r={r.r}: "
                                 f"UAR {r.test_uar:.4f}"),
    )
    write_sweep_table(out / "sweep.csv", report)
    write_plot_data(out / "plot_data.csv", report)
    for p in report.points:
        print(f"{p.variant} r={p.r} ({p.r / 10:.1f}s): {p.mean_uar:.4f} +/- {p.std_uar:.4f}")
    for variant in report.variants():
        print(f"{variant} spread (max-min): {report.spread(variant):.4f}")
    return 0


def cmd_attend(args) -> int:
    cfg = _resolve(args, [{"sigma": (float, 5.0), "limit": (int, 8)}])
    samples = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    _echo_config(out, "attend", cfg, {"data": args.data, "checkpoint": args.checkpoint,
                                      "ids": " ".join(args.ids or [])})
    by_id = {s.segment_id: s for s in samples}
    if args.ids:
        missing = [i for i in args.ids if i not in by_id]
        if missing:
            preview = ", ".join(sorted(by_id)[:10])
            raise ConfigError(
                f"unknown sample ids {missing}; available ids start with: {preview} ..."
            )
        chosen = [by_id[i] for i in args.ids]
    else:
        chosen = [s for s in samples if s.event is not None][: cfg["limit"]]
        if not chosen:
            raise ConfigError("no event-annotated samples in the dataset; pass --ids")
    ratios = []
    marker_lines = ["segment_id,event_start,event_end,mass_ratio,probability"]
    for sample in chosen:
        export = export_attention(model, sample, smoothing_sigma=cfg["sigma"])
        write_attention_series(out / f"attn_{sample.segment_id}.csv", export.smoothed)
        if export.event is not None:
            start, end = export.event
            marker_lines.append(
                f"{sample.segment_id},{start},{end},{export.mass_ratio!r},{export.probability!r}"
            )
            ratios.append(export.mass_ratio)
            print(f"{sample.segment_id}: in-interval mass ratio {export.mass_ratio:.3f}")
        else:
            marker_lines.append(f"{sample.segment_id},,,,{export.probability!r}")
            print(f"{sample.segment_id}: no planted interval")
    (out / "intervals.csv").write_text("\n".join(marker_lines) + "\n", encoding="utf-8")
    if ratios:
        print(f"mean in-interval mass ratio: {float(np.mean(ratios)):.3f}")
    return 0


def cmd_eval(args) -> int:
    from .train import confusion, predict_labels, uar

    samples = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    _echo_config(out, "eval", {}, {"data": args.data, "checkpoint": args.checkpoint})
    preds = predict_labels(model, samples)
    labels = [s.label for s in samples]
    value = uar(preds, labels)
    tp, fp, tn, fn = confusion(preds, labels)
    text = (f"samples = {len(samples)}\nuar = {value!r}\n"
            f"tp = {tp}\nfp = {fp}\ntn = {tn}\nfn = {fn}\n")
    (out / "metrics.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_flags(parser, table):
    for name, (cast, _default) in table.items():
        flag = "--" + name.replace("_", "-")
        if cast is _parse_ranges:
            parser.add_argument(flag, dest=name, type=float, nargs="+", default=None)
        else:
            parser.add_argument(flag, dest=name, type=cast, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swan",
        description="Windowing-attention sequence classification toolkit",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic planted-event dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--config", default=None)
    _add_flags(gen, GEN_FLAGS)
    gen.set_defaults(func=cmd_gen_data)

    train_p = sub.add_parser("train", help="cross-validated training and evaluation")
    train_p.add_argument("--data", required=True)
    train_p.add_argument("--out", required=True)
    train_p.add_argument("--config", default=None)
    train_p.add_argument("--compare", default=None,
                         help="run table of another variant for a paired t-test")
    _add_flags(train_p, MODEL_FLAGS)
    _add_flags(train_p, RUN_FLAGS)
    train_p.set_defaults(func=cmd_train)

    sweep_p = sub.add_parser("sweep", help="window-range robustness sweep")
    sweep_p.add_argument("--data", required=True)
    sweep_p.add_argument("--out", required=True)
    sweep_p.add_argument("--config", default=None)
    sweep_p.add_argument("--ranges", dest="ranges", type=float, nargs="+", default=None,
                         help="window ranges in seconds")
    _add_flags(sweep_p, MODEL_FLAGS)
    _add_flags(sweep_p, RUN_FLAGS)
    sweep_p.set_defaults(func=cmd_sweep)

    attend_p = sub.add_parser("attend", help="export smoothed attention series")
    attend_p.add_argument("--data", required=True)
    attend_p.add_argument("--checkpoint", required=True)
    attend_p.add_argument("--out", required=True)
    attend_p.add_argument("--config", default=None)
    attend_p.add_argument("--ids", nargs="*", default=None)
    attend_p.add_argument("--sigma", dest="sigma", type=float, default=None)
    attend_p.add_argument("--limit", dest="limit", type=int, default=None)
    attend_p.set_defaults(func=cmd_attend)

    eval_p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    eval_p.add_argument("--data", required=True)
    eval_p.add_argument("--checkpoint", required=True)
    eval_p.add_argument("--out", required=True)
    eval_p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
