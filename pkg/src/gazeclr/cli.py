"""Command-line entry point.

Subcommands: synth, pretrain, eval, diag, plot. Outputs land under --out in
a fixed layout (config.snapshot, checkpoints/, traces/, reports/, plots/).
Exit codes: 0 success, 2 usage, 3 config, 4 data validation, 5 divergence.
"""

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, SEED_ENV_VAR
from .data import load_manifest, synth_generate
from .evaluation import (
    embed_diagnostics,
    eval_finetune_bias,
    eval_llt,
    eval_within,
    save_diagnostics,
    save_report,
)
from .exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    GazeclrError,
)
from .model import GazeClrModel, load_checkpoint, save_checkpoint
from .training import pretrain, write_trace

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5


def _load_cfg(args):
    return RunConfig.load(
        path=getattr(args, "config", None),
        sets=getattr(args, "set", None) or (),
        seed=getattr(args, "seed", None),
        out=getattr(args, "out", None),
    )


def _parse_int_list(text, what):
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated integers, got {text!r}")


def _parse_float_list(text, what):
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}")


def cmd_synth(args):
    sets = [
        f"data.participants={args.participants}",
        f"data.groups={args.groups}",
        f"data.views={args.views}",
        f"data.size={args.size}",
    ]
    cfg = RunConfig.load(sets=sets, seed=args.seed, out=args.out)
    manifest = synth_generate(
        args.out,
        n_participants=args.participants,
        groups_per_participant=args.groups,
        views=args.views,
        image_size=args.size,
        seed=cfg.seed,
    )
    cfg.snapshot(args.out)
    print(
        f"wrote {len(manifest.records)} records "
        f"({args.participants} participants x {args.groups} groups x {args.views} views) "
        f"under {args.out}"
    )
    return EXIT_OK


def cmd_pretrain(args):
    cfg = _load_cfg(args)
    out = Path(args.out)
    manifest = load_manifest(args.data)
    model = GazeClrModel(cfg.encoder_config(), cfg.head_config(), seed=cfg.seed)
    train_cfg = cfg.train_config(variant=args.variant)
    init = load_checkpoint(args.init) if args.init else None

    result = pretrain(
        manifest, model, train_cfg, aug_cfg=cfg.augment_config(), init_checkpoint=init
    )

    cfg.snapshot(out)
    ckpt_path = save_checkpoint(result.checkpoint, out / "checkpoints" / "pretrain_final.ckpt")
    trace_path = write_trace(result.trace, out / "traces" / "pretrain.jsonl")
    meta = {
        "variant": train_cfg.variant,
        "iterations": train_cfg.iterations,
        "seed": cfg.seed,
        "data": str(args.data),
        "init": str(args.init) if args.init else None,
        "stats": result.stats,
        "final_loss": result.trace[-1]["loss"] if result.trace else None,
    }
    meta_path = out / "reports" / "pretrain_meta.json"
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    print(f"pretrained {train_cfg.variant} for {train_cfg.iterations} iterations")
    print(f"checkpoint: {ckpt_path}")
    print(f"trace: {trace_path}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_cfg(args)
    out = Path(args.out)
    eval_cfg = cfg.section("eval")
    checkpoint = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    runs = args.runs if args.runs is not None else eval_cfg["runs"]
    shots = (
        _parse_int_list(args.shots, "--shots") if args.shots else list(eval_cfg["shots"])
    )

    cfg.snapshot(out)
    reports_dir = out / "reports"
    summary_rows = []
    written = []

    if args.protocol == "within":
        if not args.val_data:
            print("usage error: --protocol within needs --val-data", file=sys.stderr)
            return EXIT_USAGE
        val_manifest = load_manifest(args.val_data)
        fractions = (
            _parse_float_list(args.fractions, "--fractions")
            if args.fractions
            else list(eval_cfg["fractions"])
        )
        report = eval_within(
            checkpoint,
            manifest,
            val_manifest,
            fractions=fractions,
            seed=cfg.seed,
            cfg=cfg.train_config(),
        )
        written.append(save_report(report, reports_dir / "within.json"))
        subjects = sorted(report.per_subject)
        for f_idx, fraction in enumerate(fractions):
            frac_mean = sum(report.per_subject[s][f_idx] for s in subjects) / len(subjects)
            summary_rows.append(("within", f"{fraction:g}", f"{frac_mean:.10g}"))
            print(f"within fraction={fraction:g}: MAE {frac_mean:.4f} deg")
    elif args.protocol == "llt":
        for k in shots:
            report = eval_llt(
                checkpoint,
                manifest,
                k=k,
                runs=runs,
                seed=cfg.seed,
                ridge_lambda=eval_cfg["ridge_lambda"],
            )
            written.append(save_report(report, reports_dir / f"llt_k{k}.json"))
            summary_rows.append(("llt", k, f"{report.mean:.10g}", f"{report.std:.10g}"))
            print(f"llt k={k}: MAE {report.mean:.4f} deg (std {report.std:.4f})")
    else:
        mode = args.mode or eval_cfg["mode"]
        for k in shots:
            report = eval_finetune_bias(
                checkpoint,
                manifest,
                k=k,
                runs=runs,
                seed=cfg.seed,
                cfg=cfg.train_config(),
                mode=mode,
            )
            written.append(save_report(report, reports_dir / f"ft_k{k}.json"))
            summary_rows.append(("ft", k, f"{report.mean:.10g}", f"{report.std:.10g}"))
            print(f"ft k={k}: MAE {report.mean:.4f} deg (std {report.std:.4f})")

    summary_path = reports_dir / f"{args.protocol}_summary.csv"
    summary_path.parent.mkdir(parents=True, exist_ok=True)
    with open(summary_path, "w") as fh:
        if args.protocol == "within":
            fh.write("protocol,fraction,mean_deg\n")
        else:
            fh.write("protocol,k,mean_deg,std_deg\n")
        for row in summary_rows:
            fh.write(",".join(str(c) for c in row) + "\n")
    print(f"reports: {', '.join(str(p) for p in written)}")
    return EXIT_OK


def cmd_diag(args):
    cfg = _load_cfg(args)
    out = Path(args.out)
    checkpoint = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    bundle = embed_diagnostics(
        checkpoint,
        manifest,
        mode=args.mode,
        seed=cfg.seed,
        max_samples=args.max_samples,
        n_pairs=args.pairs,
    )
    cfg.snapshot(out)
    path = save_diagnostics(bundle, out / "reports" / "diagnostics.json")
    corr = "n/a" if bundle.correlation is None else f"{bundle.correlation:.3f}"
    print(
        f"same-timestamp distance {bundle.same_timestamp_distance:.4f}, "
        f"mismatched {bundle.mismatched_distance:.4f}, PoG correlation {corr}"
    )
    for note in bundle.notes:
        print(f"note: {note}")
    print(f"diagnostics: {path}")
    return EXIT_OK


def cmd_plot(args):
    # imported lazily: matplotlib start-up is slow and only this command pays it
    from .plotting import plot_diagnostics, plot_reports, plot_trace

    if not (args.trace or args.report or args.diagnostics):
        print(
            "usage error: plot needs at least one of --trace/--report/--diagnostics",
            file=sys.stderr,
        )
        return EXIT_USAGE
    out = Path(args.out)
    plots_dir = out / "plots"
    cfg = _load_cfg(args)
    cfg.snapshot(out)
    written = []
    if args.trace:
        written += plot_trace(args.trace, plots_dir)
    if args.report:
        written += plot_reports(args.report, plots_dir)
    if args.diagnostics:
        written += plot_diagnostics(args.diagnostics, plots_dir)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gazeclr",
        description="Contrastive gaze representation learning: data, training, evaluation, plots.",
        epilog=f"Seed resolution: --seed flag, then config file, then ${SEED_ENV_VAR}, then 0.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic multi-view dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--participants", type=int, default=5)
    p.add_argument("--groups", type=int, default=400)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="Stage-I contrastive pre-training")
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--data", required=True, help="dataset directory (holds manifest.jsonl)")
    p.add_argument("--variant", choices=["equiv", "inv+equiv"], default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluation protocols")
    p.add_argument("--protocol", required=True, choices=["within", "llt", "ft"])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="target dataset directory")
    p.add_argument("--val-data", default=None, help="validation dataset (within protocol)")
    p.add_argument("--shots", default=None, help="comma-separated k grid")
    p.add_argument("--fractions", default=None, help="comma-separated label fractions (within)")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--mode", choices=["frozen", "full"], default=None, help="ft protocol mode")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diag", help="embedding-space diagnostics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["equivariant", "encoder"], default="equivariant")
    p.add_argument("--max-samples", type=int, default=600)
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("plot", help="render figures from traces/reports/diagnostics")
    p.add_argument("--trace", default=None, help="trace JSONL file")
    p.add_argument("--report", action="append", default=None, help="report JSON (repeatable)")
    p.add_argument("--diagnostics", default=None, help="diagnostics JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError, GazeclrError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
