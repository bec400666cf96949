"""Static figure emitter.

Every figure is written twice: a PNG for eyes and a CSV data table for
machines. Reproducibility of a plotting run is judged on the CSV bytes;
raster output is never hashed.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import load_diagnostics, load_report
from .exceptions import DataError
from .training import read_trace


def _write_table(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def plot_trace(trace_path, out_dir, stem="loss_curve"):
    """Loss and learning-rate curves from a {step, loss, lr} trace."""
    entries = read_trace(trace_path)
    if not entries:
        raise DataError(f"{trace_path}: empty trace, nothing to plot")
    for i, entry in enumerate(entries, start=1):
        if not all(k in entry for k in ("step", "loss", "lr")):
            raise DataError(f"{trace_path} line {i}: record missing step/loss/lr")
    out_dir = Path(out_dir)
    steps = [e["step"] for e in entries]
    losses = [e["loss"] for e in entries]
    lrs = [e["lr"] for e in entries]

    csv_path = _write_table(
        out_dir / f"{stem}.csv", ["step", "loss", "lr"], zip(steps, losses, lrs)
    )

    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, sharex=True, figsize=(7, 5))
    ax_loss.plot(steps, losses, lw=1.0)
    ax_loss.set_ylabel("loss")
    ax_lr.plot(steps, lrs, lw=1.0, color="tab:orange")
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    png_path = out_dir / f"{stem}.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def plot_reports(report_paths, out_dir):
    """MAE-vs-shots bars (llt/ft reports) or label-fraction curves (within)."""
    if not report_paths:
        raise DataError("no report files given")
    reports = [load_report(p) for p in report_paths]
    out_dir = Path(out_dir)
    written = []

    shot_reports = [r for r in reports if r.protocol in ("llt", "ft")]
    within_reports = [r for r in reports if r.protocol == "within"]

    if shot_reports:
        shot_reports.sort(key=lambda r: (r.protocol, r.k))
        rows = [
            (r.protocol, r.k, r.runs, r.seed, f"{r.mean:.10g}", f"{r.std:.10g}")
            for r in shot_reports
        ]
        written.append(
            _write_table(
                out_dir / "mae_vs_shots.csv",
                ["protocol", "k", "runs", "seed", "mean_deg", "std_deg"],
                rows,
            )
        )
        fig, ax = plt.subplots(figsize=(7, 4))
        protocols = sorted({r.protocol for r in shot_reports})
        width = 0.8 / len(protocols)
        ks = sorted({r.k for r in shot_reports})
        for p_idx, protocol in enumerate(protocols):
            sub = {r.k: r for r in shot_reports if r.protocol == protocol}
            xs = [ks.index(k) + p_idx * width for k in sub]
            ax.bar(
                xs,
                [r.mean for r in sub.values()],
                width=width,
                yerr=[r.std for r in sub.values()],
                capsize=3,
                label=protocol,
            )
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(ks))])
        ax.set_xticklabels([str(k) for k in ks])
        ax.set_xlabel("calibration samples k")
        ax.set_ylabel("MAE (deg)")
        ax.legend()
        fig.tight_layout()
        png = out_dir / "mae_vs_shots.png"
        fig.savefig(png, dpi=120)
        plt.close(fig)
        written.append(png)

    for w_idx, report in enumerate(within_reports):
        fractions = report.notes.get("fractions")
        if fractions is None:
            raise DataError("within report carries no fraction grid in notes")
        per_frac = np.asarray([report.per_subject[s] for s in sorted(report.per_subject)])
        means = per_frac.mean(axis=0)
        stds = per_frac.std(axis=0)
        stem = "label_fraction" if len(within_reports) == 1 else f"label_fraction_{w_idx}"
        rows = [
            (f, f"{m:.10g}", f"{s:.10g}") for f, m, s in zip(fractions, means, stds)
        ]
        written.append(
            _write_table(out_dir / f"{stem}.csv", ["fraction", "mean_deg", "std_deg"], rows)
        )
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.errorbar(fractions, means, yerr=stds, marker="o", capsize=3)
        ax.set_xlabel("label fraction")
        ax.set_ylabel("MAE (deg)")
        ax.set_xlim(0, 1.05)
        fig.tight_layout()
        png = out_dir / f"{stem}.png"
        fig.savefig(png, dpi=120)
        plt.close(fig)
        written.append(png)

    return written


def plot_diagnostics(diag_path, out_dir):
    """Embedding scatter plus the PoG-vs-embedding distance figure."""
    bundle = load_diagnostics(diag_path)
    out_dir = Path(out_dir)
    written = []

    proj = bundle.projection
    rows = [
        (f"{x:.10g}", f"{y:.10g}", p, v)
        for (x, y), p, v in zip(proj, bundle.projection_participants, bundle.projection_views)
    ]
    written.append(
        _write_table(
            out_dir / "embedding_scatter.csv", ["x", "y", "participant", "view"], rows
        )
    )
    fig, ax = plt.subplots(figsize=(6, 6))
    participants = sorted(set(bundle.projection_participants))
    for participant in participants:
        mask = [p == participant for p in bundle.projection_participants]
        ax.scatter(proj[mask, 0], proj[mask, 1], s=12, label=participant, alpha=0.7)
    ax.set_title(f"embedding projection ({bundle.mode})")
    if len(participants) <= 12:
        ax.legend(fontsize="small")
    fig.tight_layout()
    png = out_dir / "embedding_scatter.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    written.append(png)

    if bundle.pair_distances.size:
        pd = bundle.pair_distances
        rows = [(f"{e:.10g}", f"{g:.10g}") for e, g in pd]
        written.append(
            _write_table(
                out_dir / "pog_distance.csv", ["embedding_distance", "pog_distance"], rows
            )
        )
        fig, ax = plt.subplots(figsize=(6, 6))
        ax.scatter(pd[:, 0], pd[:, 1], s=8, alpha=0.5)
        lim = float(max(pd.max(), 1e-9))
        ax.plot([0, lim], [0, lim], ls="--", color="gray", lw=1.0, label="y = x")
        corr = "n/a" if bundle.correlation is None else f"{bundle.correlation:.3f}"
        ax.set_xlabel("embedding distance")
        ax.set_ylabel("PoG distance")
        ax.set_title(f"correlation: {corr}")
        ax.legend()
        fig.tight_layout()
        png = out_dir / "pog_distance.png"
        fig.savefig(png, dpi=120)
        plt.close(fig)
        written.append(png)

    return written
