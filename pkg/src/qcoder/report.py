"""File outputs for evaluation runs: delimited tables, JSON, and
matplotlib figures rendered alongside them."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluate import EvalReport, cohen_kappa, rethreshold_vector
from .simmetric import SimilarityReport


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def write_eval_report(report: EvalReport, outdir: Path) -> list[Path]:
    """eval_report.{json,csv,txt} plus a per-code kappa bar figure."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    json_path = outdir / "eval_report.json"
    _write_json(json_path, report.to_dict())
    written.append(json_path)

    csv_path = outdir / "eval_report.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "code_id", "threshold", "tp", "fp", "fn", "tn",
                "kappa", "kappa_ci_lo", "kappa_ci_hi",
                "f1", "f1_ci_lo", "f1_ci_hi", "percent_agreement",
            ]
        )
        for c in report.per_code:
            t = c.code_tuned_threshold if c.code_tuned_threshold is not None else c.threshold_used
            k_ci = c.kappa_ci_95 or ("", "")
            f_ci = c.f1_ci_95 or ("", "")
            w.writerow(
                [
                    c.code_id, t if t is not None else "",
                    c.counts.tp, c.counts.fp, c.counts.fn, c.counts.tn,
                    c.kappa, k_ci[0], k_ci[1],
                    c.f1 if c.f1 is not None else "", f_ci[0], f_ci[1],
                    c.percent_agreement,
                ]
            )
    written.append(csv_path)

    txt_path = outdir / "eval_report.txt"
    txt_path.write_text(report.table() + "\n", encoding="utf-8")
    written.append(txt_path)

    if report.per_code:
        fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(report.per_code)), 4))
        names = [c.code_id for c in report.per_code]
        kappas = [c.kappa for c in report.per_code]
        bars = ax.bar(range(len(names)), kappas, color="#4878a8")
        for bar, c in zip(bars, report.per_code):
            if c.kappa_ci_95 is not None:
                lo, hi = c.kappa_ci_95
                ax.errorbar(
                    bar.get_x() + bar.get_width() / 2, c.kappa,
                    yerr=[[max(0.0, c.kappa - lo)], [max(0.0, hi - c.kappa)]],
                    fmt="none", ecolor="black", capsize=3,
                )
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel("Cohen's kappa")
        ax.set_ylim(-0.1, 1.05)
        ax.axhline(0, color="grey", linewidth=0.5)
        fig.tight_layout()
        fig_path = outdir / "eval_kappa.png"
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        written.append(fig_path)
    return written


def write_drift(
    curve: Sequence[tuple[int, float, float]], outdir: Path, window: int
) -> list[Path]:
    """drift.csv (index, fp_rate, fn_rate) plus the rolling-rate figure."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "drift.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["doc_index", "fp_rate", "fn_rate"])
        for i, fp, fn in curve:
            w.writerow([i, fp, fn])

    fig, ax = plt.subplots(figsize=(7, 4))
    xs = [i for i, _, _ in curve]
    ax.plot(xs, [fp for _, fp, _ in curve], label="false-positive rate", color="#b0413e")
    ax.plot(xs, [fn for _, _, fn in curve], label="false-negative rate", color="#4878a8")
    ax.set_xlabel("document index")
    ax.set_ylabel(f"rolling rate (window={window})")
    ax.legend()
    fig.tight_layout()
    fig_path = outdir / "drift.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [csv_path, fig_path]


def write_threshold_sweep(
    scores: Sequence[int],
    gold: Sequence[int],
    outdir: Path,
    thresholds: Sequence[int] = tuple(range(2, 11)),
    code_id: Optional[str] = None,
) -> list[Path]:
    """threshold_sweep.csv + kappa-vs-threshold figure for one code."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = [
        (t, cohen_kappa(rethreshold_vector(scores, t), list(gold))) for t in thresholds
    ]
    suffix = f"_{code_id}" if code_id else ""
    csv_path = outdir / f"threshold_sweep{suffix}.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "kappa"])
        w.writerows(rows)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([t for t, _ in rows], [k for _, k in rows], marker="o", color="#4878a8")
    best = max(rows, key=lambda r: (r[1], r[0]))
    ax.axvline(best[0], color="#b0413e", linestyle="--", label=f"best = {best[0]}")
    ax.set_xlabel("score threshold")
    ax.set_ylabel("Cohen's kappa")
    ax.legend()
    fig.tight_layout()
    fig_path = outdir / f"threshold_sweep{suffix}.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [csv_path, fig_path]


def write_similarity(report: SimilarityReport, outdir: Path) -> list[Path]:
    """similarity.{json,csv} plus a per-weighting mean-similarity figure."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    json_path = outdir / "similarity.json"
    _write_json(json_path, report.to_dict())

    csv_path = outdir / "similarity.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "mean_similarity"])
        for alpha in report.weights:
            w.writerow([alpha, report.per_weighting_mean[alpha]])
        w.writerow(["overall", report.s_bar])

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(
        report.weights,
        [report.per_weighting_mean[a] for a in report.weights],
        marker="o",
        color="#4878a8",
    )
    ax.axhline(report.s_bar, color="#b0413e", linestyle="--",
               label=f"overall = {report.s_bar:.3f}")
    ax.set_xlabel("semantic weight alpha")
    ax.set_ylabel("mean matched similarity")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig_path = outdir / "similarity.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [json_path, csv_path, fig_path]


def write_annotations_csv(annotations, path: Path) -> Path:
    """Flat delimited export of a run's annotations."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["excerpt_id", "code_id", "rater", "positive", "score",
             "run_id", "failed", "fallback", "reasoning"]
        )
        for a in annotations:
            w.writerow(
                [a.excerpt_id, a.code_id, a.rater, int(a.positive),
                 a.score if a.score is not None else "",
                 a.run_id, int(a.failed), int(a.fallback), a.reasoning or ""]
            )
    return path
