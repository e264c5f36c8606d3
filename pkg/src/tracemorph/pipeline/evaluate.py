"""Adaptation-segmentation traceability evaluation and the metrics report.

For every translated case: predict a mask on the translated image, warp the
prediction back through the inverse deformation, and score it against the
source ground truth. Alongside the per-case table the report carries the
set-level distribution distances between the translated output and the target
domain, the no-translation baseline, and rendered summary figures.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from tracemorph.grid import Image2D, warp
from tracemorph.pipeline.config import write_meta
from tracemorph.pipeline.data import SyntheticCase
from tracemorph.pipeline.segment import mask_metrics, segment
from tracemorph.pipeline.translate import TraceBundle, list_bundles, read_bundle
from tracemorph.similarity import (
    ParzenConfig,
    bhattacharyya_distance,
    pooled_histogram,
    simplified_frechet,
)

REPORT_NAME = "report.txt"
CASES_NAME = "cases.tsv"


def warp_mask_back(mask: Image2D, bundle: TraceBundle) -> Image2D:
    """Warp a predicted mask through the stored inverse deformation."""
    warped = warp(mask, bundle.inverse_field)
    return Image2D((warped.data > 0.5).float())


def evaluate_traceability(
    bundle_root: str | Path,
    segmenter,
    source_cases: list[SyntheticCase],
    target_cases: list[SyntheticCase],
    out_dir: str | Path,
    bins: int = 32,
) -> dict[str, float]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources = {c.case_id: c for c in source_cases}
    dirs = list_bundles(bundle_root)
    if not dirs:
        raise FileNotFoundError(f"{bundle_root}: no bundles found")

    rows = []
    translated_imgs = []
    panels = []
    for d in dirs:
        bundle = read_bundle(d)
        case = sources.get(bundle.case_id)
        if case is None:
            raise KeyError(f"{bundle.case_id}: no source ground truth available")
        predicted = segment(segmenter, bundle.translated)
        warped_back = warp_mask_back(predicted, bundle)
        adapted = mask_metrics(warped_back, case.mask)
        baseline = mask_metrics(segment(segmenter, case.image), case.mask)
        translated_imgs.append(bundle.translated)
        if len(panels) < 4:
            panels.append((bundle, case, warped_back))
        rows.append(
            {
                "case_id": bundle.case_id,
                "acc": adapted["acc"],
                "dice": adapted["dice"],
                "iou": adapted["iou"],
                "miou": adapted["miou"],
                "baseline_dice": baseline["dice"],
                "baseline_acc": baseline["acc"],
                "residual_mean": float(bundle.meta.get("metric.residual_mean", "nan")),
                "residual_max": float(bundle.meta.get("metric.residual_max", "nan")),
            }
        )

    cfg_hist = ParzenConfig(bins=bins)
    target_imgs = [c.image for c in target_cases]
    source_imgs = [sources[r["case_id"]].image for r in rows]
    h_target = pooled_histogram(target_imgs, cfg_hist)
    h_translated = pooled_histogram(translated_imgs, cfg_hist)
    h_source = pooled_histogram(source_imgs, cfg_hist)

    summary = {
        "cases": float(len(rows)),
        "acc_mean": float(np.mean([r["acc"] for r in rows])),
        "dice_mean": float(np.mean([r["dice"] for r in rows])),
        "iou_mean": float(np.mean([r["iou"] for r in rows])),
        "miou_mean": float(np.mean([r["miou"] for r in rows])),
        "baseline_dice_mean": float(np.mean([r["baseline_dice"] for r in rows])),
        "baseline_acc_mean": float(np.mean([r["baseline_acc"] for r in rows])),
        "dbhat_translated_target": bhattacharyya_distance(h_translated, h_target),
        "dbhat_source_target": bhattacharyya_distance(h_source, h_target),
        "sfd_translated_target": simplified_frechet(translated_imgs, target_imgs),
        "sfd_source_target": simplified_frechet(source_imgs, target_imgs),
        "residual_mean_worst": float(np.max([r["residual_mean"] for r in rows])),
        "residual_max_worst": float(np.max([r["residual_max"] for r in rows])),
    }
    summary["dice_improvement"] = summary["dice_mean"] - summary["baseline_dice_mean"]

    _write_report(out, summary, rows)
    _render_figures(out, summary, rows, h_source, h_translated, h_target, panels, bins)
    return summary


def _write_report(out: Path, summary: dict[str, float], rows: list[dict]) -> None:
    write_meta(out / REPORT_NAME, {k: repr(v) for k, v in summary.items()})
    cols = [
        "case_id",
        "acc",
        "dice",
        "iou",
        "miou",
        "baseline_dice",
        "baseline_acc",
        "residual_mean",
        "residual_max",
    ]
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(r["case_id"] if c == "case_id" else repr(r[c]) for c in cols))
    (out / CASES_NAME).write_text("\n".join(lines) + "\n")


def _render_figures(
    out: Path,
    summary: dict[str, float],
    rows: list[dict],
    h_source,
    h_translated,
    h_target,
    panels: list[tuple[TraceBundle, SyntheticCase, Image2D]],
    bins: int,
) -> None:
    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    centers = (np.arange(bins) + 0.5) / bins

    fig, ax = plt.subplots(figsize=(6, 3.4))
    ax.plot(centers, h_source.p, label="source", color="tab:blue")
    ax.plot(centers, h_translated.p, label="translated", color="tab:orange")
    ax.plot(centers, h_target.p, label="target", color="tab:green", ls="--")
    ax.set_xlabel("intensity")
    ax.set_ylabel("probability")
    ax.set_title(
        f"D_bhat to target: source {summary['dbhat_source_target']:.3f}, "
        f"translated {summary['dbhat_translated_target']:.3f}"
    )
    ax.legend()
    fig.tight_layout()
    fig.savefig(fig_dir / "intensity_histograms.png", dpi=110)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.4))
    dices = sorted(r["dice"] for r in rows)
    base = sorted(r["baseline_dice"] for r in rows)
    ax.plot(dices, np.linspace(0, 1, len(dices)), label=f"adapted (mean {summary['dice_mean']:.3f})")
    ax.plot(base, np.linspace(0, 1, len(base)), label=f"baseline (mean {summary['baseline_dice_mean']:.3f})")
    ax.set_xlabel("Dice")
    ax.set_ylabel("fraction of cases")
    ax.set_title("segmentation Dice, adapted vs no-translation baseline")
    ax.legend()
    fig.tight_layout()
    fig.savefig(fig_dir / "dice_distribution.png", dpi=110)
    plt.close(fig)

    n_show = len(panels)
    if n_show == 0:
        return
    fig, axes = plt.subplots(n_show, 5, figsize=(11, 2.3 * n_show), squeeze=False)
    titles = ["source", "structure (deformed)", "translated", "prediction warped back", "truth"]
    for i, (bundle, case, warped_back) in enumerate(panels):
        images = [
            bundle.source.numpy(),
            bundle.structure_deformed.numpy(),
            bundle.translated.numpy(),
            warped_back.numpy(),
            case.mask.numpy(),
        ]
        for j, (panel, title) in enumerate(zip(images, titles)):
            axes[i][j].imshow(panel, cmap="gray", vmin=0, vmax=1)
            axes[i][j].set_xticks([])
            axes[i][j].set_yticks([])
            if i == 0:
                axes[i][j].set_title(title, fontsize=9)
        axes[i][0].set_ylabel(bundle.case_id, fontsize=8)
    fig.tight_layout()
    fig.savefig(fig_dir / "case_panels.png", dpi=110)
    plt.close(fig)
