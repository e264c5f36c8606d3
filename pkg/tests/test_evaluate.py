import numpy as np
import pytest
import torch

from tracemorph.deform import DeformationField
from tracemorph.grid import Image2D, VectorField2D
from tracemorph.pipeline.config import read_meta
from tracemorph.pipeline.data import generate_dataset
from tracemorph.pipeline.evaluate import evaluate_traceability, warp_mask_back
from tracemorph.pipeline.segment import ThresholdSegmenter
from tracemorph.pipeline.translate import TraceBundle, write_bundle


def identity_bundle(case, translated: Image2D) -> TraceBundle:
    h, w = case.image.height, case.image.width
    return TraceBundle(
        case_id=case.case_id,
        source=case.image,
        translated=translated,
        structure_source=case.mask,
        structure_deformed=case.mask,
        forward_field=DeformationField.identity(h, w),
        inverse_field=DeformationField.identity(h, w),
        meta={
            "case_id": case.case_id,
            "metric.residual_mean": "0.0",
            "metric.residual_max": "0.0",
        },
    )


@pytest.fixture(scope="module")
def perfect_eval(tmp_path_factory):
    """Bundles whose translated image is the ground-truth mask under identity
    fields: the adaptation metrics must all be exactly 1."""
    root = tmp_path_factory.mktemp("bundles")
    out = tmp_path_factory.mktemp("eval")
    a, b = generate_dataset(5, seed=73)
    for case in a:
        write_bundle(root, identity_bundle(case, case.mask))
    segmenter = ThresholdSegmenter(threshold=0.5, bright_foreground=True)
    summary = evaluate_traceability(root, segmenter, a, b, out)
    return summary, out


def test_identity_predictions_score_exactly_one(perfect_eval):
    summary, _ = perfect_eval
    assert summary["acc_mean"] == 1.0
    assert summary["dice_mean"] == 1.0
    assert summary["iou_mean"] == 1.0
    assert summary["miou_mean"] == 1.0


def test_report_and_case_table_written(perfect_eval):
    summary, out = perfect_eval
    report = read_meta(out / "report.txt")
    assert float(report["dice_mean"]) == 1.0
    lines = (out / "cases.tsv").read_text().splitlines()
    assert lines[0].startswith("case_id\tacc\tdice")
    assert len(lines) == int(summary["cases"]) + 1


def test_figures_rendered(perfect_eval):
    _, out = perfect_eval
    for name in ("intensity_histograms.png", "dice_distribution.png", "case_panels.png"):
        assert (out / "figures" / name).stat().st_size > 1000, name


def test_missing_source_mask_is_an_error(tmp_path):
    a, b = generate_dataset(2, seed=79)
    root = tmp_path / "bundles"
    write_bundle(root, identity_bundle(a[0], a[0].mask))
    seg = ThresholdSegmenter(0.5, True)
    with pytest.raises(KeyError):
        evaluate_traceability(root, seg, [a[1]], b, tmp_path / "out")


def test_empty_bundle_dir_is_an_error(tmp_path):
    a, b = generate_dataset(1, seed=83)
    with pytest.raises(FileNotFoundError):
        evaluate_traceability(tmp_path, ThresholdSegmenter(0.5, True), a, b, tmp_path / "out")


def test_warp_mask_back_uses_inverse_field():
    a, _ = generate_dataset(1, seed=89)
    case = a[0]
    h, w = case.image.height, case.image.width
    shift = torch.zeros(2, h, w)
    shift[0] = 2.0  # inverse lookup shifts content left by two pixels
    bundle = TraceBundle(
        case_id=case.case_id,
        source=case.image,
        translated=case.mask,
        structure_source=case.mask,
        structure_deformed=case.mask,
        forward_field=DeformationField.identity(h, w),
        inverse_field=DeformationField(VectorField2D(shift)),
        meta={"case_id": case.case_id},
    )
    moved = warp_mask_back(case.mask, bundle)
    expected = np.zeros((h, w), dtype=np.float32)
    expected[:, :-2] = case.mask.numpy()[:, 2:]
    expected[:, -2:] = case.mask.numpy()[:, -1:]  # border replication
    np.testing.assert_array_equal(moved.numpy(), expected)
