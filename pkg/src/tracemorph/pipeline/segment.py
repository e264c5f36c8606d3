"""Target-domain segmenters and mask metrics for the adaptation evaluation.

The default segmenter fits an Otsu threshold on the target images, picks the
polarity that matches the target labels best, and keeps the largest connected
component. A tiny trained conv net is available as a config choice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from tracemorph.grid import Image2D
from tracemorph.pipeline.data import SyntheticCase
from tracemorph.rng import torch_generator


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Threshold maximizing inter-class variance of a [0, 1] intensity pool."""
    hist, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    total = hist.sum()
    if total == 0:
        raise ValueError("empty intensity pool")
    p = hist / total
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_total = mu[-1]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_total * w0 - mu) ** 2 / (w0 * w1)
    between[~valid] = -1.0
    return float(centers[int(np.argmax(between))])


def largest_component(mask: np.ndarray) -> np.ndarray:
    labeled, count = ndimage.label(mask)
    if count == 0:
        return np.zeros_like(mask)
    sizes = ndimage.sum(mask, labeled, index=range(1, count + 1))
    keep = 1 + int(np.argmax(sizes))
    return (labeled == keep).astype(mask.dtype)


@dataclass(frozen=True)
class ThresholdSegmenter:
    threshold: float
    bright_foreground: bool

    def __call__(self, img: Image2D) -> Image2D:
        a = img.numpy()
        raw = a > self.threshold if self.bright_foreground else a < self.threshold
        return Image2D.from_array(largest_component(raw.astype(np.float32)))


class TinyNetSegmenter:
    """Two-layer conv net trained with a logistic loss; deterministic given
    its seed. Slower than the threshold fit but intensity-profile free."""

    def __init__(self, net: torch.nn.Module):
        self.net = net

    def __call__(self, img: Image2D) -> Image2D:
        with torch.no_grad():
            logits = self.net(img.data.unsqueeze(0).unsqueeze(0))
        raw = (torch.sigmoid(logits)[0, 0] > 0.5).float().numpy()
        return Image2D.from_array(largest_component(raw))


def fit_segmenter(cases_b: list[SyntheticCase], kind: str = "threshold", seed: int = 0, steps: int = 300):
    if not cases_b:
        raise ValueError("cannot fit a segmenter on an empty set")
    if kind == "threshold":
        pooled = np.concatenate([c.image.numpy().ravel() for c in cases_b])
        thr = otsu_threshold(pooled)

        def mean_dice(bright: bool) -> float:
            seg = ThresholdSegmenter(thr, bright)
            return float(
                np.mean([mask_metrics(seg(c.image), c.mask)["dice"] for c in cases_b[:20]])
            )

        bright = mean_dice(True) >= mean_dice(False)
        return ThresholdSegmenter(thr, bright)
    if kind == "tiny-net":
        net = torch.nn.Sequential(
            torch.nn.Conv2d(1, 8, 3, padding=1),
            torch.nn.SiLU(),
            torch.nn.Conv2d(8, 8, 3, padding=1),
            torch.nn.SiLU(),
            torch.nn.Conv2d(8, 1, 3, padding=1),
        )
        gen = torch_generator(seed, "tiny-seg")
        with torch.no_grad():
            for p in net.parameters():
                if p.ndim > 1:
                    p.copy_(0.2 * torch.randn(p.shape, generator=gen))
                else:
                    p.zero_()
        opt = torch.optim.Adam(net.parameters(), lr=2e-3)
        images = torch.stack([c.image.data for c in cases_b]).unsqueeze(1)
        masks = torch.stack([c.mask.data for c in cases_b]).unsqueeze(1)
        for _ in range(steps):
            idx = torch.randint(len(cases_b), (4,), generator=gen)
            logits = net(images[idx])
            loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, masks[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        net.eval()
        return TinyNetSegmenter(net)
    raise ValueError(f"unknown segmenter kind {kind!r}")


def segment(model, img: Image2D) -> Image2D:
    return model(img)


# ---------------------------------------------------------------------------
# mask metrics
# ---------------------------------------------------------------------------

def mask_metrics(pred: Image2D, truth: Image2D) -> dict[str, float]:
    """Accuracy, Dice, foreground IoU, and the two-class mean IoU."""
    p = pred.numpy() > 0.5
    t = truth.numpy() > 0.5
    if p.shape != t.shape:
        raise ValueError("mask shapes differ")
    tp = float(np.logical_and(p, t).sum())
    fp = float(np.logical_and(p, ~t).sum())
    fn = float(np.logical_and(~p, t).sum())
    tn = float(np.logical_and(~p, ~t).sum())
    acc = (tp + tn) / p.size

    def safe(num: float, den: float) -> float:
        return num / den if den > 0 else 1.0

    dice = safe(2 * tp, 2 * tp + fp + fn)
    iou_fg = safe(tp, tp + fp + fn)
    iou_bg = safe(tn, tn + fp + fn)
    return {"acc": acc, "dice": dice, "iou": iou_fg, "miou": (iou_fg + iou_bg) / 2}
