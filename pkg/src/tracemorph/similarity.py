"""Differentiable Parzen-window mutual information, the registration objective,
feature alignment, and the distribution metrics used by evaluation.

The mutual-information score is the normalized ratio
(H(a) + H(b)) / H(a, b); it is larger for better alignment, so the
registration optimizer maximizes the data term while minimizing the
smoothness and alignment penalties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from tracemorph.deform import integrate_velocity, smoothness_loss_disp
from tracemorph.grid import Image2D, warp_values

JOINT_ENTROPY_FLOOR = 1e-6
BHATTACHARYYA_FLOOR = 1e-12


class DegenerateEntropyError(ValueError):
    """Raised when a joint histogram is too concentrated to optimize through."""


@dataclass(frozen=True)
class ParzenConfig:
    bins: int = 32
    window_sigma: float | None = None  # intensity units; default = one bin width
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self) -> None:
        if self.bins < 2:
            raise ValueError("need at least 2 bins")
        if self.window_sigma is not None and self.window_sigma <= 0:
            raise ValueError("window sigma must be positive")

    @property
    def sigma(self) -> float:
        lo, hi = self.value_range
        return self.window_sigma if self.window_sigma is not None else (hi - lo) / self.bins

    def centers(self, dtype: torch.dtype) -> torch.Tensor:
        lo, hi = self.value_range
        step = (hi - lo) / self.bins
        return lo + step * (torch.arange(self.bins, dtype=dtype) + 0.5)


@dataclass(frozen=True)
class Histogram:
    p: np.ndarray  # (bins,) marginal or (bins, bins) joint; sums to 1

    def __post_init__(self) -> None:
        a = np.asarray(self.p, dtype=np.float64)
        if np.any(a < -1e-12):
            raise ValueError("histogram entries must be nonnegative")
        if abs(a.sum() - 1.0) > 1e-9:
            raise ValueError(f"histogram must sum to 1, got {a.sum()!r}")
        object.__setattr__(self, "p", a)


def _bin_weights(values: torch.Tensor, cfg: ParzenConfig) -> torch.Tensor:
    """Per-pixel Gaussian kernel weights over bin centers, normalized to sum 1
    per pixel. Shape (N, bins); differentiable in ``values``."""
    lo, hi = cfg.value_range
    v = values.reshape(-1).clamp(lo, hi)
    centers = cfg.centers(v.dtype)
    d = (v.unsqueeze(1) - centers.unsqueeze(0)) / cfg.sigma
    w = torch.exp(-0.5 * d * d)
    # a pathologically narrow window can underflow every kernel; the floor
    # turns such rows into zeros instead of 0/0
    return w / w.sum(dim=1, keepdim=True).clamp_min(1e-30)


def joint_weights(a: torch.Tensor, b: torch.Tensor, cfg: ParzenConfig) -> torch.Tensor:
    """Joint Parzen histogram as a (bins, bins) tensor summing to 1."""
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    wa = _bin_weights(a, cfg)
    wb = _bin_weights(b, cfg)
    return wa.t().mm(wb) / float(wa.shape[0])


def entropy_tensor(p: torch.Tensor) -> torch.Tensor:
    """-sum p ln p with 0 ln 0 = 0.

    The floor is representable in float32, so zero-probability cells stay
    finite in both the value and the gradient.
    """
    return -(p * p.clamp_min(1e-30).log()).sum()


def mi_score(a: torch.Tensor, b: torch.Tensor, cfg: ParzenConfig) -> torch.Tensor:
    """(H(a) + H(b)) / H(a, b) on the shared Parzen joint; differentiable."""
    joint = joint_weights(a, b, cfg)
    h_joint = entropy_tensor(joint)
    h_value = float(h_joint.detach())
    if not np.isfinite(h_value) or h_value < JOINT_ENTROPY_FLOOR:
        raise DegenerateEntropyError(
            f"joint entropy {h_value:.2e} below {JOINT_ENTROPY_FLOOR:.0e}; "
            "image pair is too close to constant"
        )
    h_a = entropy_tensor(joint.sum(dim=1))
    h_b = entropy_tensor(joint.sum(dim=0))
    return (h_a + h_b) / h_joint


# ---------------------------------------------------------------------------
# wrapper API
# ---------------------------------------------------------------------------

def joint_parzen_histogram(a: Image2D, b: Image2D, cfg: ParzenConfig = ParzenConfig()) -> Histogram:
    joint = joint_weights(a.data.detach().to(torch.float64), b.data.detach().to(torch.float64), cfg)
    return Histogram(joint.numpy())


def parzen_histogram(a: Image2D, cfg: ParzenConfig = ParzenConfig()) -> Histogram:
    w = _bin_weights(a.data.detach().to(torch.float64), cfg)
    return Histogram(w.mean(dim=0).numpy())


def entropy(h: Histogram) -> float:
    p = h.p[h.p > 0]
    return float(-(p * np.log(p)).sum())


def mi_loss(y: Image2D, x_warped: Image2D, cfg: ParzenConfig = ParzenConfig()) -> torch.Tensor:
    return mi_score(y.data, x_warped.data, cfg)


def data_loss(
    x: torch.Tensor,
    y: torch.Tensor,
    v: torch.Tensor,
    v_inv: torch.Tensor,
    cfg: ParzenConfig = ParzenConfig(),
    integration_steps: int = 7,
) -> torch.Tensor:
    """Symmetric similarity: MI(x o C(v), y) + MI(x, y o C(v_inv)).

    Larger is better; the optimizer maximizes this term.
    """
    if x.shape != y.shape:
        raise ValueError("x and y must share a shape")
    fwd = integrate_velocity(v, integration_steps)
    bwd = integrate_velocity(v_inv, integration_steps)
    x_warped = warp_values(x, fwd)
    y_warped = warp_values(y, bwd)
    return mi_score(x_warped, y, cfg) + mi_score(x, y_warped, cfg)


def feature_alignment_loss(feat_pred: torch.Tensor, feat_target: torch.Tensor) -> torch.Tensor:
    """Mean squared difference; the target side is treated as fixed."""
    if feat_pred.shape != feat_target.shape:
        raise ValueError("feature grids must share a shape")
    diff = feat_pred - feat_target.detach()
    return (diff * diff).mean()


def total_deformation_loss(
    x: torch.Tensor,
    y: torch.Tensor,
    v: torch.Tensor,
    v_inv: torch.Tensor,
    feat_pred: torch.Tensor,
    feat_target: torch.Tensor,
    lambda1: float = 1.0,
    cfg: ParzenConfig = ParzenConfig(),
    integration_steps: int = 7,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Objective minimized by registration training:
    -data + lambda1 * (smooth(v) + smooth(v_inv)) + align.

    Returns the scalar objective and a breakdown of the raw terms.
    """
    data = data_loss(x, y, v, v_inv, cfg, integration_steps)
    smooth = smoothness_loss_disp(v) + smoothness_loss_disp(v_inv)
    align = feature_alignment_loss(feat_pred, feat_target)
    objective = -data + lambda1 * smooth + align
    parts = {
        "data": float(data.detach()),
        "smooth": float(smooth.detach()),
        "align": float(align.detach()),
        "objective": float(objective.detach()),
    }
    return objective, parts


# ---------------------------------------------------------------------------
# distribution metrics
# ---------------------------------------------------------------------------

def bhattacharyya_distance(p: Histogram, q: Histogram) -> float:
    """-ln of the Bhattacharyya coefficient, floored at 1e-12 before the log."""
    if p.p.shape != q.p.shape:
        raise ValueError("histograms must have the same bin layout")
    coeff = float(np.sqrt(p.p * q.p).sum())
    return float(-np.log(max(coeff, BHATTACHARYYA_FLOOR)))


def simplified_frechet(a: list[Image2D] | np.ndarray, b: list[Image2D] | np.ndarray) -> float:
    """Squared Frechet distance between 1-D Gaussian fits of the pooled
    intensities of each set: (mu_a - mu_b)^2 + (sigma_a - sigma_b)^2."""

    def pooled(s) -> np.ndarray:
        if isinstance(s, np.ndarray):
            return s.ravel().astype(np.float64)
        arrs = [im.numpy().ravel() for im in s]
        if not arrs:
            raise ValueError("image set is empty")
        return np.concatenate(arrs).astype(np.float64)

    xa, xb = pooled(a), pooled(b)
    if xa.size == 0 or xb.size == 0:
        raise ValueError("image set is empty")
    return float((xa.mean() - xb.mean()) ** 2 + (xa.std() - xb.std()) ** 2)


def pooled_histogram(images: list[Image2D], cfg: ParzenConfig = ParzenConfig()) -> Histogram:
    """Parzen marginal of the pooled intensities of a set of images."""
    if not images:
        raise ValueError("image set is empty")
    flat = torch.cat([im.data.detach().to(torch.float64).reshape(-1) for im in images])
    w = _bin_weights(flat, cfg)
    return Histogram(w.mean(dim=0).numpy())
