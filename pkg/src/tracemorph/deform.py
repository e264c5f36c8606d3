"""Stationary-velocity-field diffeomorphisms.

A deformation is stored as a displacement ``u`` with phi(p) = p + u(p).
The flow endpoint of a velocity field is computed by scaling and squaring:
start from the near-identity step Id + v / 2**T and square T times,
phi^(1/2^t) = phi^(1/2^(t+1)) o phi^(1/2^(t+1)). The inverse deformation is
the same construction on the negated velocity.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from tracemorph.grid import (
    Image2D,
    VectorField2D,
    gradient_values,
    identity_grid,
    sample_values,
)

DEFAULT_SQUARING_STEPS = 7


@dataclass(frozen=True)
class IntegrationConfig:
    """Number of squaring steps T (the scaling divisor is 2**T)."""

    steps: int = DEFAULT_SQUARING_STEPS

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("integration needs at least one squaring step")


@dataclass(frozen=True)
class DeformationField:
    """phi(p) = p + disp(p), displacement in pixels."""

    disp: VectorField2D

    @property
    def height(self) -> int:
        return self.disp.height

    @property
    def width(self) -> int:
        return self.disp.width

    @staticmethod
    def identity(height: int, width: int) -> "DeformationField":
        return DeformationField(VectorField2D.zeros(height, width))


# ---------------------------------------------------------------------------
# tensor-level operations (differentiable)
# ---------------------------------------------------------------------------

def compose_disp(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Displacement of a o b: u(p) = u_b(p) + u_a(p + u_b(p))."""
    if a.shape != b.shape:
        raise ValueError(f"displacement shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    grid = identity_grid(a.shape[1], a.shape[2], dtype=a.dtype)
    return b + sample_values(a, grid + b)


def integrate_velocity(v: torch.Tensor, steps: int = DEFAULT_SQUARING_STEPS) -> torch.Tensor:
    """Scaling-and-squaring flow endpoint of a stationary velocity (2, H, W)."""
    if not bool(torch.isfinite(v).all()):
        raise ValueError("velocity field contains non-finite values")
    u = v / float(2**steps)
    for _ in range(steps):
        u = compose_disp(u, u)
    return u


def jacobian_determinant_disp(disp: torch.Tensor) -> torch.Tensor:
    """Per-pixel determinant of the forward-difference Jacobian of p + u(p)."""
    if disp.shape[1] < 2 or disp.shape[2] < 2:
        raise ValueError("field must be at least 2x2")
    gx = gradient_values(disp[0])  # (2, H, W): du_x/dx, du_x/dy
    gy = gradient_values(disp[1])
    return (1.0 + gx[0]) * (1.0 + gy[1]) - gx[1] * gy[0]


def smoothness_loss_disp(v: torch.Tensor) -> torch.Tensor:
    """Mean of squared forward-difference gradient components over channels
    and pixels: sum_c sum_p (|dv_c/dx|^2 + |dv_c/dy|^2) / (C * H * W)."""
    if not bool(torch.isfinite(v).all()):
        raise ValueError("velocity field contains non-finite values")
    total = torch.zeros((), dtype=v.dtype)
    for c in range(v.shape[0]):
        g = gradient_values(v[c])
        total = total + (g * g).sum()
    return total / float(v.numel())


# ---------------------------------------------------------------------------
# wrapper API
# ---------------------------------------------------------------------------

def integrate(v: VectorField2D, cfg: IntegrationConfig = IntegrationConfig()) -> DeformationField:
    return DeformationField(VectorField2D(integrate_velocity(v.u, cfg.steps)))


def inverse(v: VectorField2D, cfg: IntegrationConfig = IntegrationConfig()) -> DeformationField:
    return DeformationField(VectorField2D(integrate_velocity(-v.u, cfg.steps)))


def compose(a: DeformationField, b: DeformationField) -> DeformationField:
    return DeformationField(VectorField2D(compose_disp(a.disp.u, b.disp.u)))


def jacobian_determinant(phi: DeformationField) -> Image2D:
    return Image2D(jacobian_determinant_disp(phi.disp.u))


def smoothness_loss(v: VectorField2D) -> torch.Tensor:
    return smoothness_loss_disp(v.u)


def positive_jacobian_fraction(phi: DeformationField) -> float:
    """Fraction of interior pixels (forward differences defined) with det > 0."""
    det = jacobian_determinant_disp(phi.disp.u)
    interior = det[:-1, :-1]
    return float((interior > 0).double().mean())


def residual_displacement(a: DeformationField, b: DeformationField) -> tuple[float, float]:
    """Mean and max |a o b - Id| over pixels, in pixels."""
    r = compose_disp(a.disp.u, b.disp.u)
    mag = torch.sqrt((r * r).sum(dim=0))
    return float(mag.mean()), float(mag.max())


def smooth_random_velocity(
    height: int,
    width: int,
    max_mag: float = 3.0,
    sigma: float = 6.0,
    seed: int = 0,
    dtype: torch.dtype = torch.float64,
) -> VectorField2D:
    """Gaussian-smoothed noise velocity scaled so max |component| = max_mag.

    This is the reference field class for integrator/inverse diagnostics.
    """
    from scipy.ndimage import gaussian_filter
    import numpy as np

    rng = np.random.default_rng(seed)
    v = rng.standard_normal((2, height, width))
    v = np.stack([gaussian_filter(v[c], sigma, mode="reflect") for c in range(2)])
    v = v * (max_mag / np.abs(v).max())
    return VectorField2D(torch.as_tensor(v, dtype=dtype))
