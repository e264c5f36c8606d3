"""Finite-difference verification of every trainable loss.

Each check builds a small float64 instance, runs the shared gradient_check
harness, and reports the worst relative error. Fixtures keep sampling
coordinates away from the bilinear kinks (sign-definite velocities) and keep
L1 residuals bounded away from zero, so central differences are valid at
h = 1e-4; this constrains the fixtures, not the losses.
"""

from __future__ import annotations

import numpy as np
import torch

from tracemorph.deform import integrate_velocity, smoothness_loss_disp
from tracemorph.grid import warp_values
from tracemorph.networks import ConditionalDenoiser, NetConfig, RegistrationNet, gradient_check
from tracemorph.similarity import (
    ParzenConfig,
    data_loss,
    feature_alignment_loss,
    mi_score,
    total_deformation_loss,
)

TINY_NET = dict(base_channels=4, depth=2, gamma_embedding_dim=4, feature_channels=3)


def _uniform(gen: torch.Generator, shape, lo: float, hi: float) -> torch.Tensor:
    return lo + (hi - lo) * torch.rand(shape, generator=gen, dtype=torch.float64)


def _check_l_in(seed: int, tolerance: float) -> float:
    gen = torch.Generator().manual_seed(seed)
    net = ConditionalDenoiser(NetConfig(**TINY_NET, init_seed=seed)).double()
    with torch.no_grad():
        net.head.weight.add_(0.02 * torch.randn(net.head.weight.shape, generator=gen, dtype=torch.float64))
        net.head.bias.add_(0.01)
    y0 = _uniform(gen, (1, 1, 8, 8), 0.1, 0.9)
    cond = _uniform(gen, (1, 1, 8, 8), 0.1, 0.9)
    # noise magnitudes >= 0.3 keep the L1 residual sign fixed under h-perturbations
    eps = torch.randn((1, 1, 8, 8), generator=gen, dtype=torch.float64)
    eps = torch.sign(eps) * (eps.abs() + 0.3)
    gamma = 0.7
    noisy = np.sqrt(gamma) * y0 + np.sqrt(1 - gamma) * eps

    def closure():
        eps_hat = net(cond, noisy, torch.tensor([gamma], dtype=torch.float64))
        return (eps - eps_hat).abs().mean()

    report = gradient_check(closure, dict(net.named_parameters()), tolerance, max_coords_per_tensor=4, seed=seed)
    return report.max_rel_err


def _check_mi(seed: int, tolerance: float) -> float:
    gen = torch.Generator().manual_seed(seed)
    x = _uniform(gen, (6, 6), 0.1, 0.9)
    y = _uniform(gen, (6, 6), 0.1, 0.9)
    w = torch.randn((2, 6, 6), generator=gen, dtype=torch.float64).requires_grad_(True)

    def closure():
        v = 0.3 + 0.1 * torch.tanh(w)
        return mi_score(warp_values(x, integrate_velocity(v)), y, ParzenConfig())

    report = gradient_check(closure, {"w": w}, tolerance, max_coords_per_tensor=10, seed=seed)
    return report.max_rel_err


def _check_data(seed: int, tolerance: float) -> float:
    gen = torch.Generator().manual_seed(seed)
    x = _uniform(gen, (6, 6), 0.1, 0.9)
    y = _uniform(gen, (6, 6), 0.1, 0.9)
    wv = torch.randn((2, 6, 6), generator=gen, dtype=torch.float64).requires_grad_(True)
    wb = torch.randn((2, 6, 6), generator=gen, dtype=torch.float64).requires_grad_(True)

    def closure():
        v = 0.3 + 0.1 * torch.tanh(wv)
        vi = -0.3 - 0.1 * torch.tanh(wb)
        return data_loss(x, y, v, vi, ParzenConfig())

    report = gradient_check(closure, {"wv": wv, "wb": wb}, tolerance, max_coords_per_tensor=8, seed=seed)
    return report.max_rel_err


def _check_smoothness(seed: int, tolerance: float) -> float:
    gen = torch.Generator().manual_seed(seed)
    v = torch.randn((2, 8, 8), generator=gen, dtype=torch.float64).requires_grad_(True)
    report = gradient_check(
        lambda: smoothness_loss_disp(v), {"v": v}, tolerance, max_coords_per_tensor=12, seed=seed
    )
    return report.max_rel_err


def _check_alignment(seed: int, tolerance: float) -> float:
    gen = torch.Generator().manual_seed(seed)
    pred = torch.randn((3, 8, 8), generator=gen, dtype=torch.float64).requires_grad_(True)
    target = torch.randn((3, 8, 8), generator=gen, dtype=torch.float64)
    report = gradient_check(
        lambda: feature_alignment_loss(pred, target), {"pred": pred}, tolerance,
        max_coords_per_tensor=12, seed=seed,
    )
    return report.max_rel_err


def _check_total(seed: int, tolerance: float) -> float:
    gen = torch.Generator().manual_seed(seed)
    net = RegistrationNet(NetConfig(**TINY_NET, init_seed=seed)).double()
    with torch.no_grad():
        for head in (net.head_v, net.head_vinv):
            head.weight.add_(0.02 * torch.randn(head.weight.shape, generator=gen, dtype=torch.float64))
        net.head_v.bias.copy_(torch.tensor([0.3, 0.25], dtype=torch.float64))
        net.head_vinv.bias.copy_(torch.tensor([-0.3, -0.25], dtype=torch.float64))
    x = _uniform(gen, (1, 1, 8, 8), 0.1, 0.9)
    y = _uniform(gen, (1, 1, 8, 8), 0.1, 0.9)
    eps_hat = torch.randn((1, 1, 8, 8), generator=gen, dtype=torch.float64)
    target = net.aux_features(y, eps_hat).detach().clone()  # fixed per step

    def closure():
        aux = net.aux_features(y, eps_hat)
        v, vinv, feat_pred = net(x, aux)
        obj, _ = total_deformation_loss(
            x[0, 0], y[0, 0], v[0], vinv[0], feat_pred[0], target[0], lambda1=0.5
        )
        return obj

    report = gradient_check(closure, dict(net.named_parameters()), tolerance, max_coords_per_tensor=3, seed=seed)
    return report.max_rel_err


CHECKS = {
    "l_in": _check_l_in,
    "mi": _check_mi,
    "data": _check_data,
    "smoothness": _check_smoothness,
    "alignment": _check_alignment,
    "total": _check_total,
}


def run_gradient_suite(
    n_seeds: int = 20, tolerance: float = 1e-4, verbose: bool = False
) -> dict[str, float]:
    """Worst relative error per loss over ``n_seeds`` randomized instances."""
    report: dict[str, float] = {}
    for name, check in CHECKS.items():
        worst = 0.0
        for seed in range(n_seeds):
            worst = max(worst, check(1000 + seed, tolerance))
        report[name] = worst
        if verbose:
            status = "ok" if worst < tolerance else "FAIL"
            print(f"{name:12s} worst rel err {worst:.3e}  [{status}]")
    return report
