"""Noise schedule and the forward / posterior / reverse diffusion computations.

Per-step retention factors ``alpha_k`` live in (0, 1); ``gamma_k`` is their
running product with ``gamma_0 = 1``. The linear schedule interpolates
``beta = 1 - alpha`` between its endpoints. Schedules are kept in float64 so
the product recurrence holds to 1e-12 regardless of image dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from tracemorph.grid import Image2D

TRAIN_STEPS_DEFAULT = 2000
BETA_START_DEFAULT = 1e-6
BETA_END_DEFAULT = 1e-2
SAMPLES_PER_OUTPUT_DEFAULT = 50


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha: (K,) retention factors; gamma: (K+1,) cumulative products, gamma[0] = 1."""

    alpha: np.ndarray
    gamma: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 1 or a.size < 1:
            raise ValueError("schedule needs at least one step")
        if not np.all((a > 0.0) & (a < 1.0)):
            raise ValueError("alpha values must lie strictly inside (0, 1)")
        g = np.empty(a.size + 1, dtype=np.float64)
        g[0] = 1.0
        g[1:] = np.cumprod(a)
        if not np.all(np.diff(g) < 0.0):
            raise ValueError("gamma must be strictly decreasing")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "gamma", g)

    @property
    def K(self) -> int:
        return int(self.alpha.size)

    def alpha_at(self, k: int) -> float:
        if not 1 <= k <= self.K:
            raise ValueError(f"step index {k} outside 1..{self.K}")
        return float(self.alpha[k - 1])

    def gamma_at(self, k: int) -> float:
        if not 0 <= k <= self.K:
            raise ValueError(f"step index {k} outside 0..{self.K}")
        return float(self.gamma[k])


def make_linear_schedule(
    K: int = TRAIN_STEPS_DEFAULT,
    beta_start: float = BETA_START_DEFAULT,
    beta_end: float = BETA_END_DEFAULT,
) -> NoiseSchedule:
    if K < 1:
        raise ValueError("K must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if K == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, K, dtype=np.float64)
    return NoiseSchedule(alpha=1.0 - betas)


def make_strided_schedule(sched: NoiseSchedule, stride: int) -> NoiseSchedule:
    """Sub-schedule keeping every ``stride``-th gamma; alphas become the
    per-window products, so the retained gammas are unchanged."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride == 1:
        return sched
    if sched.K % stride != 0:
        raise ValueError(f"stride {stride} does not divide K={sched.K}")
    g = sched.gamma[::stride]
    return NoiseSchedule(alpha=g[1:] / g[:-1])


@dataclass(frozen=True)
class PosteriorParams:
    mu: Image2D
    sigma2: float

    def __post_init__(self) -> None:
        if self.sigma2 < 0:
            raise ValueError("posterior variance cannot be negative")


@dataclass(frozen=True)
class DiffusionState:
    k: int
    y_k: Image2D


# ---------------------------------------------------------------------------
# forward process
# ---------------------------------------------------------------------------

def forward_marginal(y0: Image2D, k: int, eps: Image2D, sched: NoiseSchedule) -> Image2D:
    """sqrt(gamma_k) * y0 + sqrt(1 - gamma_k) * eps."""
    if y0.data.shape != eps.data.shape:
        raise ValueError("y0 and eps shapes differ")
    g = sched.gamma_at(k)
    out = np.sqrt(g) * y0.data + np.sqrt(1.0 - g) * eps.data
    return Image2D(out)


def noise_source(x0: Image2D, sched: NoiseSchedule, rng: torch.Generator) -> Image2D:
    """Draw x_K ~ N(sqrt(gamma_K) x0, (1 - gamma_K) I)."""
    z = torch.randn(x0.data.shape, generator=rng, dtype=x0.data.dtype)
    return forward_marginal(x0, sched.K, Image2D(z), sched)


def posterior_params(y0: Image2D, yk: Image2D, k: int, sched: NoiseSchedule) -> PosteriorParams:
    """Gaussian posterior of y_{k-1} given (y0, y_k)."""
    if k < 1:
        raise ValueError("posterior needs k >= 1")
    if y0.data.shape != yk.data.shape:
        raise ValueError("y0 and yk shapes differ")
    a_k = sched.alpha_at(k)
    g_k = sched.gamma_at(k)
    g_km1 = sched.gamma_at(k - 1)
    c0 = np.sqrt(g_km1) * (1.0 - a_k) / (1.0 - g_k)
    ck = np.sqrt(a_k) * (1.0 - g_km1) / (1.0 - g_k)
    sigma2 = (1.0 - g_km1) * (1.0 - a_k) / (1.0 - g_k)
    return PosteriorParams(mu=Image2D(c0 * y0.data + ck * yk.data), sigma2=float(sigma2))


# ---------------------------------------------------------------------------
# reverse process
# ---------------------------------------------------------------------------

def reverse_step(
    yk: Image2D, eps_hat: Image2D, k: int, sched: NoiseSchedule, z: Image2D
) -> Image2D:
    """(1/sqrt(alpha_k)) (y_k - (1-alpha_k)/sqrt(1-gamma_k) eps_hat) + sqrt(1-alpha_k) z."""
    if k < 1:
        raise ValueError("reverse step needs k >= 1")
    if yk.data.shape != eps_hat.data.shape or yk.data.shape != z.data.shape:
        raise ValueError("reverse_step inputs have mismatched shapes")
    a_k = sched.alpha_at(k)
    g_k = sched.gamma_at(k)
    mean = (yk.data - (1.0 - a_k) / np.sqrt(1.0 - g_k) * eps_hat.data) / np.sqrt(a_k)
    return Image2D(mean + np.sqrt(1.0 - a_k) * z.data)


def reverse_noise_std(sched: NoiseSchedule, k: int, kind: str = "step") -> float:
    """Std of the reverse-transition noise.

    ``step`` is the printed per-step rule sqrt(1 - alpha_k); ``posterior`` is
    the Gaussian-posterior sigma, available as an ablation switch.
    """
    a_k = sched.alpha_at(k)
    if kind == "step":
        return float(np.sqrt(1.0 - a_k))
    if kind == "posterior":
        g_k = sched.gamma_at(k)
        g_km1 = sched.gamma_at(k - 1)
        return float(np.sqrt((1.0 - g_km1) * (1.0 - a_k) / (1.0 - g_k)))
    raise ValueError(f"unknown reverse-noise kind {kind!r}")


def _reverse_chain(
    y: torch.Tensor,
    condition: torch.Tensor,
    model,
    sched: NoiseSchedule,
    rng: torch.Generator,
    noise_kind: str = "step",
) -> torch.Tensor:
    """Run K reverse steps on a (B, 1, H, W) batch; z = 0 at the final step."""
    for k in range(sched.K, 0, -1):
        a_k = sched.alpha_at(k)
        g_k = sched.gamma_at(k)
        eps_hat = model(condition, y, torch.full((y.shape[0],), g_k, dtype=y.dtype))
        y = (y - (1.0 - a_k) / np.sqrt(1.0 - g_k) * eps_hat) / np.sqrt(a_k)
        if k > 1:
            z = torch.randn(y.shape, generator=rng, dtype=y.dtype)
            y = y + reverse_noise_std(sched, k, noise_kind) * z
    return y


def denoise_loop(
    x0: Image2D,
    condition: Image2D,
    model,
    sched: NoiseSchedule,
    rng: torch.Generator,
    n_samples: int = SAMPLES_PER_OUTPUT_DEFAULT,
    noise_kind: str = "step",
) -> Image2D:
    """Translate ``x0`` by noising it to x_K and refining K steps under the
    condition image; repeats ``n_samples`` times with independent noise and
    returns the pixel-wise mean."""
    if x0.data.shape != condition.data.shape:
        raise ValueError("x0 and condition shapes differ")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    h, w = x0.data.shape
    g_K = sched.gamma_at(sched.K)
    z0 = torch.randn((n_samples, 1, h, w), generator=rng, dtype=x0.data.dtype)
    y = np.sqrt(g_K) * x0.data + np.sqrt(1.0 - g_K) * z0
    cond = condition.data.expand(n_samples, 1, h, w)
    with torch.no_grad():
        y = _reverse_chain(y, cond, model, sched, rng, noise_kind)
    return Image2D(y.mean(dim=0).squeeze(0))


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------

def training_loss_IN(
    y0: torch.Tensor,
    y_s: torch.Tensor,
    model,
    sched: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    """L1 noise-estimation loss on a (B, H, W) batch.

    Draws k uniform in 1..K and standard-normal noise per sample; returns the
    mean absolute error between the injected and estimated noise as a scalar
    tensor (differentiable through the model parameters).
    """
    if y0.ndim == 2:
        y0 = y0.unsqueeze(0)
        y_s = y_s.unsqueeze(0)
    if y0.shape != y_s.shape:
        raise ValueError("y0 and y_s shapes differ")
    b = y0.shape[0]
    ks = torch.randint(1, sched.K + 1, (b,), generator=rng)
    gam = torch.as_tensor(sched.gamma[ks.numpy()], dtype=y0.dtype)
    eps = torch.randn(y0.shape, generator=rng, dtype=y0.dtype)
    coef_y = gam.sqrt().view(b, 1, 1)
    coef_e = (1.0 - gam).sqrt().view(b, 1, 1)
    noisy = coef_y * y0 + coef_e * eps
    eps_hat = model(y_s.unsqueeze(1), noisy.unsqueeze(1), gam)
    return (eps - eps_hat.squeeze(1)).abs().mean()
