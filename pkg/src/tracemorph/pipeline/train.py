"""Training loops for the noise estimator and the registration net.

Both loops are deterministic given (dataset, config, seed): batch selection,
noise draws and timestep draws all come from a single named torch generator
whose state is checkpointed, so a resumed run reproduces the original loss
trajectory step for step.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from tracemorph.contours import condition_map
from tracemorph.deform import integrate_velocity
from tracemorph.diffusion import NoiseSchedule, make_linear_schedule, training_loss_IN
from tracemorph.grid import warp_values
from tracemorph.networks import (
    ConditionalDenoiser,
    NetConfig,
    RegistrationNet,
    adam_step,
    load_state_tensors,
    read_checkpoint,
    state_tensors,
    warmup_lr,
    write_checkpoint,
)
from tracemorph.pipeline.config import RunConfig
from tracemorph.pipeline.data import SyntheticCase
from tracemorph.rng import derive_seed, torch_generator
from tracemorph.similarity import ParzenConfig, mi_score, total_deformation_loss


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint_path: Path
    loss_curve: list[tuple[int, float, float]]  # (step, loss, lr)

    @property
    def initial_loss(self) -> float:
        return self.loss_curve[0][1]

    @property
    def final_loss(self) -> float:
        return float(np.mean([l for _, l, _ in self.loss_curve[-50:]]))


def net_config(cfg: RunConfig, init_seed: int, use_eps_aux: bool | None = None) -> NetConfig:
    return NetConfig(
        base_channels=cfg.base_channels,
        depth=cfg.depth,
        gamma_embedding_dim=cfg.gamma_embedding_dim,
        feature_channels=cfg.feature_channels,
        use_eps_aux=cfg.use_eps_aux if use_eps_aux is None else use_eps_aux,
        init_seed=init_seed,
    )


def schedule_from_config(cfg: RunConfig) -> NoiseSchedule:
    return make_linear_schedule(cfg.k_steps, cfg.beta_start, cfg.beta_end)


def stack_images(cases: list[SyntheticCase]) -> torch.Tensor:
    return torch.stack([c.image.data for c in cases])


def condition_stack(cases: list[SyntheticCase], cfg: RunConfig) -> torch.Tensor:
    """Canonical (area-ranked) cluster renders used as conditioning input."""
    maps = []
    for c in cases:
        cond, _ = condition_map(c.image, cfg.n_clusters, derive_seed(cfg.seed, "contours", c.case_id))
        maps.append(cond.data)
    return torch.stack(maps)


def _write_loss_curve(out_dir: Path, name: str, curve: list[tuple[int, float, float]]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["step\tloss\tlr"] + [f"{s}\t{l!r}\t{lr!r}" for s, l, lr in curve]
    (out_dir / f"{name}_loss.tsv").write_text("\n".join(lines) + "\n")
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 3.2))
        steps = [s for s, _, _ in curve]
        losses = [l for _, l, _ in curve]
        ax.plot(steps, losses, lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(name)
        fig.tight_layout()
        fig.savefig(out_dir / f"{name}_loss.png", dpi=110)
        plt.close(fig)
    except Exception:
        pass  # headless plotting must never fail a training run


# ---------------------------------------------------------------------------
# diffusion training
# ---------------------------------------------------------------------------

def train_diffusion(
    cases_b: list[SyntheticCase],
    cfg: RunConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sched = schedule_from_config(cfg)
    net = ConditionalDenoiser(net_config(cfg, derive_seed(cfg.seed, "init-diffusion")))
    gen = torch_generator(cfg.seed, "train-diffusion")
    state = None
    if resume_from is not None:
        tensors, _ = read_checkpoint(resume_from)
        state = load_state_tensors(net, tensors)
        gen.set_state(tensors["rng"])

    images = stack_images(cases_b)
    conditions = condition_stack(cases_b, cfg)
    params = dict(net.named_parameters())
    curve: list[tuple[int, float, float]] = []
    warmup = cfg.diffusion_warmup_steps
    start = state["step"] if state else 0

    for step in range(start + 1, cfg.diffusion_steps + 1):
        idx = torch.randint(len(cases_b), (cfg.batch,), generator=gen)
        y0 = images[idx]
        ys = conditions[idx]
        loss = training_loss_IN(y0, ys, net, sched, gen)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingDivergedError(f"diffusion loss became non-finite at step {step}")
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        grad_map = {n: g for (n, _), g in zip(params.items(), grads) if g is not None}
        lr = warmup_lr(step, cfg.lr_diffusion, warmup)
        if step > cfg.diffusion_decay_start:
            lr *= cfg.lr_decay_factor
        state = adam_step(params, grad_map, state, lr)
        curve.append((step, value, lr))

    ckpt = out / "diffusion.ckpt"
    tensors = state_tensors(net, state)
    tensors["rng"] = gen.get_state()
    meta = {"kind": "denoiser", **net.cfg.to_dict(), **{f"run.{k}": v for k, v in cfg.to_dict().items()}}
    write_checkpoint(ckpt, tensors, meta)
    _write_loss_curve(out, "diffusion", curve)
    return TrainResult(checkpoint_path=ckpt, loss_curve=curve)


def load_denoiser(path: str | Path) -> tuple[ConditionalDenoiser, dict[str, str]]:
    tensors, config = read_checkpoint(path)
    if config.get("kind") != "denoiser":
        raise ValueError(f"{path}: not a denoiser checkpoint")
    net = ConditionalDenoiser(NetConfig.from_dict(config))
    load_state_tensors(net, tensors)
    net.eval()
    return net, config


# ---------------------------------------------------------------------------
# deformation training
# ---------------------------------------------------------------------------

def _estimate_noise(
    denoiser: ConditionalDenoiser,
    y0: torch.Tensor,
    ys: torch.Tensor,
    sched: NoiseSchedule,
    gen: torch.Generator,
) -> torch.Tensor:
    """eps_hat for a (B, H, W) batch at per-item uniform timesteps; no grads
    flow into the denoiser."""
    b = y0.shape[0]
    ks = torch.randint(1, sched.K + 1, (b,), generator=gen)
    gam = torch.as_tensor(sched.gamma[ks.numpy()], dtype=y0.dtype)
    eps = torch.randn(y0.shape, generator=gen, dtype=y0.dtype)
    noisy = gam.sqrt().view(b, 1, 1) * y0 + (1 - gam).sqrt().view(b, 1, 1) * eps
    with torch.no_grad():
        return denoiser(ys.unsqueeze(1), noisy.unsqueeze(1), gam)


def train_deformation(
    cases_a: list[SyntheticCase],
    cases_b: list[SyntheticCase],
    diffusion_ckpt: str | Path,
    cfg: RunConfig,
    out_dir: str | Path,
    use_eps_aux: bool | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sched = schedule_from_config(cfg)
    denoiser, _ = load_denoiser(diffusion_ckpt)
    use_eps = cfg.use_eps_aux if use_eps_aux is None else use_eps_aux
    net = RegistrationNet(net_config(cfg, derive_seed(cfg.seed, "init-deformation"), use_eps))
    gen = torch_generator(cfg.seed, "train-deformation")
    state = None
    if resume_from is not None:
        tensors, _ = read_checkpoint(resume_from)
        state = load_state_tensors(net, tensors)
        gen.set_state(tensors["rng"])

    imgs_a = stack_images(cases_a)
    imgs_b = stack_images(cases_b)
    conds_b = condition_stack(cases_b, cfg)
    params = dict(net.named_parameters())
    parzen = ParzenConfig(bins=cfg.bins)
    curve: list[tuple[int, float, float]] = []
    start = state["step"] if state else 0

    for step in range(start + 1, cfg.deformation_steps + 1):
        if cfg.pairing == "random":
            ia = torch.randint(len(cases_a), (cfg.batch,), generator=gen)
            ib = torch.randint(len(cases_b), (cfg.batch,), generator=gen)
        else:
            base = (step - 1) * cfg.batch
            ia = torch.tensor([(base + j) % len(cases_a) for j in range(cfg.batch)])
            ib = torch.tensor([(base + j) % len(cases_b) for j in range(cfg.batch)])
        x = imgs_a[ia]
        y = imgs_b[ib]
        eps_hat = _estimate_noise(denoiser, y, conds_b[ib], sched, gen)
        aux = net.aux_features(y.unsqueeze(1), eps_hat if use_eps else None)
        v, v_inv, feat_pred = net(x.unsqueeze(1), aux)

        total = torch.zeros((), dtype=x.dtype)
        for j in range(x.shape[0]):
            obj, _ = total_deformation_loss(
                x[j],
                y[j],
                v[j],
                v_inv[j],
                feat_pred[j],
                aux[j],
                lambda1=cfg.lambda1,
                cfg=parzen,
                integration_steps=cfg.squaring_steps,
            )
            total = total + obj
        total = total / x.shape[0]
        value = float(total.detach())
        if not np.isfinite(value):
            raise TrainingDivergedError(f"deformation loss became non-finite at step {step}")
        grads = torch.autograd.grad(total, list(params.values()), allow_unused=True)
        grad_map = {n: g for (n, _), g in zip(params.items(), grads) if g is not None}
        lr = warmup_lr(step, cfg.lr_deformation, cfg.warmup_deformation)
        state = adam_step(params, grad_map, state, lr)
        curve.append((step, value, lr))

    ckpt = out / ("deform.ckpt" if use_eps else "deform_no_eps.ckpt")
    tensors = state_tensors(net, state)
    tensors["rng"] = gen.get_state()
    meta = {"kind": "regnet", **net.cfg.to_dict(), **{f"run.{k}": v for k, v in cfg.to_dict().items()}}
    write_checkpoint(ckpt, tensors, meta)
    _write_loss_curve(out, "deformation" + ("" if use_eps else "_no_eps"), curve)
    return TrainResult(checkpoint_path=ckpt, loss_curve=curve)


def load_regnet(path: str | Path) -> tuple[RegistrationNet, dict[str, str]]:
    tensors, config = read_checkpoint(path)
    if config.get("kind") != "regnet":
        raise ValueError(f"{path}: not a registration checkpoint")
    net = RegistrationNet(NetConfig.from_dict(config))
    load_state_tensors(net, tensors)
    net.eval()
    return net, config


# ---------------------------------------------------------------------------
# pairwise alignment evaluation (used by the ablation and training diagnostics)
# ---------------------------------------------------------------------------

def pairwise_alignment_mi(
    regnet: RegistrationNet,
    denoiser: ConditionalDenoiser,
    pairs: list[tuple[SyntheticCase, SyntheticCase]],
    cfg: RunConfig,
    seed_tag: str = "pair-eval",
    use_aux_pathway: bool = True,
) -> tuple[list[float], list[float]]:
    """Per-pair MI(x o phi, y) after and before deformation.

    With ``use_aux_pathway`` the target-side features (and the noise estimate,
    if the net consumes one) are computed from y exactly as in training.
    """
    sched = schedule_from_config(cfg)
    parzen = ParzenConfig(bins=cfg.bins)
    after, before = [], []
    with torch.no_grad():
        for x_case, y_case in pairs:
            x = x_case.image.data
            y = y_case.image.data
            gen = torch_generator(cfg.seed, seed_tag, x_case.case_id, y_case.case_id)
            if use_aux_pathway:
                cond, _ = condition_map(
                    y_case.image, cfg.n_clusters, derive_seed(cfg.seed, "contours", y_case.case_id)
                )
                eps_hat = _estimate_noise(denoiser, y.unsqueeze(0), cond.data.unsqueeze(0), sched, gen)
                aux = regnet.aux_features(
                    y.unsqueeze(0).unsqueeze(1), eps_hat if regnet.cfg.use_eps_aux else None
                )
            else:
                aux = None
            v, _, _ = regnet(x.unsqueeze(0).unsqueeze(1), aux)
            disp = integrate_velocity(v[0], cfg.squaring_steps)
            after.append(float(mi_score(warp_values(x, disp), y, parzen)))
            before.append(float(mi_score(x, y, parzen)))
    return after, before
