"""Small gradient-checked conv nets: the conditional noise estimator, the
dual-head registration net with alignment branches, the Adam optimizer and
warmup schedule, plus checkpoint serialization and a finite-difference
gradient checker.

Initialization is deterministic: every parameter tensor gets its own stream
seeded from (init_seed, tensor name), weights drawn uniform with 1/sqrt(fan_in)
scale, biases and normalization offsets zeroed, output heads zero-initialized
so the nets start at eps_hat = 0 and v = 0 (phi = Id).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"PLSC"
CHECKPOINT_VERSION = 1


class AdamError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 16
    depth: int = 3
    gamma_embedding_dim: int = 16
    feature_channels: int = 8
    use_eps_aux: bool = True
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be >= 1")

    def channels(self, level: int) -> int:
        return min(self.base_channels * (1 << level), 64)

    def to_dict(self) -> dict[str, str]:
        return {
            "base_channels": str(self.base_channels),
            "depth": str(self.depth),
            "gamma_embedding_dim": str(self.gamma_embedding_dim),
            "feature_channels": str(self.feature_channels),
            "use_eps_aux": str(self.use_eps_aux).lower(),
            "init_seed": str(self.init_seed),
        }

    @staticmethod
    def from_dict(d: dict[str, str]) -> "NetConfig":
        return NetConfig(
            base_channels=int(d["base_channels"]),
            depth=int(d["depth"]),
            gamma_embedding_dim=int(d["gamma_embedding_dim"]),
            feature_channels=int(d["feature_channels"]),
            use_eps_aux=d.get("use_eps_aux", "true") == "true",
            init_seed=int(d["init_seed"]),
        )


def _tensor_seed(init_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{init_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def init_parameters(module: nn.Module, init_seed: int, zero_prefixes: tuple[str, ...] = ()) -> None:
    """Re-initialize every parameter deterministically from (init_seed, name)."""
    for name, p in module.named_parameters():
        gen = torch.Generator().manual_seed(_tensor_seed(init_seed, name))
        with torch.no_grad():
            if any(name.startswith(pre) for pre in zero_prefixes):
                p.zero_()
            elif p.ndim >= 2:  # conv / linear weights
                fan_in = int(np.prod(p.shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                p.uniform_(-bound, bound, generator=gen)
            elif "weight" in name:  # normalization scales
                p.fill_(1.0)
            else:
                p.zero_()


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups != 0:
        groups //= 2
    return nn.GroupNorm(max(groups, 1), channels)


class ResBlock(nn.Module):
    """norm -> silu -> conv -> (+ gamma embedding) -> norm -> silu -> conv, residual."""

    def __init__(self, channels: int, emb_dim: int | None):
        super().__init__()
        self.norm1 = _group_norm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _group_norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, channels) if emb_dim else None

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb_proj is not None and emb is not None:
            h = h + self.emb_proj(emb).unsqueeze(-1).unsqueeze(-1)
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class EncoderDecoder(nn.Module):
    """Shared U-shaped trunk: per-level res blocks, stride-2 downsampling,
    nearest upsampling with skip concatenation."""

    def __init__(self, in_channels: int, cfg: NetConfig, emb_dim: int | None = None):
        super().__init__()
        self.cfg = cfg
        ch = [cfg.channels(l) for l in range(cfg.depth)]
        self.stem = nn.Conv2d(in_channels, ch[0], 3, padding=1)
        self.enc = nn.ModuleList([ResBlock(c, emb_dim) for c in ch])
        self.down = nn.ModuleList(
            [nn.Conv2d(ch[l], ch[l + 1], 3, stride=2, padding=1) for l in range(cfg.depth - 1)]
        )
        self.mid = ResBlock(ch[-1], emb_dim)
        self.up = nn.ModuleList(
            [nn.Conv2d(ch[l + 1], ch[l], 3, padding=1) for l in range(cfg.depth - 1)]
        )
        self.fuse = nn.ModuleList(
            [nn.Conv2d(2 * ch[l], ch[l], 1) for l in range(cfg.depth - 1)]
        )
        self.dec = nn.ModuleList([ResBlock(ch[l], emb_dim) for l in range(cfg.depth - 1)])
        self.out_channels = ch[0]

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None = None) -> torch.Tensor:
        size = x.shape[-1]
        if x.shape[-2] % (1 << (self.cfg.depth - 1)) or size % (1 << (self.cfg.depth - 1)):
            raise ValueError(
                f"input size {tuple(x.shape[-2:])} not divisible by 2**{self.cfg.depth - 1}"
            )
        h = self.stem(x)
        skips = []
        for l in range(self.cfg.depth):
            h = self.enc[l](h, emb)
            if l < self.cfg.depth - 1:
                skips.append(h)
                h = self.down[l](h)
        h = self.mid(h, emb)
        for l in range(self.cfg.depth - 2, -1, -1):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.up[l](h)
            h = self.fuse[l](torch.cat([skips[l], h], dim=1))
            h = self.dec[l](h, emb)
        return h


class ConditionalDenoiser(nn.Module):
    """Noise estimator over the (condition, noisy) pair with a learned scalar
    embedding of log(noise level) injected at every res block."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.emb = nn.Sequential(
            nn.Linear(1, cfg.gamma_embedding_dim),
            nn.SiLU(),
            nn.Linear(cfg.gamma_embedding_dim, cfg.gamma_embedding_dim),
        )
        self.trunk = EncoderDecoder(2, cfg, emb_dim=cfg.gamma_embedding_dim)
        self.head = nn.Conv2d(self.trunk.out_channels, 1, 3, padding=1)
        init_parameters(self, cfg.init_seed, zero_prefixes=("head.",))

    def forward(self, condition: torch.Tensor, noisy: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
        if condition.shape != noisy.shape:
            raise ValueError("condition and noisy image shapes differ")
        if condition.ndim != 4 or condition.shape[1] != 1:
            raise ValueError("expected (B, 1, H, W) inputs")
        gamma = gamma.to(noisy.dtype).reshape(-1, 1)
        if gamma.shape[0] != condition.shape[0]:
            raise ValueError("gamma must provide one value per batch item")
        emb = self.emb(torch.log(gamma))
        h = self.trunk(torch.cat([condition, noisy], dim=1), emb)
        return self.head(h)


class RegistrationNet(nn.Module):
    """Velocity estimator with two zero-initialized output streams (forward and
    inverse velocities), an auxiliary encoder caching target-side features and
    a predictor branch producing the same features from the source alone."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        f = cfg.feature_channels
        aux_in = 2 if cfg.use_eps_aux else 1
        self.aux_encoder = nn.Sequential(
            nn.Conv2d(aux_in, f, 3, padding=1), nn.SiLU(),
            nn.Conv2d(f, f, 3, padding=1), nn.SiLU(),
            nn.Conv2d(f, f, 3, padding=1),
        )
        self.predictor = nn.Sequential(
            nn.Conv2d(1, f, 3, padding=1), nn.SiLU(),
            nn.Conv2d(f, f, 3, padding=1), nn.SiLU(),
            nn.Conv2d(f, f, 3, padding=1),
        )
        self.trunk = EncoderDecoder(1 + f, cfg)
        self.head_v = nn.Conv2d(self.trunk.out_channels, 2, 3, padding=1)
        self.head_vinv = nn.Conv2d(self.trunk.out_channels, 2, 3, padding=1)
        init_parameters(self, cfg.init_seed, zero_prefixes=("head_v.", "head_vinv."))

    def aux_features(self, y: torch.Tensor, eps_hat: torch.Tensor | None) -> torch.Tensor:
        """Target-side feature grid from (y, estimated noise); training only."""
        if self.cfg.use_eps_aux:
            if eps_hat is None:
                raise ValueError("this net was configured to consume the noise estimate")
            inp = torch.cat([y, eps_hat], dim=1)
        else:
            inp = y
        return self.aux_encoder(inp)

    def forward(
        self, x: torch.Tensor, aux_features: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (v, v_inv, feat_pred). With ``aux_features=None`` the
        predictor output substitutes for the target features (inference)."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError("expected (B, 1, H, W) source image")
        feat_pred = self.predictor(x)
        aux = aux_features if aux_features is not None else feat_pred
        if aux.shape[-2:] != x.shape[-2:]:
            raise ValueError("feature grid and image sizes differ")
        h = self.trunk(torch.cat([x, aux], dim=1))
        return self.head_v(h), self.head_vinv(h), feat_pred


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: dict | None,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> dict:
    """One Adam update with bias correction; mutates ``params`` in place and
    returns the updated state."""
    if state is None:
        state = {"step": 0, "m": {}, "v": {}}
    state["step"] += 1
    t = state["step"]
    b1, b2 = betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if not bool(torch.isfinite(g).all()):
                raise AdamError(f"non-finite gradient for parameter '{name}'")
            if name not in state["m"]:
                state["m"][name] = torch.zeros_like(p)
                state["v"][name] = torch.zeros_like(p)
            m = state["m"][name]
            v = state["v"][name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.add_((m / bc1) / ((v / bc2).sqrt() + eps), alpha=-lr)
    return state


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """base_lr * min(1, step / warmup_steps); warmup_steps = 0 disables warmup."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    per_tensor: dict[str, float]
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max(self.per_tensor.values()) if self.per_tensor else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def __str__(self) -> str:
        lines = [f"{name}: {err:.3e}" for name, err in sorted(self.per_tensor.items())]
        lines.append(f"max {self.max_rel_err:.3e} (tolerance {self.tolerance:.0e})")
        return "\n".join(lines)


def gradient_check(
    closure,
    params: dict[str, torch.Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-4,
    max_coords_per_tensor: int = 16,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar closure against central
    finite differences, sampling coordinates of larger tensors.

    Relative error per tensor is the max |ad - fd| over probed coordinates,
    scaled by the larger of the two gradient magnitudes (floored at 1e-3 so
    near-zero gradients are compared absolutely).
    """
    names = list(params)
    loss = closure()
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, grad in zip(names, grads):
        p = params[name]
        ad = torch.zeros_like(p) if grad is None else grad
        flat = p.data.reshape(-1)
        n = flat.numel()
        if n <= max_coords_per_tensor:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        scale = max(float(ad.abs().max()), 1e-3)
        worst = 0.0
        ad_flat = ad.reshape(-1)
        for i in coords:
            i = int(i)
            orig = float(flat[i])
            flat[i] = orig + h
            fp = float(closure().detach())
            flat[i] = orig - h
            fm = float(closure().detach())
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            denom = max(scale, abs(fd))
            worst = max(worst, abs(float(ad_flat[i]) - fd) / denom)
        report[name] = worst
    return GradCheckReport(per_tensor=report, tolerance=tolerance)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "uint8": torch.uint8,
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}
_NUMPY_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "u1"}


def write_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], config: dict[str, str]) -> None:
    """Named-tensor container: magic, version, text manifest (config echo plus
    name/dtype/shape/offset records), raw little-endian payload."""
    manifest_lines = []
    for key in sorted(config):
        manifest_lines.append(f"config {key} = {config[key]}")
    payload = bytearray()
    for name, t in tensors.items():
        dtype = _DTYPE_NAMES.get(t.dtype)
        if dtype is None:
            raise ValueError(f"unsupported checkpoint dtype {t.dtype} for '{name}'")
        raw = t.detach().cpu().numpy().astype(_NUMPY_DTYPES[dtype]).tobytes(order="C")
        shape = ",".join(str(d) for d in t.shape) or "-"
        manifest_lines.append(f"tensor {name} {dtype} {shape} {len(payload)} {len(raw)}")
        payload.extend(raw)
    manifest = ("\n".join(manifest_lines) + "\n").encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(manifest)))
        f.write(manifest)
        f.write(bytes(payload))


def read_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    manifest = raw[12 : 12 + mlen].decode()
    payload = raw[12 + mlen :]
    tensors: dict[str, torch.Tensor] = {}
    config: dict[str, str] = {}
    for line in manifest.splitlines():
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "config":
            key, value = rest.split(" = ", 1)
            config[key] = value
        elif kind == "tensor":
            name, dtype, shape_s, off_s, nbytes_s = rest.rsplit(" ", 4)
            shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
            off, nbytes = int(off_s), int(nbytes_s)
            a = np.frombuffer(payload[off : off + nbytes], dtype=_NUMPY_DTYPES[dtype]).reshape(shape)
            tensors[name] = torch.from_numpy(a.copy())
        else:
            raise ValueError(f"{path}: unknown manifest record '{kind}'")
    return tensors, config


def state_tensors(net: nn.Module, adam_state: dict | None) -> dict[str, torch.Tensor]:
    """Flatten parameters and optimizer state into one named-tensor dict."""
    out = {f"param.{n}": p for n, p in net.named_parameters()}
    if adam_state is not None and adam_state["step"] > 0:
        out["adam.step"] = torch.tensor([adam_state["step"]], dtype=torch.int64)
        for n, t in adam_state["m"].items():
            out[f"adam.m.{n}"] = t
        for n, t in adam_state["v"].items():
            out[f"adam.v.{n}"] = t
    return out


def load_state_tensors(
    net: nn.Module, tensors: dict[str, torch.Tensor]
) -> dict | None:
    """Restore parameters (and optimizer state if present) from a tensor dict."""
    with torch.no_grad():
        for n, p in net.named_parameters():
            key = f"param.{n}"
            if key not in tensors:
                raise ValueError(f"checkpoint is missing parameter '{n}'")
            p.copy_(tensors[key])
    if "adam.step" not in tensors:
        return None
    state = {"step": int(tensors["adam.step"][0]), "m": {}, "v": {}}
    for n, _ in net.named_parameters():
        state["m"][n] = tensors[f"adam.m.{n}"].clone()
        state["v"][n] = tensors[f"adam.v.{n}"].clone()
    return state
