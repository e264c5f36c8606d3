"""End-to-end translation of a source image into a trace bundle.

Stages: cluster the source into a contour map, run the registration net with
self-substituted features to get forward/inverse velocities, integrate them
into deformations, warp the conditioning map, and run the iterative denoising
chain from the noised source. A bundle is only written after its fields pass
the composition-residual and Jacobian diagnostics.

The stored inverse field is the integral of the negated forward velocity, the
construction that is invertible by design; the net's learned inverse-velocity
stream shapes training through the symmetric similarity term.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import torch

from tracemorph.contours import condition_map
from tracemorph.deform import (
    DeformationField,
    IntegrationConfig,
    integrate,
    inverse,
    positive_jacobian_fraction,
    residual_displacement,
)
from tracemorph.diffusion import NoiseSchedule, denoise_loop, make_strided_schedule
from tracemorph.grid import (
    Image2D,
    VectorField2D,
    read_grid,
    read_pgm,
    sample_values,
    warp,
    write_grid,
    write_pgm,
)
from tracemorph.networks import ConditionalDenoiser, RegistrationNet
from tracemorph.pipeline.config import RunConfig, read_meta, write_meta
from tracemorph.pipeline.data import SyntheticCase
from tracemorph.pipeline.train import schedule_from_config
from tracemorph.rng import derive_seed, torch_generator

RESIDUAL_MEAN_BOUND = 0.2
RESIDUAL_MAX_BOUND = 0.5
JACOBIAN_POSITIVE_FRACTION = 0.995

BUNDLE_FILES = (
    "source.pgm",
    "translated.pgm",
    "structure_source.pgm",
    "structure_deformed.pgm",
    "forward_field.plsg",
    "inverse_field.plsg",
)


class TranslateError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class TraceBundle:
    case_id: str
    source: Image2D
    translated: Image2D
    structure_source: Image2D
    structure_deformed: Image2D
    forward_field: DeformationField
    inverse_field: DeformationField
    meta: dict[str, str]


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _field_diagnostics(fwd: DeformationField, bwd: DeformationField) -> dict[str, float]:
    mean_r, max_r = residual_displacement(fwd, bwd)
    return {
        "residual_mean": mean_r,
        "residual_max": max_r,
        "jacobian_positive_forward": positive_jacobian_fraction(fwd),
        "jacobian_positive_inverse": positive_jacobian_fraction(bwd),
    }


def translate_case(
    x: Image2D,
    case_id: str,
    denoiser: ConditionalDenoiser,
    regnet: RegistrationNet,
    cfg: RunConfig,
    sched: NoiseSchedule | None = None,
) -> TraceBundle:
    """Translate one source image; see module docstring for the stage order."""
    bundles = translate_batch([x], [case_id], denoiser, regnet, cfg, sched)
    return bundles[0]


def translate_batch(
    images: list[Image2D],
    case_ids: list[str],
    denoiser: ConditionalDenoiser,
    regnet: RegistrationNet,
    cfg: RunConfig,
    sched: NoiseSchedule | None = None,
) -> list[TraceBundle]:
    """Translate a list of cases. Every case runs its own sampling chain with
    its own generator, so bundles do not depend on how cases are grouped.

    ``sched``, when given, must be the full training schedule; the config's
    inference stride is applied here.
    """
    if len(images) != len(case_ids):
        raise ValueError("images and case_ids length mismatch")
    sched = sched or schedule_from_config(cfg)
    if cfg.stride > 1:
        sched = make_strided_schedule(sched, cfg.stride)
    icfg = IntegrationConfig(cfg.squaring_steps)

    bundles = []
    for x, cid in zip(images, case_ids):
        # stage: structure map
        try:
            cond, contours = condition_map(x, cfg.n_clusters, derive_seed(cfg.seed, "contours", cid))
        except ValueError as e:
            raise TranslateError("structure", f"{cid}: {e}") from e
        structure = contours.render()

        # stage: deformation (self-substituted features; no target side here)
        try:
            with torch.no_grad():
                v, _v_inv_stream, _ = regnet(x.data.unsqueeze(0).unsqueeze(0))
            fwd = integrate(VectorField2D(v[0]), icfg)
            bwd = inverse(VectorField2D(v[0]), icfg)
        except ValueError as e:
            raise TranslateError("deformation", f"{cid}: {e}") from e

        diag = _field_diagnostics(fwd, bwd)
        if diag["residual_mean"] >= RESIDUAL_MEAN_BOUND or diag["residual_max"] >= RESIDUAL_MAX_BOUND:
            raise TranslateError(
                "diagnostics",
                f"{cid}: composition residual mean {diag['residual_mean']:.3f} "
                f"max {diag['residual_max']:.3f} exceeds bounds",
            )
        if min(diag["jacobian_positive_forward"], diag["jacobian_positive_inverse"]) < JACOBIAN_POSITIVE_FRACTION:
            raise TranslateError("diagnostics", f"{cid}: negative Jacobian fraction too high")

        # stage: conditioning map warped into target geometry
        cond_deformed = warp(cond, fwd)
        struct_deformed = warp(structure, fwd)

        # stage: iterative refinement from the noised source
        try:
            gen = torch_generator(cfg.seed, "translate", cid)
            translated = denoise_loop(
                x, cond_deformed, denoiser, sched, gen, cfg.n_samples, cfg.reverse_noise
            )
        except ValueError as e:
            raise TranslateError("denoise", f"{cid}: {e}") from e

        meta = {
            "case_id": cid,
            **{f"metric.{k}": repr(val) for k, val in diag.items()},
            **{f"config.{k}": v for k, v in cfg.to_dict().items()},
        }
        bundles.append(
            TraceBundle(
                case_id=cid,
                source=x,
                translated=Image2D(translated.data.clamp(0.0, 1.0)),
                structure_source=structure,
                structure_deformed=struct_deformed,
                forward_field=fwd,
                inverse_field=bwd,
                meta=meta,
            )
        )
    return bundles


# ---------------------------------------------------------------------------
# bundle persistence: one directory per case with fixed file names
# ---------------------------------------------------------------------------

def write_bundle(out_dir: str | Path, bundle: TraceBundle) -> Path:
    d = Path(out_dir) / bundle.case_id
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / "source.pgm", bundle.source)
    write_pgm(d / "translated.pgm", bundle.translated)
    write_pgm(d / "structure_source.pgm", bundle.structure_source)
    write_pgm(d / "structure_deformed.pgm", bundle.structure_deformed)
    write_grid(d / "forward_field.plsg", bundle.forward_field.disp)
    write_grid(d / "inverse_field.plsg", bundle.inverse_field.disp)
    meta = dict(bundle.meta)
    for name in BUNDLE_FILES:
        meta[f"sha256.{name}"] = _file_sha256(d / name)
    write_meta(d / "meta.txt", meta)
    return d


def read_bundle(bundle_dir: str | Path, verify: bool = True) -> TraceBundle:
    d = Path(bundle_dir)
    meta = read_meta(d / "meta.txt")
    if verify:
        for name in BUNDLE_FILES:
            recorded = meta.get(f"sha256.{name}")
            if recorded is None:
                raise ValueError(f"{d}: meta is missing checksum for {name}")
            actual = _file_sha256(d / name)
            if actual != recorded:
                raise ValueError(f"{d}/{name}: checksum mismatch")
    fwd = read_grid(d / "forward_field.plsg")
    bwd = read_grid(d / "inverse_field.plsg")
    if not isinstance(fwd, VectorField2D) or not isinstance(bwd, VectorField2D):
        raise ValueError(f"{d}: deformation fields must be 2-channel grids")
    return TraceBundle(
        case_id=meta["case_id"],
        source=read_pgm(d / "source.pgm"),
        translated=read_pgm(d / "translated.pgm"),
        structure_source=read_pgm(d / "structure_source.pgm"),
        structure_deformed=read_pgm(d / "structure_deformed.pgm"),
        forward_field=DeformationField(fwd),
        inverse_field=DeformationField(bwd),
        meta=meta,
    )


def list_bundles(root: str | Path) -> list[Path]:
    return sorted(p.parent for p in Path(root).glob("*/meta.txt"))


# ---------------------------------------------------------------------------
# point tracing (shared by the HTTP service and in-process callers)
# ---------------------------------------------------------------------------

def trace_points(field: VectorField2D, points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Map points through phi(p) = p + u(p); float64 bilinear lookup."""
    if not points:
        return []
    coords = torch.tensor([[p[0] for p in points], [p[1] for p in points]], dtype=torch.float64)
    disp = sample_values(field.u.to(torch.float64), coords)
    return [
        (float(points[i][0] + disp[0, i]), float(points[i][1] + disp[1, i]))
        for i in range(len(points))
    ]


def translate_cases_to_dir(
    cases: list[SyntheticCase],
    denoiser: ConditionalDenoiser,
    regnet: RegistrationNet,
    cfg: RunConfig,
    out_dir: str | Path,
) -> list[Path]:
    """Translate a case list in deterministic chunks and persist bundles."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sched = schedule_from_config(cfg)
    written = []
    chunk = max(1, cfg.translate_batch)
    for i in range(0, len(cases), chunk):
        batch = cases[i : i + chunk]
        bundles = translate_batch(
            [c.image for c in batch], [c.case_id for c in batch], denoiser, regnet, cfg, sched
        )
        for b in bundles:
            written.append(write_bundle(out, b))
    return written
