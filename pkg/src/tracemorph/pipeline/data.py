"""Synthetic two-domain benchmark data.

Domain A: 64x64 images of a single ellipse (radii uniform in [8, 14] px) with
dark foreground on a bright background. Domain B: the same shapes scaled by
1.4 with inverted intensity roles and a mild smooth texture. Masks are the
exact rasterized ellipses. Every case is deterministic given (seed, domain,
index) regardless of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from tracemorph.grid import Image2D, read_grid, read_pgm, write_grid, write_pgm
from tracemorph.pipeline.config import read_meta, write_meta
from tracemorph.rng import derive_seed

RADIUS_RANGE = (8.0, 14.0)
B_SCALE = 1.4
A_FG, A_FG_STD = 0.3, 0.05
A_BG, A_BG_STD = 0.7, 0.02
B_FG, B_FG_STD = 0.8, 0.05
B_BG, B_BG_STD = 0.2, 0.02
B_TEXTURE_AMPLITUDE = 0.03
B_TEXTURE_SIGMA = 3.0
CENTER_JITTER = 4.0


@dataclass(frozen=True)
class SyntheticCase:
    domain: str  # "a" or "b"
    index: int
    image: Image2D
    mask: Image2D  # exact rasterized foreground, values 0/1
    gen_params: dict
    seed: int

    @property
    def case_id(self) -> str:
        return f"{self.domain}_{self.index:04d}"


def _rasterize_ellipse(size: int, cx: float, cy: float, ra: float, rb: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return (((xs - cx) / ra) ** 2 + ((ys - cy) / rb) ** 2 <= 1.0).astype(np.float32)


def make_case(domain: str, index: int, seed: int, size: int = 64) -> SyntheticCase:
    if domain not in ("a", "b"):
        raise ValueError(f"unknown domain {domain!r}")
    rng = np.random.default_rng(derive_seed(seed, "case", domain, index))
    ra = rng.uniform(*RADIUS_RANGE)
    rb = rng.uniform(*RADIUS_RANGE)
    scale = B_SCALE if domain == "b" else 1.0
    ra *= scale
    rb *= scale
    # small jitter keeps shapes centered, so cross-domain pairs always overlap
    # and the similarity term has capture range
    jitter = min(CENTER_JITTER, (size - 2.0 - 2.0 * max(ra, rb)) / 2.0)
    cx = size / 2.0 + rng.uniform(-jitter, jitter)
    cy = size / 2.0 + rng.uniform(-jitter, jitter)
    mask = _rasterize_ellipse(size, cx, cy, ra, rb)

    if domain == "a":
        fg = rng.normal(A_FG, A_FG_STD, (size, size))
        bg = rng.normal(A_BG, A_BG_STD, (size, size))
        img = np.where(mask > 0, fg, bg)
    else:
        fg = rng.normal(B_FG, B_FG_STD, (size, size))
        bg = rng.normal(B_BG, B_BG_STD, (size, size))
        img = np.where(mask > 0, fg, bg)
        texture = gaussian_filter(rng.standard_normal((size, size)), B_TEXTURE_SIGMA, mode="reflect")
        peak = np.abs(texture).max()
        if peak > 0:
            img = img + texture * (B_TEXTURE_AMPLITUDE / peak)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    params = {
        "cx": float(cx),
        "cy": float(cy),
        "ra": float(ra),
        "rb": float(rb),
        "mask_area": int(mask.sum()),
    }
    return SyntheticCase(
        domain=domain,
        index=index,
        image=Image2D.from_array(img),
        mask=Image2D.from_array(mask),
        gen_params=params,
        seed=seed,
    )


def generate_dataset(
    n_per_domain: int, seed: int, size: int = 64
) -> tuple[list[SyntheticCase], list[SyntheticCase]]:
    if n_per_domain < 1:
        raise ValueError("need at least one case per domain")
    if size < 48:
        raise ValueError("domain-B shapes need at least a 48px canvas")
    a = [make_case("a", i, seed, size) for i in range(n_per_domain)]
    b = [make_case("b", i, seed, size) for i in range(n_per_domain)]
    return a, b


# ---------------------------------------------------------------------------
# on-disk layout: <dir>/meta.txt, <dir>/{a,b}/case_NNNN.{image.plsg,mask.pgm,meta.txt}
# ---------------------------------------------------------------------------

def save_dataset(out_dir: str | Path, a: list[SyntheticCase], b: list[SyntheticCase], extra_meta: dict[str, str] | None = None) -> None:
    out = Path(out_dir)
    for domain, cases in (("a", a), ("b", b)):
        d = out / domain
        d.mkdir(parents=True, exist_ok=True)
        for case in cases:
            stem = d / f"case_{case.index:04d}"
            write_grid(f"{stem}.image.plsg", case.image)
            write_pgm(f"{stem}.mask.pgm", case.mask)
            meta = {k: repr(v) if isinstance(v, float) else str(v) for k, v in case.gen_params.items()}
            meta["domain"] = case.domain
            meta["index"] = str(case.index)
            meta["seed"] = str(case.seed)
            write_meta(f"{stem}.meta.txt", meta)
    top = {"n_per_domain": str(len(a)), "size": str(a[0].image.height)}
    top.update(extra_meta or {})
    write_meta(out / "meta.txt", top)


def load_dataset(data_dir: str | Path) -> tuple[list[SyntheticCase], list[SyntheticCase]]:
    root = Path(data_dir)
    if not (root / "meta.txt").exists():
        raise FileNotFoundError(f"{root}: not a dataset directory (missing meta.txt)")
    out: dict[str, list[SyntheticCase]] = {"a": [], "b": []}
    for domain in ("a", "b"):
        d = root / domain
        for img_path in sorted(d.glob("case_*.image.plsg")):
            stem = img_path.name[: -len(".image.plsg")]
            index = int(stem.split("_")[1])
            meta = read_meta(d / f"{stem}.meta.txt")
            image = read_grid(img_path)
            mask = read_pgm(d / f"{stem}.mask.pgm")
            params = {
                "cx": float(meta["cx"]),
                "cy": float(meta["cy"]),
                "ra": float(meta["ra"]),
                "rb": float(meta["rb"]),
                "mask_area": int(meta["mask_area"]),
            }
            out[domain].append(
                SyntheticCase(
                    domain=domain,
                    index=index,
                    image=image,  # type: ignore[arg-type]
                    mask=mask,
                    gen_params=params,
                    seed=int(meta["seed"]),
                )
            )
    if not out["a"] or not out["b"]:
        raise FileNotFoundError(f"{root}: dataset has an empty domain")
    return out["a"], out["b"]
