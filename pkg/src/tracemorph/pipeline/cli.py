"""Command-line interface.

Subcommands: gen-data, train-diffusion, train-deform, translate, evaluate,
serve, gradcheck. Flags shared across subcommands: --seed, --config, --out,
--k-steps, --n-samples, --lambda1, --bind. Config-file values sit between the
built-in defaults and explicit flags.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from tracemorph.pipeline.config import ConfigError, RunConfig, load_config, write_meta


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--config", type=Path, default=None, help="key = value config file")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--k-steps", type=int, default=None, dest="k_steps", help="diffusion chain length")
    parser.add_argument("--n-samples", type=int, default=None, dest="n_samples", help="samples averaged per translation")
    parser.add_argument("--lambda1", type=float, default=None, help="smoothness weight")
    parser.add_argument("--bind", type=str, default="127.0.0.1:8080", help="service bind address")


def _config_from(args: argparse.Namespace) -> RunConfig:
    overrides = {
        key: getattr(args, key)
        for key in ("seed", "k_steps", "n_samples", "lambda1")
        if getattr(args, key, None) is not None
    }
    cfg = load_config(args.config, overrides)
    torch.set_num_threads(cfg.threads)
    return cfg


def _require_out(args: argparse.Namespace) -> Path:
    if args.out is None:
        raise SystemExit("--out is required for this subcommand")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def cmd_gen_data(args: argparse.Namespace) -> int:
    from tracemorph.pipeline.data import generate_dataset, save_dataset

    cfg = _config_from(args)
    out = _require_out(args)
    n = args.n_per_domain or cfg.n_per_domain
    a, b = generate_dataset(n, cfg.seed, cfg.size)
    save_dataset(out, a, b, extra_meta={f"config.{k}": v for k, v in cfg.to_dict().items()})
    print(f"wrote {len(a)} + {len(b)} cases to {out}")
    return 0


def cmd_train_diffusion(args: argparse.Namespace) -> int:
    from tracemorph.pipeline.data import load_dataset
    from tracemorph.pipeline.train import train_diffusion

    cfg = _config_from(args)
    if args.steps is not None:
        from dataclasses import replace

        cfg = replace(cfg, diffusion_steps=args.steps)
    out = _require_out(args)
    _, b = load_dataset(args.data)
    result = train_diffusion(b, cfg, out, resume_from=args.resume)
    print(
        f"diffusion: {len(result.loss_curve)} steps, initial loss {result.initial_loss:.4f}, "
        f"final (mean of last 50) {result.final_loss:.4f} -> {result.checkpoint_path}"
    )
    return 0


def cmd_train_deform(args: argparse.Namespace) -> int:
    from dataclasses import replace

    from tracemorph.pipeline.data import load_dataset
    from tracemorph.pipeline.train import train_deformation

    cfg = _config_from(args)
    if args.steps is not None:
        cfg = replace(cfg, deformation_steps=args.steps)
    if args.no_eps_aux:
        cfg = replace(cfg, use_eps_aux=False)
    out = _require_out(args)
    a, b = load_dataset(args.data)
    result = train_deformation(a, b, args.diffusion, cfg, out)
    print(
        f"deformation: {len(result.loss_curve)} steps, objective {result.initial_loss:.4f} -> "
        f"{result.final_loss:.4f} -> {result.checkpoint_path}"
    )
    return 0


def cmd_translate(args: argparse.Namespace) -> int:
    from tracemorph.pipeline.data import load_dataset
    from tracemorph.pipeline.train import load_denoiser, load_regnet
    from tracemorph.pipeline.translate import translate_cases_to_dir

    cfg = _config_from(args)
    out = _require_out(args)
    a, _ = load_dataset(args.data)
    if args.cases is not None:
        a = a[: args.cases]
    denoiser, _ = load_denoiser(args.diffusion)
    regnet, _ = load_regnet(args.deform)
    written = translate_cases_to_dir(a, denoiser, regnet, cfg, out)
    print(f"wrote {len(written)} bundles to {out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    from tracemorph.pipeline.data import load_dataset
    from tracemorph.pipeline.evaluate import evaluate_traceability
    from tracemorph.pipeline.segment import fit_segmenter

    cfg = _config_from(args)
    out = _require_out(args)
    a, b = load_dataset(args.data)
    segmenter = fit_segmenter(b, cfg.seg_model, cfg.seed, cfg.seg_steps)
    summary = evaluate_traceability(args.bundles, segmenter, a, b, out, cfg.bins)
    for key in (
        "dice_mean",
        "baseline_dice_mean",
        "dice_improvement",
        "dbhat_translated_target",
        "dbhat_source_target",
    ):
        print(f"{key} = {summary[key]:.4f}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from tracemorph.pipeline.service import serve

    _config_from(args)
    serve(args.bundles, args.bind, args.ui)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from tracemorph.pipeline.gradsuite import run_gradient_suite

    cfg = _config_from(args)
    report = run_gradient_suite(n_seeds=args.seeds, tolerance=1e-4, verbose=True)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_meta(args.out / "gradcheck.txt", {k: repr(v) for k, v in report.items()})
    worst = max(report.values())
    print(f"worst relative error {worst:.3e} over {args.seeds} seeds")
    return 0 if worst < 1e-4 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracemorph",
        description="traceable diffusion image translation with deformation fields",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic two-domain dataset")
    _common(p)
    p.add_argument("--n-per-domain", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-diffusion", help="train the conditional noise estimator")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", type=Path, default=None)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("train-deform", help="train the registration net")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--diffusion", type=Path, required=True, help="denoiser checkpoint")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--no-eps-aux", action="store_true", help="ablation: drop the noise-estimate input")
    p.set_defaults(func=cmd_train_deform)

    p = sub.add_parser("translate", help="translate source cases into trace bundles")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--diffusion", type=Path, required=True)
    p.add_argument("--deform", type=Path, required=True)
    p.add_argument("--cases", type=int, default=None, help="translate only the first N cases")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="adaptation-segmentation traceability evaluation")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--bundles", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="serve trace bundles over HTTP")
    _common(p)
    p.add_argument("--bundles", type=Path, required=True)
    p.add_argument("--ui", type=Path, default=None, help="static viewer directory")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("gradcheck", help="finite-difference check of every trainable loss")
    _common(p)
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
