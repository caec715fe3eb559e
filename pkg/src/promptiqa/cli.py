"""Command line entry point: ``promptiqa {score,train,evaluate,benchmark,ablate,make-toy}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from promptiqa.errors import ConfigError, InputError, IQAError

log = logging.getLogger("promptiqa")

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="run config (TOML or JSON)")
    parser.add_argument("--task", choices=["perception", "alignment"])
    parser.add_argument("--scheme", choices=["antonym", "adjective", "adverb"])
    parser.add_argument("--alpha-mode", choices=["fixed_0", "fixed_1", "learned"])
    parser.add_argument("--patches-n", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--backend", choices=["clip", "stub"], help="override backend kind")
    parser.add_argument("--model-name", help="override CLIP weights name or path")
    parser.add_argument("--device")
    parser.add_argument("--allow-download", action="store_true",
                        help="let the backend fetch weights over the network")
    det = parser.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    parser.add_argument("--output-dir", type=Path)
    parser.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptiqa",
        description="Quality assessment of AI-generated images with task-specific prompts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score one image against its generation prompt")
    p.add_argument("image", type=Path)
    p.add_argument("prompt")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--checkpoint", type=Path, help="fine-tuned checkpoint directory")
    src.add_argument("--zero-shot", action="store_true",
                     help="score with the un-tuned backbone (smoke tests only)")
    p.add_argument("--output", type=Path, help="also write the JSON here")
    p.add_argument("--quiet", action="store_true", help="no readable summary on stderr")
    _common(p)

    p = sub.add_parser("train", help="fine-tune on one split of the first configured dataset")
    p.add_argument("--repetition", type=int, default=0)
    _common(p)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test part of its split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--logistic-plcc", action="store_true")
    _common(p)

    p = sub.add_parser("benchmark", help="repeated split/train/evaluate over all datasets and tasks")
    p.add_argument("--parallel", type=int, default=0, help="worker processes for repetitions")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--logistic-plcc", action="store_true")
    _common(p)

    p = sub.add_parser("ablate", help="sweep one design axis and tabulate SRCC/PLCC")
    p.add_argument("--axis", required=True, choices=["prompt_scheme", "image_input", "alpha"])
    p.add_argument("--cross-task-schemes", action="store_true",
                   help="also try schemes outside the task's own (full prompt-ablation grid)")
    p.add_argument("--parallel", type=int, default=0)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--logistic-plcc", action="store_true")
    _common(p)

    p = sub.add_parser("make-toy", help="write a synthetic corpus with a recoverable ranking")
    p.add_argument("directory", type=Path)
    p.add_argument("-n", type=int, default=50)
    p.add_argument("--epochs", type=int, default=20)
    _common(p)
    return parser


def resolve_config(args):
    from promptiqa.config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    backend = cfg.backend
    if args.backend:
        backend = replace(backend, kind=args.backend)
    if args.model_name:
        backend = replace(backend, model_name=args.model_name)
    if args.device:
        backend = replace(backend, device=args.device)
    if args.allow_download:
        backend = replace(backend, allow_download=True)
    train = cfg.train
    if args.seed is not None:
        train = replace(train, seed=args.seed)
        backend = replace(backend, seed=args.seed)
    if args.deterministic is not None:
        train = replace(train, deterministic=args.deterministic)
    overrides = {"backend": backend, "train": train}
    if args.task:
        overrides["task"] = args.task
        overrides["tasks"] = None
        if not args.scheme:
            overrides["scheme"] = None
    if args.scheme:
        overrides["scheme"] = args.scheme
    if args.alpha_mode:
        overrides["alpha_mode"] = args.alpha_mode
    if args.patches_n is not None:
        overrides["patches_n"] = args.patches_n
    if getattr(args, "repetitions", None):
        overrides["repetitions"] = args.repetitions
    if getattr(args, "logistic_plcc", False):
        overrides["logistic_plcc"] = True
    if args.output_dir:
        overrides["output_dir"] = str(args.output_dir)
    return replace(cfg, **overrides)


def cmd_score(args) -> int:
    import torch

    from promptiqa.backend import load_image
    from promptiqa.config import RunConfig, build_model
    from promptiqa.training import Checkpoint

    if not args.checkpoint and not args.zero_shot:
        raise ConfigError("score needs --checkpoint DIR or --zero-shot")
    img = load_image(args.image)
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        base = RunConfig.from_dict(ckpt.config)
        cfg = resolve_config(args) if args.config else _apply_cli(base, args)
        model = build_model(cfg)
        model.load_state_dict(ckpt.state_dict)
    else:
        cfg = resolve_config(args)
        model = build_model(cfg)
    torch.manual_seed(cfg.train.seed)
    report, quality = model.score(img, args.prompt)
    payload = {
        "image": str(args.image),
        "prompt": args.prompt,
        "task": cfg.task.value,
        "scheme": cfg.scheme.value,
        "zero_shot": bool(args.zero_shot),
        "config_hash": cfg.hash(),
        "sentences": list(model.prompt_set(args.prompt).sentences),
        **report.to_dict(),
        **quality.to_dict(),
    }
    text = json.dumps(payload, indent=2)
    print(text)
    if args.output:
        args.output.parent.mkdir(parents=True, exist_ok=True)
        args.output.write_text(text + "\n")
    if not args.quiet:
        lines = [f"{'level':<48} p_image  p_patch"]
        for s, pi, pp in zip(payload["sentences"], report.p_image, report.p_patch):
            lines.append(f"{s[:48]:<48} {pi:7.4f}  {pp:7.4f}")
        lines.append(f"w_image {report.w_image:.4f}  w_patch {report.w_patch:.4f}  "
                     f"temperature {report.temperature:.4g}")
        lines.append(f"Q_cg image {quality.q_cg_image:.4f}  Q_cg patch {quality.q_cg_patch:.4f}  "
                     f"Q_fg {quality.q_fg:.4f}  alpha {quality.alpha:.4f}")
        lines.append(f"Q = {quality.q_final:.4f}" + ("  (zero-shot)" if args.zero_shot else ""))
        print("\n".join(lines), file=sys.stderr)
    return 0


def _apply_cli(base, args):
    """Apply command-line overrides on top of a checkpoint's stored config."""
    from promptiqa.config import RunConfig

    overrides = {}
    if args.alpha_mode:
        overrides["alpha_mode"] = args.alpha_mode
    if args.patches_n is not None:
        overrides["patches_n"] = args.patches_n
    cfg = replace(base, **overrides) if overrides else base
    return RunConfig.from_dict(cfg.to_dict())


def _first_dataset(cfg):
    if not cfg.datasets:
        raise ConfigError("no datasets configured")
    return cfg.datasets[0]


def cmd_train(args) -> int:
    from promptiqa.benchmark import run_repetition, task_samples
    from promptiqa.config import build_model
    from promptiqa.backend import load_backend

    cfg = resolve_config(args)
    dataset = _first_dataset(cfg)
    backend = load_backend(cfg.backend)
    samples = task_samples(dataset, cfg.task, build_model(cfg, backend.clone()).levels)
    out_dir = Path(cfg.output_dir)
    cfg = replace(cfg, save_checkpoints=True)
    result = run_repetition(cfg, dataset, samples, args.repetition, out_dir, backend)
    ckpt_dir = out_dir / "checkpoints" / f"{dataset.name}_{cfg.task.value}_rep{args.repetition:02d}"
    print(json.dumps({"checkpoint": str(ckpt_dir), **result.row()}, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    from promptiqa.benchmark import task_samples
    from promptiqa.config import RunConfig, build_model
    from promptiqa.dataset import apply_split_manifest
    from promptiqa.training import Checkpoint, evaluate

    ckpt = Checkpoint.load(args.checkpoint)
    cfg = RunConfig.from_dict(ckpt.config)
    if args.config:
        cfg = replace(resolve_config(args), task=cfg.task, scheme=cfg.scheme)
    dataset = _first_dataset(cfg)
    model = build_model(cfg)
    model.load_state_dict(ckpt.state_dict)
    samples = task_samples(dataset, cfg.task, model.levels)
    if not ckpt.split_manifest:
        raise InputError("checkpoint records no split manifest")
    _, test = apply_split_manifest(samples, ckpt.split_manifest)
    result = evaluate(model, test, cfg.task, logistic=args.logistic_plcc)
    print(json.dumps(result.to_dict(), indent=2))
    return 0


def cmd_benchmark(args) -> int:
    from promptiqa.benchmark import run_benchmark

    cfg = resolve_config(args)
    rows = run_benchmark(cfg, parallel=args.parallel)
    _print_table(rows, ("dataset", "task", "scheme", "srcc_mean", "plcc_mean"))
    print(f"outputs: {cfg.output_dir}")
    return 0


def cmd_ablate(args) -> int:
    from promptiqa.benchmark import run_ablation

    cfg = resolve_config(args)
    if args.cross_task_schemes:
        cfg = replace(cfg, strict_scheme=False)
    rows = run_ablation(cfg, args.axis, cross_task=args.cross_task_schemes, parallel=args.parallel)
    _print_table(rows, ("dataset", "task", "setting", "srcc_mean", "plcc_mean"))
    return 0


def cmd_make_toy(args) -> int:
    from promptiqa.backend import BackendConfig, load_backend
    from promptiqa.config import RunConfig, build_model
    from promptiqa.synthetic import make_corpus

    seed = args.seed if args.seed is not None else 0
    directory = args.directory
    cfg_dict = {
        "tasks": ["perception", "alignment"],
        "alpha_mode": args.alpha_mode or "learned",
        "patches_n": args.patches_n or 5,
        "repetitions": 10,
        "output_dir": "runs",
        "backend": {"kind": "stub", "seed": seed},
        "train": {"epochs": args.epochs, "seed": seed},
        "datasets": [{"name": "toy", "manifest": "data.csv"}],
    }
    cfg = RunConfig.from_dict(cfg_dict)
    backend = load_backend(BackendConfig(**cfg_dict["backend"]))
    models = {
        "mos_quality": build_model(cfg.for_task("perception"), backend),
        "mos_align": build_model(cfg.for_task("alignment"), backend),
    }
    manifest = make_corpus(directory, models, n=args.n, seed=seed)
    (directory / "config.json").write_text(json.dumps(cfg_dict, indent=2) + "\n")
    print(f"wrote {manifest} and {directory / 'config.json'}")
    return 0


def _print_table(rows, columns) -> None:
    widths = [max(len(c), *(len(_cell(r[c])) for r in rows)) for c in columns]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for r in rows:
        print("  ".join(_cell(r[c]).ljust(w) for c, w in zip(columns, widths)))


def _cell(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


COMMANDS = {
    "score": cmd_score,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "ablate": cmd_ablate,
    "make-toy": cmd_make_toy,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IQAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
