"""Command-line entry point: ``cotseg <command> [flags]``.

Exit codes: 0 success, 1 usage, 2 chain/backend failure, 3 model/data failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .backend import BackendDescriptor
from .datakit.manifest import load_manifest
from .errors import BackendError, ChainError, CotSegError, ScriptMissError
from .orchestrator import DEFAULT_TEMPLATES, load_templates

EXIT_OK, EXIT_USAGE, EXIT_CHAIN, EXIT_MODEL = 0, 1, 2, 3

logger = logging.getLogger("cotseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _require_paths(**paths):
    for flag, p in paths.items():
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"--{flag.replace('_', '-')}: {p} does not exist")


def _templates(args):
    return load_templates(args.templates) if getattr(args, "templates", None) else DEFAULT_TEMPLATES


def _snapshot(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def cmd_make_synth(args) -> int:
    from .datakit.synth import make_fire_pit_bundle, make_synthetic
    from .pipeline import write_run_manifest

    write_run_manifest(args.out, "make-synth", _snapshot(args), args.seed)
    if args.demo:
        bundle = make_fire_pit_bundle(args.out, args.embedding_width)
        print(json.dumps({k: str(v) for k, v in bundle.items()}))
        return EXIT_OK
    records = make_synthetic(
        args.out,
        args.count,
        image_size=args.image_size,
        seed=args.seed,
        colors=args.colors.split(","),
        shapes=args.shapes.split(","),
        ambiguous_fraction=args.ambiguous_fraction,
        referring_fraction=args.referring_fraction,
        embedding_width=args.embedding_width,
        id_prefix=args.id_prefix,
    )
    print(f"wrote {len(records)} samples to {args.out}")
    return EXIT_OK


def cmd_cache_traces(args) -> int:
    from .pipeline import cache_traces, write_run_manifest

    _require_paths(manifest=args.manifest, backend=args.backend, templates=args.templates)
    write_run_manifest(args.out, "cache-traces", _snapshot(args), args.seed, [args.manifest, args.backend, args.templates])
    records = load_manifest(args.manifest)
    backend = BackendDescriptor.load(args.backend).connect()
    report = cache_traces(records, backend, args.out, mode=args.mode, templates=_templates(args), qa_seed=args.seed, concurrency=args.concurrency)
    print(json.dumps({"written": len(report.written), "skipped": len(report.skipped), "failed": report.failed, "digest": report.digest}))
    return EXIT_CHAIN if report.failed else EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import load_cached_data, write_run_manifest
    from .segcore.checkpoint import read_checkpoint
    from .segcore.model import PromptableSegmenter
    from .training import TrainConfig, fit

    _require_paths(manifest=args.manifest, cache=args.cache, resume=args.resume)
    config = TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        lambda_bce=args.lambda_bce,
        lambda_dice=args.lambda_dice,
        batch_size=args.batch_size,
        total_iterations=args.iterations,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        train_projection=not args.freeze_projection,
    )
    write_run_manifest(args.out, "train", {**_snapshot(args), "train_config": asdict(config)}, args.seed, [args.manifest])
    records = load_manifest(args.manifest)
    data = load_cached_data(records, args.cache, args.arm)
    if args.resume:
        manifest, _, _ = read_checkpoint(args.resume)
        model = PromptableSegmenter(**manifest["model_config"])
    else:
        width = data.prompts[0].shape[1]
        model = PromptableSegmenter(d_llm=width, d_vis=args.d_vis, d_hidden=args.d_hidden, scales=args.scales, seed=args.seed)
    result = fit(config, data, model, out_dir=args.out, resume_from=args.resume)
    last = result.losses[-1] if result.losses else {}
    print(json.dumps({"iterations": result.iteration, "checkpoint": str(result.checkpoints[-1]), "last": last}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import evaluate_to_file, write_run_manifest
    from .segcore.checkpoint import load_checkpoint

    _require_paths(manifest=args.manifest, cache=args.cache, checkpoint=args.checkpoint)
    write_run_manifest(args.out, "eval", _snapshot(args), args.seed, [args.manifest, args.checkpoint])
    model, _, _ = load_checkpoint(args.checkpoint)
    records = load_manifest(args.manifest)
    aggregate = evaluate_to_file(model, records, args.cache, Path(args.out) / "eval_report.csv", args.arm)
    print(json.dumps(aggregate))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .pipeline import infer, write_run_manifest
    from .segcore.checkpoint import load_checkpoint

    _require_paths(image=args.image, backend=args.backend, templates=args.templates)
    try:
        _require_paths(checkpoint=args.checkpoint)
        model, _, _ = load_checkpoint(args.checkpoint)
    except (FileNotFoundError, CotSegError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    backend = BackendDescriptor.load(args.backend).connect()
    write_run_manifest(args.out, "infer", _snapshot(args), args.seed, [args.image, args.checkpoint, args.backend])
    result = infer(args.image, args.query, model, backend, args.out, mode=args.mode, templates=_templates(args), arm=args.arm)
    print(json.dumps({"target": result["trace"].target, **{k: str(v) for k, v in result["paths"].items()}}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .pipeline import AblationConfig, ablate, write_run_manifest
    from .training import TrainConfig

    cfg = AblationConfig(
        n_train=args.n_train,
        n_eval=args.n_eval,
        seed=args.seed,
        train=TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, total_iterations=args.iterations, seed=args.seed),
    )
    write_run_manifest(args.out, "ablate", {**_snapshot(args), "train_config": asdict(cfg.train)}, args.seed)
    report = ablate(args.suite, args.out, cfg)
    path = Path(args.out) / f"ablation_{args.suite}.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for name, row in report["arms"].items():
        ref = report["full_scale_reference"][name]
        print(f"{name:>8}: gIoU {row['gIoU']:.4f} cIoU {row['cIoU']:.4f}   (reference at full scale: {ref['gIoU']}/{ref['cIoU']})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cotseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("make-synth", help="generate the synthetic attribute benchmark")
    common(s)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--colors", default="red,green,blue,yellow")
    s.add_argument("--shapes", default="circle,square,triangle")
    s.add_argument("--ambiguous-fraction", type=float, default=0.8)
    s.add_argument("--referring-fraction", type=float, default=0.0)
    s.add_argument("--embedding-width", type=int, default=64)
    s.add_argument("--id-prefix", default="syn")
    s.add_argument("--demo", action="store_true", help="write the fire-pit demo bundle instead")
    s.set_defaults(func=cmd_make_synth)

    s = sub.add_parser("cache-traces", help="run the prompting chain once per sample and cache embeddings")
    common(s)
    s.add_argument("--manifest", required=True)
    s.add_argument("--backend", required=True, help="backend descriptor JSON")
    s.add_argument("--templates")
    s.add_argument("--mode", choices=("merged", "separate"), default="merged")
    s.add_argument("--concurrency", type=int, default=4)
    s.set_defaults(func=cmd_cache_traces)

    s = sub.add_parser("train", help="train adapters, decoder and projection")
    common(s)
    s.add_argument("--manifest", required=True)
    s.add_argument("--cache", required=True, help="trace cache directory")
    s.add_argument("--arm", choices=("reason", "name", "full"), default="full")
    s.add_argument("--scales", choices=("all", "deepest"), default="all")
    s.add_argument("--iterations", type=int, default=1000)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--weight-decay", type=float, default=1e-4)
    s.add_argument("--lambda-bce", type=float, default=1.0)
    s.add_argument("--lambda-dice", type=float, default=0.5)
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--resume")
    s.add_argument("--d-vis", type=int, default=128)
    s.add_argument("--d-hidden", type=int, default=256)
    s.add_argument("--freeze-projection", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a cached manifest")
    common(s)
    s.add_argument("--manifest", required=True)
    s.add_argument("--cache", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--arm", choices=("reason", "name", "full"), default="full")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="segment one image from a free-form query")
    common(s)
    s.add_argument("--image", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--backend", required=True)
    s.add_argument("--templates")
    s.add_argument("--mode", choices=("merged", "separate"), default="merged")
    s.add_argument("--arm", choices=("reason", "name", "full"), default="full")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("ablate", help="prompt-step or scale ablation on the synthetic benchmark")
    common(s)
    s.add_argument("--suite", choices=("prompt-steps", "scales"), required=True)
    s.add_argument("--n-train", type=int, default=500)
    s.add_argument("--n-eval", type=int, default=100)
    s.add_argument("--iterations", type=int, default=3000)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-3)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ChainError, BackendError, ScriptMissError) as exc:
        print(f"chain error: {exc}", file=sys.stderr)
        return EXIT_CHAIN
    except CotSegError as exc:
        print(f"model/data error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
