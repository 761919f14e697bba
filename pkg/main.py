import sys
import json
import argparse
import logging

import source.settings as settings
from source.config import load_config
from source.errors import EmbedderUnavailable, HOIGenError
from source.eval_harness import build_embedder
from source.pipeline import evaluate, inspect_attention, replay, run_batch, run_generate

logger = logging.getLogger("main")


# -----------------------------
# CLI Parser
# -----------------------------
def _common_flags() -> argparse.ArgumentParser:
    """Flags every command shares; they override the config file."""
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=None, help="Flat key=value config file (see docs/config.md).")
    p.add_argument("--seed", type=int, default=None, help="Base seed; candidate i uses seed + i.")
    p.add_argument("--modules", default=None, choices=sorted(settings.MODULE_SETS),
                   help="Ablation shape: sd | g | g,r | g,r,c (default: g,r,c).")
    p.add_argument("--backbone", default=None, choices=["toy", "ldm-adapter"],
                   help="Denoising backbone (default: toy).")
    p.add_argument("--vlm", default=None, choices=["mock", "remote"],
                   help="VLM client for the agents (default: mock).")
    p.add_argument("--out", default=None, help=f"Runs directory (default: {settings.runs_path}).")
    p.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE",
                   help="Override any config key; may be repeated. Applied last.")
    p.add_argument("--log-level", default="INFO", help="Logging level (default: INFO).")
    return p


def _parse_args(argv=None):
    """
    Parse command-line arguments for the generation pipeline.
    """
    common = _common_flags()
    p = argparse.ArgumentParser(
        description="Generate human-object interaction images with pose selection and layout correction."
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="Run one prompt through the enabled modules.")
    g.add_argument("prompt", nargs="?", default=None,
                   help='"subject|verb|object" or a sentence such as "a man is kicking a ball".')
    g.add_argument("--from-manifest", default=None,
                   help="Re-execute a run from its manifest.json instead of a prompt.")

    b = sub.add_parser("batch", parents=[common], help="One run per line of a prompt file.")
    b.add_argument("prompt_file", help="UTF-8 prompt list, one record per line, '#' comments.")
    b.add_argument("--workers", type=int, default=None, help="Concurrent runs (default: 1).")
    b.add_argument("--augment-subjects", type=int, default=0,
                   help="Redraw the subject N times per line from the subject pool.")

    e = sub.add_parser("evaluate", parents=[common], help="CLIP-Score finished runs.")
    e.add_argument("--run", default=None, help="Run id (default: every run under --out).")
    e.add_argument("--embedder", default=None, choices=["none", "clip"], help="Embedding provider.")

    i = sub.add_parser("inspect-attention", parents=[common], help="Dump a run's attention maps.")
    i.add_argument("--run", required=True, help="Run id.")
    i.add_argument("--step", type=int, required=True, help="Countdown step t.")
    i.add_argument("--layer", default=None, help="Layer id (default: every recorded layer).")
    i.add_argument("--dumps", default=settings.dumps_path, help=f"Dump directory (default: {settings.dumps_path}).")

    args = p.parse_args(argv)
    if args.command == "generate" and not (args.prompt or args.from_manifest):
        p.error("generate needs a prompt or --from-manifest")
    return args


def _config(args):
    flags = {
        "seed": args.seed,
        "modules": args.modules,
        "backbone": args.backbone,
        "vlm": args.vlm,
        "out": args.out,
        "workers": getattr(args, "workers", None),
        "embedder": getattr(args, "embedder", None),
    }
    return load_config(args.config, flags, args.assignments)


# -----------------------------
# Main
# -----------------------------
def main(argv=None) -> int:
    """
    Main entry point: parse CLI args, dispatch the command and print its result as JSON.
    """
    args = _parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        cfg = _config(args)
        if args.command == "generate":
            if args.from_manifest:
                outcome = replay(args.from_manifest, cfg)
            else:
                outcome = run_generate(args.prompt, cfg)
            results = {"run_dir": outcome.path, **outcome.manifest}
        elif args.command == "batch":
            results = run_batch(args.prompt_file, cfg, augment=args.augment_subjects)
        elif args.command == "evaluate":
            embedder = build_embedder(cfg.embedder, cfg.clip_model, cfg.device)
            if embedder is None:
                raise EmbedderUnavailable("no embedder configured (use --embedder clip)")
            results = evaluate(cfg.out, embedder, run_id=args.run)
        else:
            results = inspect_attention(cfg.out, args.run, args.step, args.layer, args.dumps)
    except HOIGenError as e:
        logger.error("%s", e)
        print(json.dumps({"status": "error", "error": str(e)}, ensure_ascii=False, indent=2), file=sys.stderr)
        return 1

    print(json.dumps(results, ensure_ascii=False, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
