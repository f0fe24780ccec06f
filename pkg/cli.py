#!/usr/bin/env python3
"""
LatentFormer command line.

    python cli.py generate --scenes 500 --seed 1 --out scenes.jsonl
    python cli.py train --data scenes.jsonl --config run.json --out ckpt/
    python cli.py eval --ckpt ckpt/ --data test.jsonl --k 12 --report report.json
    python cli.py predict --ckpt ckpt/ --data test.jsonl --out preds.jsonl
    python cli.py render --data test.jsonl --scene s00003 --pred preds.jsonl --out s00003.svg
    python cli.py selftest
"""

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

from config import PROFILES, load_run_config, profile_config
from errors import FormatError, LatentFormerError, SelftestFailure, UsageError
from evaluation import evaluate, load_predictions, predict_all, save_predictions
from experiments import VARIANTS, benchmark_decoding, run_ablation
from model import LatentFormer, load_predictor
from render import write_svg
from scene_data import Scene, SceneSet, generate_sceneset, split_sceneset
from selftest import SUITES, run_selftest
from training import train

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
MISSING_FILE_EXIT = 3

EXIT_CODES = """exit codes:
  0  success
  1  unexpected internal failure
  2  usage error (unknown flag, bad value)
  3  missing input file
  4  configuration violation
  5  malformed scene-set, checkpoint or prediction file
  6  training aborted (non-finite loss)
  7  selftest failure

errors are reported on stderr as:
  error code=<N> kind=<ErrorClass> message="<text>"
"""


class CliArgumentParser(argparse.ArgumentParser):
    """Raises UsageError instead of exiting, so every failure goes through one reporter."""

    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> CliArgumentParser:
    parser = CliArgumentParser(prog="latentformer", description="Multi-agent trajectory prediction with a "
                               "discrete intention latent.", epilog=EXIT_CODES,
                               formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--print-config", action="store_true", help="print the run configuration and exit")
    parser.add_argument("--profile", choices=PROFILES, default="small", help="profile for --print-config")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    verbosity.add_argument("--quiet", "-q", action="store_true", help="warnings and errors only")
    commands = parser.add_subparsers(dest="command", metavar="command")

    p = commands.add_parser("generate", help="write a synthetic scene set")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("intersection", "follow", "mixed"), default="intersection")
    p.add_argument("--max-agents", type=int, default=3, help="agents per intersection scene, at most")
    p.add_argument("--jitter", type=float, default=0.05, help="observation noise std in meters")

    p = commands.add_parser("train", help="train a model with EM")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="run configuration JSON; the small profile when omitted")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.add_argument("--seed", type=int, default=0, help="parameter initialisation seed")

    p = commands.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, help="modes per agent, default all")
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--sampled", action="store_true", help="sample each step instead of taking the mean")
    p.add_argument("--seed", type=int, default=0)

    p = commands.add_parser("predict", help="write mode-conditioned predictions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--sampled", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = commands.add_parser("render", help="draw one scene as SVG")
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True, help="scene id")
    p.add_argument("--pred", help="prediction file from `predict`")
    p.add_argument("--out", required=True)

    p = commands.add_parser("selftest", help="gradient-check and oracle suites")
    p.add_argument("--suite", choices=SUITES, action="append", help="run only this suite (repeatable)")

    p = commands.add_parser("ablation", help="train and compare model variants over seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="base run configuration JSON")
    p.add_argument("--out", required=True, help="CSV summary path")
    p.add_argument("--variants", nargs="+", choices=list(VARIANTS))
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--test-fraction", type=float, default=0.2)

    p = commands.add_parser("benchmark", help="time AR against NAR decoding")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", help="scene id, default the first")
    p.add_argument("--repeats", type=int, default=5)
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = os.getenv("LATENTFORMER_LOG_LEVEL", "INFO").upper()
    if verbose:
        level = "DEBUG"
    elif quiet:
        level = "WARNING"
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise UsageError(f"LATENTFORMER_LOG_LEVEL must be a logging level name, got {level!r}")
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, force=True)


def error_line(code: int, exc: BaseException) -> str:
    message = str(exc).replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ")
    return f'error code={code} kind={type(exc).__name__} message="{message}"'


def _require_file(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _run_config(path: Optional[str]):
    return profile_config("small") if path is None else load_run_config(_require_file(path))


def _scene(sceneset: SceneSet, scene_id: str) -> Scene:
    try:
        return sceneset.by_id(scene_id)
    except KeyError:
        raise UsageError(f"no scene with id {scene_id!r} in the scene set") from None


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.scenes < 1:
        raise UsageError(f"--scenes must be >= 1, got {args.scenes}")
    print(f"🔄 Generating {args.scenes} {args.kind} scenes (seed {args.seed})...")
    sceneset = generate_sceneset(args.scenes, args.seed, kind=args.kind, max_agents_per_scene=args.max_agents,
                                 jitter=args.jitter)
    sceneset.save(args.out)
    shares = sceneset.route_frequencies()
    print(f"✅ Wrote {len(sceneset)} scenes to {args.out}")
    print(f"📊 Routes: {', '.join(f'{route}={share:.2f}' for route, share in shares.items())}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args.config)
    dataset = SceneSet.load(_require_file(args.data))
    model = LatentFormer(run.model, seed=args.seed)
    print(f"🤖 Training {run.profile} profile: {model.params.num_parameters()} parameters, "
          f"{len(dataset)} scenes, {run.train.epochs} epochs")
    result = train(model, dataset, run.train, out_dir=args.out, resume=args.resume)
    last = result.metrics.iloc[-1] if len(result.metrics) else None
    if last is not None:
        print(f"✅ Finished epoch {int(last['epoch'])}: loss={last['loss']:.4f}")
    print(f"💾 Checkpoint saved to {args.out}")
    return 0


def _load(args):
    model = load_predictor(args.ckpt)
    sceneset = SceneSet.load(_require_file(args.data))
    return model, sceneset


def _modes(args, model) -> int:
    if args.k is None:
        return model.modes
    if not 1 <= args.k <= model.modes:
        raise UsageError(f"--k must be in 1..{model.modes} for this checkpoint, got {args.k}")
    return args.k


def cmd_eval(args) -> int:
    model, sceneset = _load(args)
    select = "sample" if args.sampled else "mean"
    report = evaluate(model, sceneset, k=_modes(args, model), select=select, seed=args.seed)
    with open(args.report, "w", encoding="utf-8", newline="\n") as f:
        f.write(report.to_json())
    print(report.to_text(), end="")
    print(f"💾 Report saved to {args.report}")
    return 0


def cmd_predict(args) -> int:
    model, sceneset = _load(args)
    k = _modes(args, model)
    select = "sample" if args.sampled else "mean"
    predictions = predict_all(model, sceneset, k, select=select, seed=args.seed)
    save_predictions(args.out, sceneset, predictions, k, "mode-mean" if select == "mean" else "sampled")
    print(f"✅ Wrote {k} modes for {len(sceneset)} scenes to {args.out}")
    return 0


def cmd_render(args) -> int:
    sceneset = SceneSet.load(_require_file(args.data))
    scene = _scene(sceneset, args.scene)
    predictions = None
    if args.pred:
        _, by_id = load_predictions(_require_file(args.pred))
        if scene.id not in by_id:
            raise FormatError(f"prediction file has no record for scene {scene.id}", scene_id=scene.id)
        predictions = by_id[scene.id]
        if predictions.shape[1:] != scene.future_array().shape:
            raise FormatError(f"predictions {list(predictions.shape)} do not fit the scene's agents and horizon",
                              scene_id=scene.id)
    write_svg(args.out, scene, predictions)
    print(f"🖼️ Rendered scene {scene.id} to {args.out}")
    return 0


def cmd_selftest(args) -> int:
    report = run_selftest(tuple(args.suite or SUITES))
    print(report.to_text(), end="")
    if not report.passed:
        raise SelftestFailure(f"{len(report.failures)} of {len(report.results)} checks failed")
    print("✅ All self-tests passed")
    return 0


def cmd_ablation(args) -> int:
    run = _run_config(args.config)
    dataset = SceneSet.load(_require_file(args.data))
    train_set, test_set = split_sceneset(dataset, args.test_fraction, seed=run.train.seed)
    result = run_ablation(train_set, test_set, run, variants=args.variants, seeds=args.seeds)
    result.summary.to_csv(args.out)
    print(result.summary.to_string(float_format=lambda v: f"{v:.4f}"))
    print(f"💾 Summary saved to {args.out}")
    return 0


def cmd_benchmark(args) -> int:
    model, sceneset = _load(args)
    if not isinstance(model, LatentFormer):
        raise UsageError("benchmark needs a trained LatentFormer checkpoint")
    scene = _scene(sceneset, args.scene) if args.scene else sceneset[0]
    frame = benchmark_decoding(model, scene, repeats=args.repeats)
    print(frame.to_string(float_format=lambda v: f"{v:.5f}"))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "render": cmd_render,
    "selftest": cmd_selftest,
    "ablation": cmd_ablation,
    "benchmark": cmd_benchmark,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
        except SystemExit as e:
            return int(e.code or 0)
        configure_logging(args.verbose, args.quiet)
        if args.print_config:
            print(profile_config(args.profile).to_json())
            return 0
        if args.command is None:
            raise UsageError("a command is required; see --help")
        return COMMANDS[args.command](args)
    except LatentFormerError as e:
        print(error_line(e.exit_code, e), file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(error_line(MISSING_FILE_EXIT, e), file=sys.stderr)
        return MISSING_FILE_EXIT
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        print(error_line(1, e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
