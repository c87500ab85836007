"""Command-line entry point: ``heteromorpheus {train,eval,transfer,analyze,validate}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .analysis import AnalysisError, export_matrices_csv, export_series_csv, trace_attention
from .checkpoint import CheckpointError, read_checkpoint
from .env import EnvConfig
from .model import ModelConfig
from .morphology import EdgeScheme, MorphologyError, load_morphology_set, morphology_set_hash
from .rl import PPOConfig, TrainRunConfig, _worker_count, env_config_from_metadata, evaluate, train, transfer

log = logging.getLogger("heteromorpheus")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _section(cls, data: dict[str, Any], label: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"config section {label!r}: unknown keys {unknown}")
    data = dict(data)
    for key in ("global_hidden", "decoder_hidden"):
        if key in data:
            data[key] = tuple(data[key])
    return cls(**data)


def load_run_config(path: str | None) -> tuple[ModelConfig, PPOConfig, EnvConfig, dict[str, Any]]:
    """Read a JSON config with optional ``model``, ``ppo`` and ``env`` sections."""
    doc: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: malformed JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        extra = sorted(set(doc) - {"model", "ppo", "env", "train"})
        if extra:
            raise UsageError(f"{path}: unknown sections {extra}; expected model, ppo, env, train")
    try:
        model = _section(ModelConfig, doc.get("model", {}), "model")
        ppo = _section(PPOConfig, doc.get("ppo", {}), "ppo")
        env = _section(EnvConfig, doc.get("env", {}), "env")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    return model, ppo, env, doc.get("train", {})


def _morphs(path: str):
    if not Path(path).is_file():
        raise FileNotFoundError(f"morphology file not found: {path}")
    return load_morphology_set(path)


def _checkpoint(path: str):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return read_checkpoint(path)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _replace(obj, **changes):
    return type(obj)(**{**asdict(obj), **{k: v for k, v in changes.items() if v is not None}})


def cmd_train(args) -> int:
    model, ppo, env, extra = load_run_config(args.config)
    if args.variant is not None:
        model = _replace(model, scheme=EdgeScheme.parse(args.variant).value)
    if args.updates is not None:
        if args.updates < 0:
            raise UsageError("--updates must be >= 0")
        ppo = _replace(ppo, total_updates=args.updates)
    grids = _morphs(args.morphs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": {"model": model.to_dict(), "ppo": asdict(ppo), "env": asdict(env)},
        "morphologies": [g.name for g in grids],
        "morphology_set_hash": morphology_set_hash(grids),
        "seed": args.seed,
        "version": __version__,
        "started_at": _now(),
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    every = args.checkpoint_every if args.checkpoint_every is not None else int(extra.get("checkpoint_every", 0))
    result = train(TrainRunConfig(morphologies=grids, model=model, ppo=ppo, env=env, seed=args.seed,
                                  out_dir=out, checkpoint_every=every, workers=_worker_count()))
    manifest["finished_at"] = _now()
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    if result.metrics:
        print(f"trained {len(result.metrics)} updates; final mean return "
              f"{result.metrics[-1]['mean_return_overall']:.6g}")
    else:
        print("no updates requested; wrote initial checkpoint")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    params, config, meta = _checkpoint(args.checkpoint)
    for grid in _morphs(args.morph):
        res = evaluate((params, config), grid, args.episodes, deterministic=not args.stochastic,
                       seed=args.seed, env_config=env_config_from_metadata(meta))
        print(f"{grid.name}: mean {res.mean_return:.6f}")
        print("returns " + " ".join(f"{r:.6f}" for r in res.returns))
    return EXIT_OK


def cmd_transfer(args) -> int:
    if args.budget < 0:
        raise UsageError("--budget must be >= 0")
    _, ppo, _, _ = load_run_config(args.config)
    grids = _morphs(args.morphs)
    report = transfer(_checkpoint(args.checkpoint), grids, mode=args.mode, budget=args.budget,
                      seed=args.seed, ppo=ppo, eval_episodes=args.episodes, out_dir=args.out)
    for row in report["per_morphology"]:
        tail = "" if row["fine_tuned"] is None else f"  fine-tuned {row['fine_tuned']:.6f}"
        print(f"{row['name']}: zero-shot {row['zero_shot']:.6f}{tail}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    checkpoint = _checkpoint(args.checkpoint)
    grids = _morphs(args.morph)
    if len(grids) != 1:
        raise UsageError("--morph must contain exactly one morphology")
    layers = checkpoint[1].num_layers
    if not 0 <= args.layer < layers:
        raise UsageError(f"--layer must be in [0, {layers - 1}]")
    trace = trace_attention(checkpoint, grids[0], steps=args.steps, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chosen = [args.layer]
    export_series_csv(trace, out / "stable_rank.csv", chosen)
    flagged = [r for layer in chosen for r in trace.flagged(layer)]
    if flagged:
        export_matrices_csv(flagged, out / "attention_extrema.csv")
    export_matrices_csv([r for r in trace.records if r.layer in chosen], out / "attention.csv")
    for layer in chosen:
        s = trace.series[layer]
        print(f"layer {layer}: stable rank min {s.min():.6f} max {s.max():.6f}; "
              f"{int(trace.peaks[layer].sum())} peaks, {int(trace.valleys[layer].sum())} valleys")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    grids = _morphs(args.morphs)
    for g in grids:
        print(f"ok {g.name}: {g.rows}x{g.cols}, {g.num_voxels} voxels")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="heteromorpheus", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a universal policy on a morphology set")
    p.add_argument("--config", help="JSON file with model/ppo/env sections")
    p.add_argument("--morphs", required=True, help="JSON array of morphologies")
    p.add_argument("--variant", choices=["n", "d", "homo"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--updates", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--morph", required=True)
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--stochastic", action="store_true", help="sample actions instead of using the mean")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="zero-shot / fine-tune on held-out morphologies")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--morphs", required=True)
    p.add_argument("--mode", choices=["zero-shot", "fine-tune"], default="zero-shot")
    p.add_argument("--budget", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=3)
    p.add_argument("--config", help="JSON file whose ppo section drives fine-tuning")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("analyze", help="trace attention and its stable rank over one episode")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--morph", required=True)
    p.add_argument("--steps", type=int, default=128)
    p.add_argument("--layer", type=int, default=0, help="layer whose series is exported (default 0)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("validate", help="parse and check a morphology set")
    p.add_argument("--morphs", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MorphologyError, CheckpointError, AnalysisError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
