"""Command-line surface tying the pipeline together.

Subcommands: preprocess, make-maps, synth, train, sample, evaluate,
plot. Every run writes a manifest (config hash, seed, versions) beside
its outputs so results can be reproduced byte-for-byte. Exit codes:
0 success, 1 validation/usage error, 2 numerical fault.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from . import diffnet as dn
from . import metrics as met
from . import model as mdl
from . import preprocess as pre
from . import training as trn
from . import viz
from .episodes import (load_episodes, load_predictions, save_episodes,
                       save_predictions)
from .errors import NumericalFault, ValidationError
from .scenemap import (build_p_tilde, context_stats, distance_transform,
                       save_grid, value_stats)
from .synthetic import synth_fork

CONFIG_KEYS = {
    "alpha": float, "beta": float, "lr": float, "epochs": int,
    "patience": int, "k": int, "seed": int, "n_samples": int,
    "early_stop": int, "train_episodes": str, "val_episodes": str,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def parse_config(path: str | None, overrides: list[str]) -> dict:
    """key=value config file plus --set overrides; unknown keys rejected."""
    config: dict = {}

    def apply(key: str, raw: str, where: str):
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ValidationError(f"{where}: unknown config key {key!r}")
        try:
            config[key] = CONFIG_KEYS[key](raw.strip())
        except ValueError as exc:
            raise ValidationError(f"{where}: bad value for {key}: {raw!r}") from exc

    if path:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValidationError(f"{path}:{lineno}: expected key=value")
                key, raw = line.split("=", 1)
                apply(key, raw, f"{path}:{lineno}")
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"--set {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        apply(key, raw, f"--set {item}")
    return config


def write_manifest(out_dir: str, subcommand: str, config: dict,
                   seed: int | None, inputs: list[str], outputs: list[str]) -> str:
    canonical = json.dumps({"config": config, "seed": seed}, sort_keys=True)
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "versions": {"trajflow": __version__, "numpy": np.__version__},
        "inputs": inputs,
        "outputs": outputs,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _prepare_corpus(episodes, ctx_hw: int, stats=None):
    return trn.prepare_episodes(episodes, ctx_hw, stats)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    episodes = synth_fork(args.n, args.seed)
    out_file = os.path.join(args.out, "episodes.jsonl")
    save_episodes(episodes, out_file)
    write_manifest(args.out, "synth", {"n": args.n}, args.seed, [], [out_file])
    print(f"wrote {len(episodes)} episodes to {out_file}")
    return 0


def cmd_preprocess(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    tracks = pre.load_raw_tracks(args.tracks)
    models = {t.agent_id: pre.em_fit(t, args.em_iters) for t in tracks}
    smoothed = [pre.smooth_impute(t, models[t.agent_id]) for t in tracks]
    world = pre.WorldMask(
        _load_world_mask(args.mask), origin=_parse_xy(args.mask_origin))
    episodes, skips = pre.extract_snippets(
        smoothed, world.window_at, ego_agent_id=args.ego_agent,
        stride=args.stride, scene_id=args.scene_id)
    out_file = os.path.join(args.out, "episodes.jsonl")
    save_episodes(episodes, out_file)
    write_manifest(args.out, "preprocess",
                   {"em_iters": args.em_iters, "stride": args.stride,
                    "ego_agent": args.ego_agent, "skips": skips},
                   None, [args.tracks, args.mask], [out_file])
    print(f"wrote {len(episodes)} episodes to {out_file} (skipped: {skips})")
    return 0


def _load_world_mask(path):
    from .episodes import load_road_mask
    return load_road_mask(path, expect_size=None).grid


def _parse_xy(text: str) -> np.ndarray:
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ValidationError(f"expected 'x,y', got {text!r}") from exc
    return np.array([x, y])


def cmd_make_maps(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    episodes = load_episodes(args.episodes)
    dists = [distance_transform(ep.road_mask) for ep in episodes]
    pt_stats = value_stats(dists)
    ctx_stats = context_stats(dists)
    outputs = []
    for ep, dist in zip(episodes, dists):
        p_tilde = build_p_tilde(dist, pt_stats)
        dist_path = os.path.join(args.out, f"{ep.episode_id}.dist")
        pt_path = os.path.join(args.out, f"{ep.episode_id}.ptilde")
        save_grid(dist.grid, dist_path)
        save_grid(p_tilde.prob, pt_path)
        outputs.extend([dist_path, pt_path])
    stats_path = os.path.join(args.out, "stats.json")
    with open(stats_path, "w", encoding="utf-8") as fh:
        json.dump({"p_tilde": list(pt_stats),
                   "context": np.asarray(ctx_stats).tolist()}, fh, indent=2)
        fh.write("\n")
    write_manifest(args.out, "make-maps", {}, None, [args.episodes],
                   outputs + [stats_path])
    print(f"wrote {len(episodes)} map pairs to {args.out}")
    return 0


def _load_stats(path):
    with open(path, "r", encoding="utf-8") as fh:
        blob = json.load(fh)
    return (tuple(blob["p_tilde"]), np.asarray(blob["context"]))


def cmd_train(args) -> int:
    config_path = args.config or os.environ.get("TRAJFLOW_CONFIG")
    if not config_path:
        raise ValidationError(
            "train needs --config (or the TRAJFLOW_CONFIG environment variable)")
    config = parse_config(config_path, args.set or [])
    seed = args.seed if args.seed is not None else config.get("seed")
    if seed is None:
        raise ValidationError("train needs a seed (flag --seed or config key)")
    for key in ("train_episodes", "val_episodes"):
        if key not in config:
            raise ValidationError(f"config must set {key}")
    os.makedirs(args.out, exist_ok=True)
    settings = trn.TrainSettings(
        seed=int(seed),
        alpha=config.get("alpha", 0.5), beta=config.get("beta", 0.1),
        lr=config.get("lr", 1e-4), epochs=config.get("epochs", 100),
        patience=config.get("patience", 3), k=config.get("k", 12),
        n_samples=config.get("n_samples", 2),
        early_stop=config.get("early_stop", 10))
    cfg = mdl.ModelConfig(alpha=settings.alpha)
    train_eps = load_episodes(config["train_episodes"])
    val_eps = load_episodes(config["val_episodes"])
    train_set, stats = _prepare_corpus(train_eps, cfg.ctx_hw)
    val_set, _ = _prepare_corpus(val_eps, cfg.ctx_hw, stats)
    params = mdl.init_params(cfg, settings.seed)
    result = trn.train(train_set, val_set, params, cfg, settings)
    ckpt_path = os.path.join(args.out, "checkpoint.dfn")
    dn.save_checkpoint(params, ckpt_path)
    log_path = os.path.join(args.out, "log.csv")
    trn.write_log(result.log, log_path)
    stats_path = os.path.join(args.out, "stats.json")
    with open(stats_path, "w", encoding="utf-8") as fh:
        json.dump({"p_tilde": list(stats[0]),
                   "context": np.asarray(stats[1]).tolist()}, fh, indent=2)
        fh.write("\n")
    write_manifest(args.out, "train", config, int(seed),
                   [config["train_episodes"], config["val_episodes"]],
                   [ckpt_path, log_path, stats_path])
    status = "aborted on non-finite loss" if result.aborted else (
        "stopped early" if result.stopped_early else "completed")
    print(f"training {status}: {result.steps} steps, "
          f"best val avgADE+avgFDE {result.best_score:.3f}")
    return 0


def _prepare_for_inference(episodes, cfg, stats_path):
    stats = _load_stats(stats_path) if stats_path else None
    prepared, _ = _prepare_corpus(episodes, cfg.ctx_hw, stats)
    return prepared


def cmd_sample(args) -> int:
    episodes = load_episodes(args.episodes)
    cfg = mdl.ModelConfig(alpha=args.alpha)
    params = mdl.init_params(cfg, seed=0)
    params.load_values(dn.load_checkpoint(args.checkpoint))
    prepared = _prepare_for_inference(episodes, cfg, args.stats)
    predictions = []
    for i, prep in enumerate(prepared):
        predictions.append(mdl.sample_k(
            prep.episode, prep.ctx64, params, cfg, args.k,
            seed=trn.derive_seed(args.seed, i), alpha=args.alpha))
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    save_predictions(predictions, args.out)
    write_manifest(out_dir, "sample",
                   {"k": args.k, "alpha": args.alpha}, args.seed,
                   [args.episodes, args.checkpoint], [args.out])
    print(f"wrote predictions for {len(predictions)} episodes to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    episodes = load_episodes(args.episodes)
    predictions = load_predictions(args.predictions)
    report, ri_table = met.evaluate(episodes, predictions)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "report.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    table_path = os.path.join(args.out, "report.txt")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_table() + "\n\n" + ri_table.to_table() + "\n")
    write_manifest(args.out, "evaluate", {}, None,
                   [args.episodes, args.predictions], [csv_path, table_path])
    print(report.to_table())
    return 0


def cmd_plot(args) -> int:
    episodes = load_episodes(args.episodes)
    index = {ep.episode_id: i for i, ep in enumerate(episodes)}
    if args.episode_id not in index:
        raise ValidationError(f"episode {args.episode_id!r} not found")
    episode = episodes[index[args.episode_id]]
    dists = [distance_transform(ep.road_mask) for ep in episodes]
    stats = _load_stats(args.stats)[0] if args.stats else value_stats(dists)
    p_tilde = build_p_tilde(dists[index[args.episode_id]], stats)
    predictions = None
    if args.predictions:
        for pset in load_predictions(args.predictions):
            if pset.episode_id == args.episode_id:
                predictions = pset
                break
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    viz.plot(episode, p_tilde, predictions, args.out)
    write_manifest(out_dir, "plot", {"episode_id": args.episode_id}, None,
                   [args.episodes], [args.out])
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="trajflow",
                     description="Trajectory forecasting pipeline")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate synthetic fork episodes")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="smooth raw tracks into episodes")
    p.add_argument("--tracks", required=True)
    p.add_argument("--mask", required=True, help="world drivable-area PGM")
    p.add_argument("--mask-origin", default="0,0",
                   help="world x,y of the mask center")
    p.add_argument("--ego-agent", type=int, required=True)
    p.add_argument("--em-iters", type=int, default=10)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--scene-id", default="scene")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("make-maps", help="emit .dist/.ptilde per episode")
    p.add_argument("--episodes", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_maps)

    p = sub.add_parser("train", help="train the forecaster")
    p.add_argument("--config", help="key=value file; defaults to $TRAJFLOW_CONFIG")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw k hypotheses per agent")
    p.add_argument("--episodes", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--stats", help="stats.json from training")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="score predictions against episodes")
    p.add_argument("--episodes", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="render one episode as a PNG")
    p.add_argument("--episodes", required=True)
    p.add_argument("--episode-id", required=True)
    p.add_argument("--predictions")
    p.add_argument("--stats")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
