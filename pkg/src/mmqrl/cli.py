"""Command-line entry point: ``mmqrl <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .env_plane import SUCCESS
from .matching import MatchIndex
from .motion_db import (
    FEATURE_DIM,
    FeatureDatabase,
    GaitConfig,
    GaitConfigError,
    build_feature_database,
    generate_synthetic_locomotion,
    read_clips,
    write_clips,
)
from .nets import ActorCritic, arch_for_env, load_checkpoint
from .ppo import RunningStat, database_for, evaluate, make_env, train

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("mmqrl")


def _sha(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _write_sidecar(path: Path, config: dict) -> str:
    digest = _sha(config)
    Path(str(path) + ".json").write_text(json.dumps({"config": config, "config_sha256": digest},
                                                    sort_keys=True, indent=2) + "\n")
    return digest


# -- data ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = GaitConfig(minutes=args.minutes)
    cfg.validate()
    clips = generate_synthetic_locomotion(cfg, args.seed)
    out = Path(args.out)
    write_clips(out, clips)
    digest = _write_sidecar(out, {"command": "gen-data", "seed": args.seed, "gait": cfg.to_dict()})
    n = sum(len(c) for c in clips)
    print(f"wrote {len(clips)} clips, {n} frames to {out} (config {digest[:12]})")
    return EXIT_OK


def cmd_build_db(args) -> int:
    clips = []
    for path in args.inputs:
        clips.extend(read_clips(path))
    db = build_feature_database(clips)
    out = Path(args.out)
    db.save(out)
    if not out.exists() and Path(str(out) + ".npz").exists():
        out = Path(str(out) + ".npz")
    inputs = {str(p): hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in args.inputs}
    digest = _write_sidecar(out, {"command": "build-db", "inputs": inputs})
    print(f"database: {len(db)} rows, {db.n_valid} valid, {len(db.clips)} clips -> {out} (config {digest[:12]})")
    return EXIT_OK


def cmd_inspect_db(args) -> int:
    db = FeatureDatabase.load(args.db)
    if args.queries is None:
        print(json.dumps({"rows": len(db), "valid": db.n_valid, "clips": len(db.clips),
                          "norm_mean": db.norm_mean.tolist(), "norm_std": db.norm_std.tolist()}, indent=2))
        return EXIT_OK
    queries = np.loadtxt(args.queries, delimiter=",", ndmin=2)
    if queries.shape[1] != FEATURE_DIM:
        raise ConfigError(f"query file needs {FEATURE_DIM} columns, found {queries.shape[1]}")
    if args.raw:
        queries = db.normalize(queries)
    index = MatchIndex(db)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["query", "row", "clip", "frame", "distance"])
        for i, m in enumerate(index.query_batch(queries)):
            w.writerow([i, m.row, db.clips[m.clip].id, m.frame, repr(m.distance)])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


# -- training / evaluation -------------------------------------------------------

def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {"env": args.env}
    for key in ("seed", "total_steps", "db_path"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return cfg.replace(**overrides)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    curve = train(cfg, args.out, resume=args.resume, echo=None if args.quiet else print)
    print(f"learning curve: {curve}")
    return EXIT_OK


def _policy_from_checkpoint(args):
    arch, params, meta, _ = load_checkpoint(args.checkpoint)
    if arch != arch_for_env(args.env) or meta.get("env") != args.env:
        raise ConfigError(f"checkpoint holds a {meta.get('env')}/{arch} policy, not {args.env}")
    cfg = RunConfig.from_dict(meta["config"])
    if getattr(args, "db", None):
        cfg = cfg.replace(db_path=args.db)
    obs_stat = RunningStat.from_dict(meta["obs_stat"]) if meta.get("obs_stat") else None
    return cfg, params, meta, obs_stat


def cmd_eval(args) -> int:
    cfg, params, meta, obs_stat = _policy_from_checkpoint(args)
    stage = args.stage if args.stage is not None else (meta.get("stage") if cfg.env == "obstacles" else None)
    result = evaluate(cfg, params, args.episodes, args.seed, stage=stage, obs_stat=obs_stat)
    result = {"checkpoint": str(args.checkpoint), "env": cfg.env, "seed": args.seed, "stage": stage,
              "env_steps": meta.get("env_steps"), "config_sha256": cfg.sha256, **result}
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    summary = {k: result[k] for k in ("episodes", "success_ratio", "mean_ep_len", "mean_return")}
    print(json.dumps(summary) if args.out else text)
    return EXIT_OK


def rollout_records(cfg: RunConfig, params, seed: int, stage=None, obs_stat=None, db=None):
    """One deterministic episode as a list of per-step dicts."""
    db = db if db is not None else database_for(cfg)
    env = make_env(cfg, db, MatchIndex(db), seed, stitch_poses=True, stage=stage)
    ac = ActorCritic(arch_for_env(cfg.env))
    obs = env.reset()
    records = [{"step": 0, "root": env.character.root_position.tolist(), "goal": env.goal.tolist(),
                "done": False, "status": env.status}]
    if cfg.env == "obstacles":
        records[0]["obstacles"] = _obstacle_snapshot(env)
    done = False
    while not done:
        x = obs[None].astype(np.float32)
        if obs_stat is not None:
            x = obs_stat.apply(x)
        obs, reward, done, info = env.step(ac.mean(params, x)[0].astype(float))
        m = info["match"]
        rec = {
            "step": env.steps,
            "root": env.character.root_position.tolist(),
            "segment_root": env.character.segment.root_pos.tolist(),
            "goal": env.goal.tolist(),
            "action": info["traj"].tolist(),
            "match": {"row": m.row, "clip": db.clips[m.clip].id, "frame": m.frame, "distance": m.distance},
            "reward": reward,
            "distance": info["distance"],
            "done": done,
            "status": info["status"],
        }
        if cfg.env == "obstacles":
            rec["hits"] = info["hits"]
            rec["collided_with"] = info["collided_with"]
            rec["obstacles"] = _obstacle_snapshot(env)
        records.append(rec)
    return records


def _obstacle_snapshot(env) -> dict:
    f = env.field
    return {"arena_origin": f.frame.origin.tolist(), "arena_forward": f.frame.forward.tolist(),
            "centers": f.frame.to_world(f.centers).round(6).tolist(),
            "half_extents": f.half_extents.round(6).tolist()}


def cmd_rollout(args) -> int:
    cfg, params, meta, obs_stat = _policy_from_checkpoint(args)
    stage = args.stage if args.stage is not None else (meta.get("stage") if cfg.env == "obstacles" else None)
    records = rollout_records(cfg, params, args.seed, stage=stage, obs_stat=obs_stat)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write(json.dumps({"header": True, "env": cfg.env, "seed": args.seed, "stage": stage,
                              "checkpoint": str(args.checkpoint), "config_sha256": cfg.sha256}) + "\n")
        for rec in records:
            out.write(json.dumps(rec) + "\n")
    finally:
        if args.out:
            out.close()
    last = records[-1]
    print(f"{len(records) - 1} steps, final status {last['status']}"
          f"{' (goal reached)' if last['status'] == SUCCESS else ''}", file=sys.stderr)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmqrl", description="Motion-matching query policies trained with PPO.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic locomotion clips")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--minutes", type=float, default=10.0)
    g.add_argument("--out", required=True, help="clip file to write (MMC1 records)")
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("build-db", help="build the feature database from clip files")
    b.add_argument("--in", dest="inputs", nargs="+", required=True, help="clip files")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_db)

    t = sub.add_parser("train", help="train a policy with PPO")
    t.add_argument("--env", choices=["plane", "obstacles"], required=True)
    t.add_argument("--config", help="JSON run configuration (unknown keys are rejected)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--total-steps", dest="total_steps", type=int)
    t.add_argument("--db", dest="db_path", help="feature database file (default: synthetic data)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "evaluate a checkpoint with the mean action"),
                             ("rollout", cmd_rollout, "dump one episode as JSON lines")):
        e = sub.add_parser(name, help=text)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--env", choices=["plane", "obstacles"], required=True)
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--stage", type=int, help="curriculum stage (obstacles; default: checkpoint's stage)")
        e.add_argument("--db", help="feature database file (default: the checkpoint's config)")
        e.add_argument("--out")
        if name == "eval":
            e.add_argument("--episodes", type=int, default=100)
        e.set_defaults(func=func)

    i = sub.add_parser("inspect-db", help="database summary or nearest frames for a query CSV")
    i.add_argument("--db", required=True)
    i.add_argument("--queries", help="CSV with 27 columns per query (normalized unless --raw)")
    i.add_argument("--raw", action="store_true", help="queries are raw features; normalize them first")
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect_db)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GaitConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
