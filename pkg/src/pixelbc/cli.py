"""Command-line entry points for the whole stack.

Subcommands: gen-data, train-idm, impute, train-bc, ablation, eval, play,
inspect. Flags default to the module defaults and every run prints a
seeded, reproducible summary.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as C
from . import data as D
from . import env as E
from . import runtime as R
from . import training as T
from .idm import IDMConfig, impute, train_idm
from .policy import PolicyConfig

POLICIES = {
    "expert": lambda: E.expert_policy,
    "noisy": lambda: E.noisy_expert_policy(0.2),
    "random": lambda: E.random_policy,
}


def add_env_flags(p: argparse.ArgumentParser) -> None:
    cfg = E.EnvConfig()
    p.add_argument("--world-size", type=int, default=cfg.world_size)
    p.add_argument("--frame-size", type=int, default=cfg.frame_size)
    p.add_argument("--episode-len", type=int, default=cfg.episode_len)
    p.add_argument("--targets", type=int, default=cfg.n_targets)
    p.add_argument("--hazards", type=int, default=cfg.n_hazards)


def env_config(args, seed: int) -> E.EnvConfig:
    return E.EnvConfig(world_size=args.world_size, frame_size=args.frame_size,
                       episode_len=args.episode_len, n_targets=args.targets,
                       n_hazards=args.hazards, seed=seed)


def add_train_flags(p: argparse.ArgumentParser) -> None:
    tcfg = T.TrainConfig()
    p.add_argument("--lr", type=float, default=tcfg.lr)
    p.add_argument("--batch-size", type=int, default=tcfg.batch_size)
    p.add_argument("--window-len", type=int, default=tcfg.window_len)
    p.add_argument("--max-steps", type=int, default=tcfg.max_steps)
    p.add_argument("--patience", type=int, default=tcfg.patience)
    p.add_argument("--eval-interval", type=int, default=tcfg.eval_interval)
    p.add_argument("--no-augment", action="store_true")


def train_config(args) -> T.TrainConfig:
    return T.TrainConfig(lr=args.lr, batch_size=args.batch_size,
                         window_len=args.window_len, max_steps=args.max_steps,
                         patience=args.patience, eval_interval=args.eval_interval,
                         seed=args.seed, augment=not args.no_augment)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_records(paths) -> list[D.EpisodeRecord]:
    records = []
    for p in paths:
        records.extend(D.read_episodes(p))
    return records


def cmd_gen_data(args) -> int:
    policy = POLICIES[args.policy]()
    records = []
    scores = []
    for i in range(args.episodes):
        cfg = env_config(args, args.seed + i)
        traj = E.generate_episode(cfg, policy, np.random.default_rng(args.seed + i))
        provenance = "expert" if args.policy == "expert" else "noisy_expert"
        rec = D.record_from_trajectory(traj, provenance=provenance)
        if args.unlabeled:
            rec = D.EpisodeRecord(frames=rec.frames, provenance=provenance,
                                  seed=rec.seed)
        records.append(rec)
        scores.append(traj.score)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.write_episodes(records, out)
    print(f"gen-data: {len(records)} episodes ({args.policy}, seed {args.seed}) "
          f"-> {out}")
    print(f"  frames={sum(r.n_frames for r in records)} "
          f"mean_score={np.mean(scores):.3f} sha256={file_hash(out)[:16]}")
    return 0


def cmd_train_idm(args) -> int:
    records = load_records(args.data)
    manifest = D.build_manifest(args.data)
    D.make_splits(manifest, args.val_fraction, args.seed)
    train = D.load_split(manifest, "train")
    val = D.load_split(manifest, "val")
    icfg = IDMConfig(t_w=args.window_len, frame_size=args.frame_size,
                     seed=args.seed)
    net, metrics = train_idm(train, val, icfg, train_config(args),
                             on_eval=lambda r: print(f"  step {r['step']}: "
                                                     f"val_loss={r['val_loss']:.4f} "
                                                     f"val_acc={r['val_accuracy']:.3f}"))
    C.save_idm(args.out, net)
    print(f"train-idm: {len(train)} train / {len(val)} val episodes, "
          f"seed {args.seed}")
    print(f"  best step {metrics.best_step}: val_loss={metrics.best_val_loss:.4f} "
          f"val_acc={metrics.best_val_accuracy:.3f} -> {args.out}")
    return 0


def cmd_impute(args) -> int:
    net = C.load_idm(args.idm)
    records = load_records(args.data)
    out_records = impute(records, net,
                         confidence_threshold=args.confidence_threshold)
    D.write_episodes(out_records, args.out)
    conf = (np.mean([float(r.confidences.mean()) for r in out_records])
            if out_records else float("nan"))
    print(f"impute: {len(records)} episodes -> {len(out_records)} imputed "
          f"(mean confidence {conf:.3f}) -> {args.out}")
    print(f"  sha256={file_hash(args.out)[:16]}")
    return 0


def cmd_train_bc(args) -> int:
    records = load_records(args.data)
    manifest = D.build_manifest(args.data)
    D.make_splits(manifest, args.val_fraction, args.seed)
    train = D.load_split(manifest, "train")
    val = D.load_split(manifest, "val")
    if args.fraction < 1.0:
        train = T.limited_slice(train, args.fraction)
    if args.imputed:
        train = train + load_records(args.imputed)
    pcfg = PolicyConfig(frame_size=args.frame_size, seed=args.seed)
    net, metrics = T.train_bc(train, val, train_config(args), pcfg,
                              on_eval=lambda r: print(f"  step {r['step']}: "
                                                      f"train_ppl={r['train_ppl']:.4f} "
                                                      f"val_ppl={r['val_ppl']:.4f}"))
    C.save_policy(args.out, net)
    if args.metrics_dir:
        metrics.write(Path(args.metrics_dir), "train_bc")
    print(f"train-bc: {len(train)} episodes "
          f"({sum(r.n_frames for r in train)} frames), seed {args.seed}")
    print(f"  best step {metrics.best_step}: val_ppl={metrics.best_val_ppl:.4f} "
          f"early_stopped={metrics.early_stopped} -> {args.out}")
    return 0


def cmd_ablation(args) -> int:
    labeled = load_records(args.labeled)
    unlabeled = load_records(args.unlabeled)
    manifest = D.build_manifest(args.labeled)
    D.make_splits(manifest, args.val_fraction, args.seed)
    train = D.load_split(manifest, "train")
    val = D.load_split(manifest, "val")
    pcfg = PolicyConfig(frame_size=args.frame_size, seed=args.seed)
    out_dir = Path(args.out)
    nets: dict = {}
    report = T.run_ablation(train, val, unlabeled, train_config(args), pcfg,
                            limited_fraction=args.fraction, out_dir=out_dir,
                            nets_out=nets, verbose=True)
    for name in ("full", "limited", "imputed"):
        C.save_policy(out_dir / f"{name}.p2pw", nets[name])
    C.save_idm(out_dir / "idm.p2pw", nets["idm"])
    print(f"ablation: labeled={len(labeled)} unlabeled={len(unlabeled)} "
          f"seed {args.seed} -> {out_dir}")
    print(json.dumps(report.summary(), indent=2))
    return 0


def cmd_eval(args) -> int:
    net = C.load_policy(args.ckpt)
    if args.online:
        cfg = env_config(args, args.seed)
        report = R.run_agent(cfg, net, episodes=args.episodes,
                             tick_rate=args.tick_rate, seed0=args.seed)
        print(f"eval online: {report}")
        print(json.dumps(report.latency, indent=2))
    else:
        if not args.data:
            print("eval: --data required for offline evaluation", file=sys.stderr)
            return 2
        records = [r for r in load_records(args.data) if r.labeled]
        loss, ppl = T.evaluate_offline(net, records)
        print(f"eval offline: {len(records)} episodes "
              f"loss={loss:.4f} perplexity={ppl:.4f} (seed {args.seed})")
    return 0


def cmd_play(args) -> int:
    from .server import run_server

    net = C.load_policy(args.ckpt) if args.ckpt else None
    cfg = env_config(args, args.seed)
    record_dir = Path(args.record_dir) if args.record_dir else None
    static = Path(args.static_dir) if args.static_dir else None
    print(f"play: ws://{args.host}:{args.port} tick_rate={args.tick_rate} "
          f"policy={'yes' if net else 'none'} record={record_dir}")
    run_server(net, cfg, host=args.host, port=args.port,
               tick_rate=args.tick_rate, record_dir=record_dir, static_dir=static)
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    magic = path.open("rb").read(4)
    if magic == D.EPISODE_MAGIC:
        records = D.read_episodes(path)
        print(f"episode file: {len(records)} episodes, sha256={file_hash(path)[:16]}")
        for i, r in enumerate(records[:args.limit]):
            print(f"  [{i}] frames={r.n_frames} {r.frames.shape[1]}x{r.frames.shape[2]} "
                  f"labeled={r.labeled} provenance={r.provenance} seed={r.seed}")
        if len(records) > args.limit:
            print(f"  ... {len(records) - args.limit} more")
    elif magic == C.CHECKPOINT_MAGIC:
        desc = C.describe_checkpoint(path)
        print(f"checkpoint: kind={desc['kind']} params={desc['n_params']}")
        print(json.dumps(desc["config"], indent=2))
    else:
        print(f"inspect: unknown magic {magic!r}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixelbc",
                                     description="pixel behavior cloning toolkit")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def sub_parser(name, **kw):
        p = subparsers.add_parser(name, **kw)
        p.add_argument("--seed", type=int, default=0)
        return p

    p = sub_parser("gen-data", help="roll scripted policies into episode files")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--policy", choices=sorted(POLICIES), default="expert")
    p.add_argument("--unlabeled", action="store_true",
                   help="strip actions (unlabeled corpus)")
    p.add_argument("--out", required=True)
    add_env_flags(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub_parser("train-idm", help="train the inverse dynamics model")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--frame-size", type=int, default=64)
    p.add_argument("--out", required=True)
    add_train_flags(p)
    p.set_defaults(fn=cmd_train_idm)

    p = sub_parser("impute", help="impute actions onto unlabeled episodes")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--idm", required=True)
    p.add_argument("--confidence-threshold", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_impute)

    p = sub_parser("train-bc", help="behavior-clone the policy")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--imputed", nargs="*", default=[])
    p.add_argument("--fraction", type=float, default=1.0,
                   help="labeled fraction of the train split to use")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--frame-size", type=int, default=64)
    p.add_argument("--metrics-dir", default=None)
    p.add_argument("--out", required=True)
    add_train_flags(p)
    p.set_defaults(fn=cmd_train_bc)

    p = sub_parser("ablation", help="Full / Limited / Imputed comparison")
    p.add_argument("--labeled", nargs="+", required=True)
    p.add_argument("--unlabeled", nargs="+", required=True)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--frame-size", type=int, default=64)
    p.add_argument("--out", required=True)
    add_train_flags(p)
    p.set_defaults(fn=cmd_ablation)

    p = sub_parser("eval", help="offline perplexity or online scores")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", nargs="*", default=[])
    p.add_argument("--online", action="store_true")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--tick-rate", type=float, default=20.0)
    add_env_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub_parser("play", help="serve the interactive session endpoint")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--tick-rate", type=float, default=20.0)
    p.add_argument("--record-dir", default=None)
    p.add_argument("--static-dir", default=None,
                   help="also serve the browser UI from this directory")
    add_env_flags(p)
    p.set_defaults(fn=cmd_play)

    p = sub_parser("inspect", help="dump episode/checkpoint headers")
    p.add_argument("path")
    p.add_argument("--limit", type=int, default=10)
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
