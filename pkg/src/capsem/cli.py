"""Command-line entry point: ``capsem {train,eval,params,export,render}``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .a2c import FeatureCache, evaluate, policy_step, sample_action, train
from .config import ExperimentConfig, dump_config, load_config
from .layers import ConfigError
from .maze import MapError, MazeEnv, build_spec, load_layout, to_ppm
from .nets import NET_KINDS, PUBLISHED_TOTALS, ArchConfig, build_net, load_checkpoint, param_breakdown, param_count
from .tensor import ContractError


def _overrides(args) -> dict[str, str]:
    out = {}
    for flag, key in (("scenario", "scenario.name"), ("sparsity", "scenario.sparsity"),
                      ("texture", "scenario.texture"), ("seed", "train.seed"), ("out", "run.out_dir"),
                      ("checkpoint", "run.curriculum")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    return out


def cmd_train(args) -> int:
    cfg: ExperimentConfig = load_config(args.config, _overrides(args))
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(dump_config(cfg))
    sc = cfg.scenario
    spec = build_spec(load_layout(sc.name), sc.sparsity, sc.texture, sc.frameskip)
    res = train(cfg.train, spec, cfg.net, out, cfg.run.curriculum or None,
                log=None if args.quiet else lambda r: print(json.dumps(r), flush=True))
    last = res.records[-1]["mean_score"] if res.records else float("nan")
    print(f"trained {res.env_steps} env steps, {res.updates} updates, last mean score {last:.3f}; "
          f"outputs in {out}")
    return 0


def _spec_from_args(args):
    return build_spec(load_layout(args.scenario), args.sparsity, args.texture)


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise ContractError("--episodes must be >= 1")
    net, _ = load_checkpoint(args.checkpoint)
    spec = _spec_from_args(args)
    rng = np.random.default_rng(args.seed)
    scores = evaluate(net, spec, args.episodes, rng, greedy=args.policy == "greedy")
    for i, s in enumerate(scores):
        print(f"episode {i} score {s:g}")
    stderr = scores.std(ddof=1) / np.sqrt(len(scores)) if len(scores) > 1 else 0.0
    print(f"mean {scores.mean():.4f} stderr {stderr:.4f} episodes {len(scores)}")
    return 0


def cmd_params(args) -> int:
    kinds = args.kinds or list(NET_KINDS)
    unknown = [k for k in kinds if k not in NET_KINDS]
    if unknown:
        raise ConfigError(f"unknown net kind {unknown[0]!r}; expected one of {', '.join(NET_KINDS)}")
    ref = param_count(build_net(ArchConfig("capsem"), 0))
    for kind in kinds:
        net = build_net(ArchConfig(kind), 0)
        total = param_count(net)
        print(f"== {kind}")
        for layer, n in param_breakdown(net):
            print(f"  {layer:<24}{n:>12,}")
        print(f"  {'total':<24}{total:>12,}")
        if kind != "capsem":
            print(f"  {'vs capsem':<24}{100.0 * (ref - total) / total:>+11.1f}%")
        if kind in PUBLISHED_TOTALS:
            pub = PUBLISHED_TOTALS[kind]
            print(f"  {'reference total':<24}{pub:>12,}  residual {total - pub:+,} ({100.0 * (total - pub) / pub:+.2f}%)")
    return 0


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_export(args) -> int:
    root = Path(args.metrics_dir)
    files = sorted(root.rglob("*.jsonl")) if root.is_dir() else []
    if not files:
        raise ContractError(f"no metrics files under {root}")
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    runs = {}
    for f in files:
        name = f.parent.name if f.name == "metrics.jsonl" else f.stem
        name = name if name not in runs else str(f.relative_to(root)).replace("/", "_")
        rows = [(r["env_steps"], r["mean_score"], r["score_stderr"]) for r in read_metrics(f)]
        runs[name] = rows
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["env_steps", "mean_score", "score_stderr"])
            w.writerows(rows)
    common = sorted(set.intersection(*(set(s for s, _, _ in rows) for rows in runs.values())))
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env_steps", "runs", "mean_score", "stderr"])
        for step in common:
            vals = np.array([next(m for s, m, _ in rows if s == step) for rows in runs.values()])
            se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
            w.writerow([step, len(vals), repr(float(vals.mean())), repr(float(se))])
    print(f"wrote {len(runs)} run CSVs and aggregate.csv ({len(common)} aligned points) to {out}")
    return 0


def cmd_render(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    spec = _spec_from_args(args)
    env = MazeEnv(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    features = FeatureCache(net.features)
    obs = env.reset()
    state = (np.zeros(net.hidden_size), np.zeros(net.hidden_size))
    frames = [obs]
    while not env.done:
        logits, _, state = policy_step(net, features(obs), state)
        obs, _, _ = env.step(sample_action(logits, None, greedy=True))
        frames.append(obs)
    for i, frame in enumerate(frames):
        (out / f"frame_{i:05d}.ppm").write_bytes(to_ppm(frame))
    print(f"wrote {len(frames)} frames to {out} (score {env.state.episode_reward:g})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capsem", description="Capsule-network actor-critic agents in grid mazes.")
    sub = p.add_subparsers(dest="verb", required=True)

    def scenario_flags(sp, required_ckpt=True):
        sp.add_argument("--checkpoint", required=required_ckpt)
        sp.add_argument("--scenario", default="mini")
        sp.add_argument("--sparsity", default="dense")
        sp.add_argument("--texture", default="varied")
        sp.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train an agent from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--checkpoint", help="pre-load parameters from this checkpoint (curriculum)")
    t.add_argument("--scenario")
    t.add_argument("--sparsity")
    t.add_argument("--texture")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    scenario_flags(e)
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--policy", choices=("greedy", "sample"), default="greedy")
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("params", help="per-layer trainable parameter counts")
    pr.add_argument("kinds", nargs="*", metavar="KIND", help=f"one or more of {', '.join(NET_KINDS)} (default: all)")
    pr.set_defaults(fn=cmd_params)

    x = sub.add_parser("export", help="metrics streams to CSV")
    x.add_argument("metrics_dir")
    x.add_argument("--out")
    x.set_defaults(fn=cmd_export)

    r = sub.add_parser("render", help="PPM frames of one greedy episode")
    scenario_flags(r)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, MapError, ContractError, OSError, KeyError, ValueError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"capsem {args.verb}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
