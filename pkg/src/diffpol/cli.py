"""Command-line entry points.

Subcommands: ``gen-data`` (write a behavior dataset), ``train`` (fit a policy
on a dataset file), ``eval`` (score a checkpoint in an env), ``bench``
(throughput measurements), ``report`` (summarize metric logs). Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .algorithms import (AlgoConfig, TrainConfig, load_train_state, train)
from .config import apply_config, dump_config, parse_kv_file
from .envdata import (ENV_KINDS, generate_dataset, load_dataset, make_env,
                      normalize_states, save_dataset)
from .errors import FormatError, NumericError, ParameterError, ShapeError
from .harness import (ALL_VARIANTS, EvalConfig, bench_training, evaluate_policy,
                      oms_metric, rat_metric)
from .policy import SamplerConfig


def _parse_mix(text: str) -> dict:
    mix = {}
    for part in text.split(","):
        if "=" not in part:
            raise ParameterError(f"mixture component {part!r} must look like name=weight")
        name, w = part.split("=", 1)
        mix[name.strip()] = float(w)
    return mix


def _apply_overrides(args, *targets):
    pairs = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ParameterError(f"config file not found: {args.config}")
        pairs.update(parse_kv_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ParameterError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        pairs[key.strip()] = val.strip()
    apply_config(pairs, *targets)


def _cmd_gen_data(args) -> int:
    env = make_env(args.env)
    mix = _parse_mix(args.mix)
    ds = generate_dataset(env, mix, args.size, args.seed, mode_std=args.mode_std,
                          noisy_sigma=args.noisy_sigma, eps_uniform=args.eps_uniform)
    if args.normalize:
        ds = normalize_states(ds)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} transitions ({env.kind}) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    if not os.path.exists(args.dataset):
        raise ParameterError(f"dataset file not found: {args.dataset}")
    cfg = TrainConfig()
    algo_cfg = AlgoConfig(algo=args.algo)
    sampler_cfg = SamplerConfig()
    _apply_overrides(args, cfg, algo_cfg, sampler_cfg)
    algo_cfg.algo = args.algo
    ds = load_dataset(args.dataset)
    env = make_env(args.env) if args.env else None
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as f:
        f.write(dump_config(cfg, algo_cfg, sampler_cfg))
    resume = args.resume if args.resume else None
    st, history = train(cfg, algo_cfg, ds, sampler_cfg, out_dir=args.out, env=env,
                        resume_from=resume)
    print(f"trained {st.step} steps; checkpoints and metrics in {args.out}")
    if history:
        print(f"best score {oms_metric(history):.2f}, "
              f"running-average score {rat_metric(history):.2f}")
    return 0


def _cmd_eval(args) -> int:
    if not os.path.exists(args.ckpt):
        raise ParameterError(f"checkpoint file not found: {args.ckpt}")
    cfg = TrainConfig()
    algo_cfg = AlgoConfig()
    sampler_cfg = SamplerConfig()
    config_path = args.config or os.path.join(os.path.dirname(args.ckpt), "config.txt")
    if os.path.exists(config_path):
        apply_config(parse_kv_file(config_path), cfg, algo_cfg, sampler_cfg)
    elif args.config:
        raise ParameterError(f"config file not found: {args.config}")
    env = make_env(args.env)
    st = load_train_state(args.ckpt, cfg, algo_cfg, env.state_dim, env.action_dim,
                          env.action_bound)
    ecfg = EvalConfig(eas_n=args.eas_n, episodes=args.episodes, sampler=sampler_cfg,
                      seed=args.seed)
    report = evaluate_policy(st.policy, st.dq, env, ecfg)
    print(f"episodes          {args.episodes}")
    print(f"mean return       {report.mean_return:.4f} +- {report.std_return:.4f}")
    print(f"normalized score  {report.normalized_score:.2f}")
    return 0


def _cmd_bench(args) -> int:
    env = make_env(args.env)
    mix = ({"mode0": 0.5, "mode1": 0.5} if env.kind == "bimodal-bandit"
           else {"noisy": 0.8, "uniform": 0.2})
    ds = generate_dataset(env, mix, args.dataset_size, args.seed)
    variants = [v.strip() for v in args.variants.split(",")]
    k_values = [int(k) for k in args.K.split(",")]
    report = bench_training(variants, ds, args.iters, k_values, env=env,
                            batch_size=args.batch_size, nfe=args.nfe,
                            warmup=args.warmup, repeats=args.repeats, seed=args.seed)
    print(report.to_table())
    if args.out_csv:
        with open(args.out_csv, "w", encoding="utf-8") as f:
            f.write(report.to_csv())
        print(f"csv written to {args.out_csv}")
    return 0


def _read_history(path) -> list:
    if not os.path.exists(path):
        raise ParameterError(f"metric log not found: {path}")
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        if "eval_score" not in header:
            raise FormatError(f"{path} is not a metric log (no eval_score column)")
        col = header.index("eval_score")
        history = []
        for line in f:
            parts = line.rstrip("\n").split(",")
            if len(parts) > col and parts[col]:
                history.append(float(parts[col]))
    return history


def _cmd_report(args) -> int:
    rows = []
    for path in args.metrics:
        history = _read_history(path)
        if not history:
            rows.append((path, 0, float("nan"), float("nan")))
        else:
            rows.append((path, len(history), oms_metric(history),
                         rat_metric(history, args.window)))
    width = max(len(r[0]) for r in rows)
    print(f"{'run':<{width}}  {'ckpts':>6}  {'best':>8}  {'run-avg':>8}")
    for path, n, oms, rat in rows:
        print(f"{path:<{width}}  {n:>6}  {oms:>8.2f}  {rat:>8.2f}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write("run,checkpoints,oms,rat\n")
            for path, n, oms, rat in rows:
                f.write(f"{path},{n},{oms:.4f},{rat:.4f}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffpol",
                                description="diffusion policies for offline RL")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a behavior dataset file")
    g.add_argument("--env", choices=ENV_KINDS, required=True)
    g.add_argument("--mix", required=True,
                   help="comma list name=weight, e.g. mode0=0.5,mode1=0.5")
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--normalize", action="store_true")
    g.add_argument("--mode-std", type=float, default=None)
    g.add_argument("--noisy-sigma", type=float, default=0.5)
    g.add_argument("--eps-uniform", type=float, default=0.1)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train a policy on a dataset file")
    t.add_argument("--dataset", required=True)
    t.add_argument("--algo", choices=("td3bc", "crr", "iql"), required=True)
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--out", required=True)
    t.add_argument("--env", choices=ENV_KINDS, default=None,
                   help="evaluate in this env at each epoch")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value (repeatable)")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--env", choices=ENV_KINDS, required=True)
    e.add_argument("--config", default=None,
                   help="defaults to config.txt next to the checkpoint")
    e.add_argument("--eas-n", type=int, default=10)
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=_cmd_eval)

    b = sub.add_parser("bench", help="training/sampling throughput")
    b.add_argument("--env", choices=ENV_KINDS, default="bimodal-bandit")
    b.add_argument("--iters", type=int, default=1000)
    b.add_argument("--K", default="10,100,1000")
    b.add_argument("--variants", default=",".join(ALL_VARIANTS))
    b.add_argument("--batch-size", type=int, default=32)
    b.add_argument("--nfe", type=int, default=15)
    b.add_argument("--warmup", type=int, default=100)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--dataset-size", type=int, default=4096)
    b.add_argument("--out-csv", default=None)
    b.set_defaults(fn=_cmd_bench)

    r = sub.add_parser("report", help="summarize metric logs")
    r.add_argument("metrics", nargs="+")
    r.add_argument("--window", type=int, default=10)
    r.add_argument("--csv", default=None)
    r.set_defaults(fn=_cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ParameterError, FormatError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1
    except (OSError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
