"""Command-line entry point: ``poco <subcommand> --config FILE --seed N --out DIR``.

Exit codes: 0 success, 2 bad configuration or usage, 3 contract violation,
4 training diverged, 5 malformed input file, 6 missing file.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import envs, trainer
from .config import ConfigError, TrainConfig, format_config, load_config
from .flow_policy import FrozenPolicyError
from .numerics import ShapeError
from .replay import DemoParseError, load_demos, save_demos

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONTRACT = 3
EXIT_DIVERGED = 4
EXIT_PARSE = 5
EXIT_MISSING = 6

class CheckpointFormatError(ValueError):
    pass


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args, cfg: TrainConfig) -> Path:
    out = Path(args.out or cfg.checkpoint_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _demos(args, cfg: TrainConfig):
    path = getattr(args, "demos", None) or cfg.demo_path
    if not path:
        raise ConfigError("no demonstration file: pass --demos or set demo_path")
    episodes, sd, ad = load_demos(path)
    spec = cfg.env_spec()
    if (sd, ad) != (spec.state_dim, spec.action_dim):
        raise ConfigError(f"demo file dims ({sd}, {ad}) do not match environment {spec.name}")
    return episodes


def _actor(args):
    try:
        return trainer.load_actor(args.actor)
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"{args.actor}: {exc}") from None


def cmd_collect_demos(args) -> int:
    cfg = _config(args)
    spec = cfg.env_spec()
    n = args.n if args.n is not None else cfg.n_demos
    episodes = envs.collect_demos(spec, n, cfg.seed, cfg.demo_noise)
    target = args.demos or cfg.demo_path
    path = Path(target) if target else _out(args, cfg) / "demos.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_demos(path, episodes, spec.state_dim, spec.action_dim)
    print(f"wrote {len(episodes)} episodes ({sum(map(len, episodes))} steps) to {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    res = trainer.pretrain(cfg, _demos(args, cfg), out)
    final = res.rows[-1].bc_loss if res.rows else float("nan")
    print(f"pre-trained {cfg.offline_steps} steps, final bc_loss {final:.4f}; actor at {out / 'actor.ckpt'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    res = trainer.finetune(cfg, _actor(args), _demos(args, cfg), out)
    last = res.evals[-1] if res.evals else None
    print(f"fine-tuned {res.learn_steps} learning steps over {res.env_steps} env steps; "
          f"pre-trained eval {res.pretrained_success:.2f}, final eval "
          f"{last.eval_success if last else float('nan'):.2f}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    trials = args.trials if args.trials is not None else cfg.eval_trials
    res = trainer.evaluate(cfg, _actor(args), trials, cfg.seed)
    lines = ["trial,success,return"] + [f"{i},{int(s)},{r!r}" for i, (s, r) in
                                       enumerate(zip(res.successes, res.returns))]
    if args.out:
        (_out(args, cfg) / "eval_trials.csv").write_text("\n".join(lines) + "\n")
    print(f"success_rate {res.success_rate:.4f} over {trials} trials, mean return {res.returns.mean():.3f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad --values {args.values!r}") from None
    results = trainer.ablate(cfg, args.param, values, _actor(args), _demos(args, cfg), out)
    for v, res in results.items():
        final = res.evals[-1].eval_success if res.evals else float("nan")
        print(f"{args.param}={v:g}: final eval {final:.2f}")
    return EXIT_OK


def cmd_show_config(args) -> int:
    sys.stdout.write(format_config(_config(args)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (default: checkpoint_dir or .)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="poco", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("collect-demos", parents=[common], help="roll out the scripted expert")
    s.add_argument("--n", type=int, help="number of successful episodes (default n_demos)")
    s.add_argument("--demos", help="output file (default demo_path, else OUT/demos.txt)")
    s.set_defaults(func=cmd_collect_demos)

    s = sub.add_parser("pretrain", parents=[common], help="offline flow-matching pre-training")
    s.add_argument("--demos", help="demo file (default demo_path)")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="critic warmup and online fine-tuning")
    s.add_argument("--actor", required=True, help="pre-trained actor checkpoint")
    s.add_argument("--demos", help="demo file (default demo_path)")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", parents=[common], help="evaluate an actor checkpoint")
    s.add_argument("--actor", required=True)
    s.add_argument("--trials", type=int, help="default eval_trials")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="sweep zeta or beta from one checkpoint")
    s.add_argument("--actor", required=True)
    s.add_argument("--demos", help="demo file (default demo_path)")
    s.add_argument("--param", required=True, choices=sorted(trainer.ABLATABLE))
    s.add_argument("--values", required=True, help="comma-separated values")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    s.set_defaults(func=cmd_show_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except trainer.TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DemoParseError, CheckpointFormatError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FrozenPolicyError, ShapeError, ValueError, RuntimeError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
