"""Command line: ``sacf train|eval|ablate|params|plot``.

Exit codes: 0 success, 1 usage error, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as config_io
from . import experiment
from .autodiff import ContractViolation
from .metrics import OracleAgent, PolicyAgent, RandomAgent, dump_trajectories, evaluate

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
PSEUDO_CHECKPOINTS = ("oracle", "random")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _load_config(path: str | None, overrides: list[str]) -> config_io.ExperimentConfig:
    """Defaults when ``path`` is None; ``--set`` overrides apply on top."""
    if path is not None and not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = config_io.load(path) if path is not None else config_io.ExperimentConfig()
        for item in overrides:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            config_io.set_key(cfg, key.strip(), value.strip())
        config_io.validate(cfg)
    except ContractViolation as e:
        raise UsageError(f"{path}: {e}" if path else str(e)) from e
    return cfg


def _progress(every: int):
    def report(update, reward, stats, elapsed):
        if update % every == 0:
            print(f"update {update} reward {reward:.3f} entropy {stats.entropy:.3f} aux {stats.aux:.3f} "
                  f"{elapsed:.0f}s", file=sys.stderr, flush=True)
    return report


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.updates is not None:
        if args.updates <= 0:
            raise UsageError("--updates must be positive")
        cfg.ppo.updates = args.updates
    out = Path(args.out or cfg.run.out_dir)
    res = experiment.train(cfg, out, resume=args.resume, progress=_progress(args.progress_every))
    for split, rep in res.reports.items():
        print(f"{split} {rep.summary()}")
    print(f"final checkpoint: {res.final_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.episodes <= 0:
        raise UsageError("--episodes must be positive")
    if args.checkpoint in PSEUDO_CHECKPOINTS:
        cfg = _load_config(args.config, args.set)
        agent = OracleAgent() if args.checkpoint == "oracle" else RandomAgent(args.seed)
    else:
        ckpt = Path(args.checkpoint)
        cfg_path = args.config or ckpt.parent / "config.cfg"
        if not ckpt.is_file():
            raise UsageError(f"checkpoint not found: {ckpt}")
        cfg = _load_config(str(cfg_path), args.set)
        agent = PolicyAgent(experiment.load_policy(cfg, ckpt))
    rep = evaluate(agent, args.split, args.episodes, args.seed, cfg.sim)
    out = Path(args.out or f"report_{args.split}.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rep.to_text())
    if args.trajectories:
        dump_trajectories(rep, args.trajectories)
    print(rep.summary())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config, args.set)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as e:
        raise UsageError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from e
    if not seeds:
        raise UsageError("--seeds is empty")
    if args.updates is not None:
        cfg.ppo.updates = args.updates
    table = experiment.ablate(cfg, seeds, args.out, progress=_progress(args.progress_every))
    print(table, end="")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _load_config(args.config, args.set)
    table = experiment.param_table(cfg)
    text = table.to_text()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_plot(args) -> int:
    for log in args.logs:
        if not Path(log).is_file():
            raise UsageError(f"log not found: {log}")
    labels = args.labels.split(",") if args.labels else None
    if labels is not None and len(labels) != len(args.logs):
        raise UsageError("--labels needs one label per log")
    for path in experiment.write_plot(args.logs, args.out, labels):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sacf", description="Audio-visual navigation experiments on grid worlds.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_overrides(sp):
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    t = sub.add_parser("train", help="train one model")
    t.add_argument("config")
    t.add_argument("--seed", type=int)
    t.add_argument("--updates", type=int)
    t.add_argument("--out")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--progress-every", type=int, default=50)
    with_overrides(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or 'oracle' / 'random')")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="defaults to config.cfg next to the checkpoint")
    e.add_argument("--split", choices=("heard", "unheard"), default="heard")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.add_argument("--trajectories")
    with_overrides(e)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate all four fusion variants per seed")
    a.add_argument("config")
    a.add_argument("--seeds", default="1,2,3")
    a.add_argument("--updates", type=int)
    a.add_argument("--out", default="runs/ablation")
    a.add_argument("--progress-every", type=int, default=200)
    with_overrides(a)
    a.set_defaults(fn=cmd_ablate)

    q = sub.add_parser("params", help="parameter counts for concat / SACF / spatial attention")
    q.add_argument("config", nargs="?")
    q.add_argument("--out")
    with_overrides(q)
    q.set_defaults(fn=cmd_params)

    g = sub.add_parser("plot", help="convergence curves from training logs")
    g.add_argument("logs", nargs="+")
    g.add_argument("--out", required=True, help="output prefix for the CSV files and the SVG")
    g.add_argument("--labels", help="comma-separated series labels")
    g.set_defaults(fn=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractViolation, FileNotFoundError, OSError, RuntimeError, FloatingPointError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
