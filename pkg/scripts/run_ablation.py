"""Fusion ablation over several seeds, plus a same-seed determinism rerun.

Trains every fusion variant for every seed (runs whose reports already exist
are reused), writes the ablation table and per-run CSV, records wall-clock time
per run, plots SACF against the concat baseline per seed, and finally retrains
the first seed's SACF run in a separate directory and compares the bytes of
every checkpoint and report.

As a supplementary diagnostic (not an acceptance input) each final checkpoint
is also evaluated with actions sampled from the policy instead of the argmax,
written to ``sampled/`` and ``ablation_sampled.txt``.

    python scripts/run_ablation.py --out results/ablation
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from sacf import autodiff as ad
from sacf import config as config_io
from sacf.acvf import FusionVariant
from sacf.experiment import (
    ABLATION_ORDER,
    EVAL_SEED_OFFSET,
    SPLITS,
    ablate,
    format_ablation_table,
    load_policy,
    train,
    variant_config,
    write_plot,
)
from sacf.metrics import MetricsReport, PolicyAgent, evaluate
from sacf.sim import seed_stream

ROOT = Path(__file__).resolve().parents[1]


def compare_runs(a: Path, b: Path) -> dict:
    names = sorted(str(p.relative_to(a)) for p in a.rglob("*") if p.suffix in (".ckpt", ".txt"))
    diffs = [n for n in names if not (b / n).is_file() or (a / n).read_bytes() != (b / n).read_bytes()]
    return {"compared": names, "different": diffs, "identical": bool(names) and not diffs}


class SampledPolicyAgent(PolicyAgent):
    """Actions drawn from the policy's categorical distribution with a seeded stream."""

    def __init__(self, policy, seed: int):
        super().__init__(policy)
        self.seed = seed

    def reset(self, n: int) -> None:
        super().reset(n)
        self.rng = seed_stream(self.seed, "sampled-eval")

    def act(self, depth, audio, envs, starts) -> np.ndarray:
        with ad.no_grad():
            out, self.state = self.policy.step(depth, audio, self.state, starts)
        logits = out.logits.values.astype(np.float64)
        p = np.exp(logits - logits.max(axis=-1, keepdims=True))
        cdf = np.cumsum(p / p.sum(axis=-1, keepdims=True), axis=-1)
        u = self.rng.random(len(envs))[:, None]
        return np.minimum((u > cdf).sum(axis=-1), logits.shape[-1] - 1)


def sampled_table(cfg, seeds: list[int], out: Path) -> str:
    rows = []
    for seed in seeds:
        for v in ABLATION_ORDER:
            run_cfg = variant_config(cfg, v, seed)
            policy = None
            for split in SPLITS:
                path = out / "sampled" / f"seed{seed}_{v.value}_{split}.txt"
                if path.is_file():
                    rep = MetricsReport.from_text(path.read_text())
                else:
                    policy = policy or load_policy(run_cfg, out / f"seed{seed}" / v.value / "final.ckpt")
                    rep = evaluate(SampledPolicyAgent(policy, seed), split, cfg.run.final_eval_episodes,
                                   seed + EVAL_SEED_OFFSET, cfg.sim)
                    path.parent.mkdir(parents=True, exist_ok=True)
                    path.write_text(rep.to_text())
                rows.append({"seed": seed, "variant": v.value, "split": split, "sr": rep.sr, "spl": rep.spl,
                             "sna": rep.sna})
    table = format_ablation_table(rows, seeds, cfg.ppo.updates)
    return "# supplementary: actions sampled from the policy (acceptance uses argmax)\n" + table


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "default.cfg"))
    ap.add_argument("--out", default=str(ROOT / "results" / "ablation"))
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--updates", type=int, default=None)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--skip-determinism", action="store_true")
    args = ap.parse_args(argv)

    cfg = config_io.load(args.config)
    for item in args.set:
        key, value = item.split("=", 1)
        config_io.set_key(cfg, key.strip(), value)
    if args.updates is not None:
        cfg.ppo.updates = args.updates
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    timing_path = out / "timing.json"
    timing = json.loads(timing_path.read_text()) if timing_path.is_file() else {}

    def progress(update, reward, stats, elapsed):
        if update % 100 == 0:
            print(f"  update {update} reward {reward:.3f} entropy {stats.entropy:.3f} ({elapsed:.0f}s)", flush=True)

    t0 = time.time()
    table = ablate(cfg, seeds, out, progress=progress)
    for seed in seeds:
        for v in FusionVariant:
            run = out / f"seed{seed}" / v.value
            key = f"seed{seed}/{v.value}"
            if (run / "report_unheard.txt").is_file() and key not in timing:
                # the config is written first and the unheard report last
                timing[key] = (run / "report_unheard.txt").stat().st_mtime - (run / "config.cfg").stat().st_mtime
    timing["ablation_session_seconds"] = timing.get("ablation_session_seconds", 0.0) + time.time() - t0
    timing_path.write_text(json.dumps(timing, indent=2) + "\n")
    print(table, end="", flush=True)

    for seed in seeds:
        logs = [out / f"seed{seed}" / v.value / "train.log" for v in (FusionVariant.SACF, FusionVariant.CONCAT)]
        write_plot(logs, out / f"curves_seed{seed}", ["sacf", "concat"])

    sampled = sampled_table(cfg, seeds, out)
    (out / "ablation_sampled.txt").write_text(sampled)
    print(sampled, end="", flush=True)

    if not args.skip_determinism:
        seed = seeds[0]
        rerun = out / "determinism" / f"seed{seed}_sacf"
        if not (rerun / "report_unheard.txt").is_file():
            train(variant_config(cfg, FusionVariant.SACF, seed), rerun, progress=progress)
        result = compare_runs(out / f"seed{seed}" / FusionVariant.SACF.value, rerun)
        (out / "determinism.json").write_text(json.dumps(result, indent=2) + "\n")
        print("determinism:", "identical" if result["identical"] else f"differs in {result['different']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
