"""Experiment orchestration behind the CLI: training runs, ablations, parameter tables, plots."""

from __future__ import annotations

import copy
import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import config as config_io
from .acvf import FusionVariant, spatial_attention_param_count
from .autodiff import ContractViolation
from .config import ExperimentConfig
from .metrics import MetricsReport, PolicyAgent, dump_trajectories, evaluate
from .nets import (
    audio_encoder_count,
    count_parameters,
    gru_count,
    linear_count,
    visual_encoder_count,
)
from .policy import N_ACTIONS, ModelConfig, PolicyNetwork
from .ppo import LOG_COLUMNS, Trainer, format_log_line, parse_log
from .sdld import SDLD
from .sim import seed_stream

SPLITS = ("heard", "unheard")
EVAL_SEED_OFFSET = 10_000


def build_policy(cfg: ExperimentConfig, seed: int) -> PolicyNetwork:
    config_io.validate(cfg)
    return PolicyNetwork(cfg.model, seed_stream(seed, "init"))


def eval_line(update: int, rep: MetricsReport) -> str:
    return f"# eval {update} {rep.split} {rep.sr:.6f} {rep.spl:.6f} {rep.sna:.6f}"


def parse_eval_lines(path: str | Path) -> list[dict]:
    """The ``# eval update split SR SPL SNA`` records interleaved with a training log."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.startswith("# eval"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ContractViolation(f"{path}:{lineno}: malformed eval record")
        try:
            rows.append({"update": int(parts[2]), "split": parts[3], "sr": float(parts[4]),
                         "spl": float(parts[5]), "sna": float(parts[6])})
        except ValueError as e:
            raise ContractViolation(f"{path}:{lineno}: non-numeric eval field") from e
    return rows


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    out_dir: Path
    final_checkpoint: Path
    reports: dict[str, MetricsReport] = field(default_factory=dict)


def train(cfg: ExperimentConfig, out_dir: str | Path, resume: str | Path | None = None,
          progress=None) -> TrainResult:
    """Train one variant; everything lands in ``out_dir``.

    The training log gets one line per update plus ``# eval`` records every
    ``run.eval_every`` updates (heard split, held-out layouts).  Checkpoints are
    written every ``run.checkpoint_every`` updates and at the end.
    """
    config_io.validate(cfg)
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(config_io.dumps(cfg))
    seed, run = cfg.run.seed, cfg.run
    digest = config_io.model_digest(cfg)
    policy = build_policy(cfg, seed)
    trainer = Trainer(policy, cfg.sim, cfg.ppo, seed)
    if resume is not None:
        ckpt_io.restore(ckpt_io.load(resume), policy, digest, trainer.opt)
        # fresh streams for the continuation, keyed by the resume point
        trainer.reseed(trainer.update)
    log_path = out / "train.log"
    mode = "a" if resume is not None else "w"
    eval_seed = seed + EVAL_SEED_OFFSET
    t0 = time.time()
    with open(log_path, mode) as log:
        while trainer.update < cfg.ppo.updates:
            u = trainer.update
            stats, reward = trainer.train_one()
            log.write(format_log_line(u, reward, stats) + "\n")
            log.flush()
            done = trainer.update
            if run.eval_every > 0 and done % run.eval_every == 0:
                rep = evaluate(PolicyAgent(policy), "heard", run.eval_episodes, eval_seed, cfg.sim)
                log.write(eval_line(done, rep) + "\n")
                log.flush()
            if run.checkpoint_every > 0 and done % run.checkpoint_every == 0:
                ckpt_io.save(out / "checkpoints" / f"update_{done:06d}.ckpt", policy, digest, trainer.opt)
            if progress is not None:
                progress(done, reward, stats, time.time() - t0)
    final = out / "final.ckpt"
    ckpt_io.save(final, policy, digest, trainer.opt)
    result = TrainResult(out, final)
    for split in SPLITS:
        rep = evaluate(PolicyAgent(policy), split, run.final_eval_episodes, eval_seed, cfg.sim)
        (out / f"report_{split}.txt").write_text(rep.to_text())
        dump_trajectories(rep, out / f"trajectories_{split}.txt")
        result.reports[split] = rep
    return result


def load_policy(cfg: ExperimentConfig, path: str | Path) -> PolicyNetwork:
    policy = build_policy(cfg, cfg.run.seed)
    ckpt_io.restore(ckpt_io.load(path), policy, config_io.model_digest(cfg))
    return policy


# ---------------------------------------------------------------- ablation

ABLATION_ORDER = (FusionVariant.CONCAT, FusionVariant.NO_SDLD, FusionVariant.NO_ACVF, FusionVariant.SACF)
# Unheard SR / SPL reported at full scale (Replica scenes); non-binding references
FULL_SCALE_REFERENCE = {
    FusionVariant.CONCAT: (50.9, 34.7),
    FusionVariant.SACF: (79.1, 43.9),
}


def variant_config(cfg: ExperimentConfig, variant: FusionVariant, seed: int) -> ExperimentConfig:
    c = copy.deepcopy(cfg)
    c.model.variant = variant
    c.run.seed = seed
    return c


def ablation_rows(results: dict[tuple[int, FusionVariant], dict[str, MetricsReport]]) -> list[dict]:
    rows = []
    for (seed, variant), reps in sorted(results.items(), key=lambda kv: (kv[0][0], ABLATION_ORDER.index(kv[0][1]))):
        for split in SPLITS:
            r = reps[split]
            rows.append({"seed": seed, "variant": variant.value, "split": split,
                         "sr": r.sr, "spl": r.spl, "sna": r.sna})
    return rows


def format_ablation_table(rows: list[dict], seeds: list[int], updates: int) -> str:
    def cell(variant, split, key):
        vals = [r[key] for r in rows if r["variant"] == variant.value and r["split"] == split]
        return f"{np.mean(vals):5.1f} [{min(vals):5.1f}, {max(vals):5.1f}]"

    head = f"{'model':<24}" + "".join(f"{s + ' ' + k:<22}" for s in SPLITS for k in ("SR", "SPL"))
    lines = [f"# ablation over seeds {','.join(map(str, seeds))}; {updates} updates; mean [min, max]", head]
    for v in ABLATION_ORDER:
        lines.append(f"{v.label:<24}" + "".join(f"{cell(v, s, k):<22}" for s in SPLITS for k in ("sr", "spl")))
    lines.append("# full-scale reference (Replica unheard SR/SPL, non-binding): "
                 + "; ".join(f"{v.label} {sr}/{spl}" for v, (sr, spl) in FULL_SCALE_REFERENCE.items()))
    return "\n".join(lines) + "\n"


def write_ablation_runs(rows: list[dict], path: Path) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["seed", "variant", "split", "sr", "spl", "sna"])
    w.writeheader()
    for r in rows:
        w.writerow({**r, **{k: f"{r[k]:.6f}" for k in ("sr", "spl", "sna")}})
    path.write_text(buf.getvalue())


def read_ablation_runs(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"seed": int(r["seed"]), "variant": r["variant"], "split": r["split"],
                 "sr": float(r["sr"]), "spl": float(r["spl"]), "sna": float(r["sna"])} for r in csv.DictReader(fh)]


def ablate(cfg: ExperimentConfig, seeds: list[int], out_dir: str | Path, progress=None) -> str:
    """Train every variant for every seed (skipping runs whose reports already exist)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for seed in seeds:
        for variant in ABLATION_ORDER:
            run_dir = out / f"seed{seed}" / variant.value
            reports = {s: run_dir / f"report_{s}.txt" for s in SPLITS}
            if all(p.is_file() for p in reports.values()):
                results[(seed, variant)] = {s: MetricsReport.from_text(p.read_text()) for s, p in reports.items()}
                continue
            res = train(variant_config(cfg, variant, seed), run_dir, progress=progress)
            results[(seed, variant)] = res.reports
    rows = ablation_rows(results)
    write_ablation_runs(rows, out / "ablation_runs.csv")
    table = format_ablation_table(rows, seeds, cfg.ppo.updates)
    (out / "ablation.txt").write_text(table)
    return table


# ---------------------------------------------------------------- parameter accounting


def closed_form_count(mc: ModelConfig) -> int:
    """Total trainable parameters from layer formulas alone (no model built)."""
    v = FusionVariant(mc.variant)
    vc, ac, sc = mc.visual, mc.audio, mc.sdld
    total = visual_encoder_count(vc) + audio_encoder_count(ac)
    if v.uses_sdld:
        total += SDLD.count_formula(sc, vc.channels, ac.channels)
    if v.uses_film:
        cond = ac.embed_dim + (sc.descriptor_dim if v.uses_sdld else 0)
        total += linear_count(cond, mc.film_hidden) + linear_count(mc.film_hidden, 2 * vc.channels)
    g_in = vc.channels * vc.height * vc.width + ac.embed_dim + (sc.descriptor_dim if v.uses_sdld else 0)
    total += gru_count(g_in, mc.gru_hidden)
    total += linear_count(mc.gru_hidden, N_ACTIONS) + linear_count(mc.gru_hidden, 1)
    return total


@dataclass
class ParamTable:
    concat: int
    sacf: int
    attention: int
    overhead: dict[str, int]

    @property
    def overhead_ratio(self) -> float:
        return (self.sacf - self.concat) / self.concat

    def to_text(self) -> str:
        lines = [
            f"{'model':<28}{'params':>12}{'params (M)':>12}",
            f"{'concat baseline':<28}{self.concat:>12d}{self.concat / 1e6:>12.4f}",
            f"{'SACF (full)':<28}{self.sacf:>12d}{self.sacf / 1e6:>12.4f}",
            f"{'spatial attention':<28}{self.attention:>12d}{self.attention / 1e6:>12.4f}",
            f"SACF overhead over concat: {self.sacf - self.concat} ({100 * self.overhead_ratio:.2f}%)",
        ]
        lines += [f"  {k}: {v}" for k, v in self.overhead.items()]
        return "\n".join(lines) + "\n"


def param_table(cfg: ExperimentConfig, max_overhead: float = 0.05) -> ParamTable:
    """Build the concat and SACF models, count them, and check them against the formulas."""
    config_io.validate(cfg)
    counts = {}
    sacf_model: PolicyNetwork | None = None
    for v in (FusionVariant.CONCAT, FusionVariant.SACF):
        mc = copy.deepcopy(cfg.model)
        mc.variant = v
        model = PolicyNetwork(mc, seed_stream(cfg.run.seed, "init"))
        built = count_parameters(model)["total"]
        if built != closed_form_count(mc):
            raise ContractViolation(f"{v.value}: built model has {built} parameters, formula gives "
                                    f"{closed_form_count(mc)}")
        counts[v] = built
        if v is FusionVariant.SACF:
            sacf_model = model
    vc = cfg.model.visual
    attention = counts[FusionVariant.CONCAT] + spatial_attention_param_count(
        vc.channels, vc.height, vc.width, cfg.model.audio.embed_dim)
    table = ParamTable(counts[FusionVariant.CONCAT], counts[FusionVariant.SACF], attention,
                       sacf_model.overhead_breakdown())
    if sum(table.overhead.values()) != table.sacf - table.concat:
        raise ContractViolation("overhead breakdown does not sum to the count difference")
    if not table.concat < table.sacf < table.attention:
        raise ContractViolation(f"count ordering violated: concat {table.concat}, SACF {table.sacf}, "
                                f"attention {table.attention}")
    if table.overhead_ratio > max_overhead:
        raise ContractViolation(f"SACF overhead {100 * table.overhead_ratio:.2f}% exceeds "
                                f"{100 * max_overhead:.0f}%")
    return table


# ---------------------------------------------------------------- plotting


def curve_data(log_path: str | Path) -> list[tuple[int, float, float | None]]:
    """(update, reward, eval_spl) per training-log line; eval_spl only where an eval ran after that update."""
    rows = parse_log(log_path)
    spl = {e["update"]: e["spl"] for e in parse_eval_lines(log_path) if e["split"] == "heard"}
    return [(int(r["update"]), r["reward"], spl.get(int(r["update"]) + 1)) for r in rows]


def write_plot(logs: list[str | Path], out_prefix: str | Path, labels: list[str] | None = None) -> list[Path]:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    labels = labels or [Path(p).parent.name or Path(p).stem for p in logs]
    data = [curve_data(p) for p in logs]  # parse everything before writing anything
    written = []
    for label, rows in zip(labels, data):
        path = out_prefix.parent / f"{out_prefix.name}_{label}.csv"
        lines = ["update,reward,eval_spl"]
        lines += [f"{u},{r:.6f},{'' if s is None else f'{s:.6f}'}" for u, r, s in rows]
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    fig, (ax_r, ax_s) = plt.subplots(1, 2, figsize=(10, 4))
    for label, rows in zip(labels, data):
        ax_r.plot([u for u, _, _ in rows], [r for _, r, _ in rows], label=label)
        pts = [(u + 1, s) for u, _, s in rows if s is not None]
        ax_s.plot([u for u, _ in pts], [s for _, s in pts], marker="o", markersize=3, label=label)
    ax_r.set_xlabel("update")
    ax_r.set_ylabel("mean episode reward")
    ax_s.set_xlabel("update")
    ax_s.set_ylabel("eval SPL")
    ax_r.legend()
    ax_s.legend()
    fig.tight_layout()
    svg = out_prefix.parent / f"{out_prefix.name}.svg"
    fig.savefig(svg, format="svg", metadata={"Date": None})
    plt.close(fig)
    written.append(svg)
    return written


__all__ = [
    "LOG_COLUMNS",
    "ablate",
    "param_table",
    "train",
    "write_plot",
]
