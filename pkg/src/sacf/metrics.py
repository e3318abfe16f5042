"""SR / SPL / SNA, the shortest-action oracle, and the batched evaluation runner."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation
from .sim import (
    HEADINGS,
    MOVE_FORWARD,
    STOP,
    TURN_LEFT,
    TURN_RIGHT,
    EpisodeSpec,
    NavEnv,
    OccupancyGrid,
    Pose,
    SimConfig,
    make_sound_bank,
    sample_episode,
    seed_stream,
)


@dataclass
class EpisodeRecord:
    success: bool
    path_length: float
    shortest_path: float
    action_count: int
    optimal_action_count: int
    sound_id: int = -1
    trajectory: list[Pose] = field(default_factory=list)


@dataclass
class MetricsReport:
    split: str
    sr: float
    spl: float
    sna: float
    records: list[EpisodeRecord]
    sound_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.sound_ids:
            self.sound_ids = sorted({r.sound_id for r in self.records})

    @property
    def n_episodes(self) -> int:
        return len(self.records)

    def to_text(self) -> str:
        lines = [f"{self.split} {self.n_episodes}"]
        lines.append("# sound_ids " + " ".join(str(i) for i in self.sound_ids))
        for r in self.records:
            lines.append(f"{int(r.success)} {r.path_length:.6f} {r.shortest_path:.6f} {r.action_count} "
                         f"{r.optimal_action_count}")
        lines.append(f"{self.sr:.6f} {self.spl:.6f} {self.sna:.6f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        rows = [ln for ln in text.splitlines() if ln.strip()]
        split, n = rows[0].split()
        sounds = []
        body = []
        for ln in rows[1:-1]:
            if ln.startswith("# sound_ids"):
                sounds = [int(x) for x in ln.split()[2:]]
                continue
            s, p, l, a, o = ln.split()
            body.append(EpisodeRecord(s == "1", float(p), float(l), int(a), int(o)))
        if len(body) != int(n):
            raise ContractViolation(f"report lists {len(body)} episodes, header says {n}")
        sr, spl, sna = (float(x) for x in rows[-1].split())
        return cls(split, sr, spl, sna, body, sounds)

    def summary(self) -> str:
        return f"{self.sr:.2f} {self.spl:.2f} {self.sna:.2f}"


def _check(records) -> None:
    if not records:
        raise ContractViolation("metrics: no episode records")


def compute_sr(records) -> float:
    _check(records)
    return 100.0 * float(np.mean([r.success for r in records]))


def compute_spl(records) -> float:
    _check(records)
    terms = []
    for r in records:
        if not r.success:
            terms.append(0.0)
        elif max(r.path_length, r.shortest_path) == 0:
            terms.append(1.0)
        else:
            terms.append(r.shortest_path / max(r.path_length, r.shortest_path))
    return 100.0 * float(np.mean(terms))


def compute_sna(records) -> float:
    _check(records)
    terms = [
        r.optimal_action_count / max(r.action_count, r.optimal_action_count) if r.success else 0.0
        for r in records
    ]
    return 100.0 * float(np.mean(terms))


def make_report(split: str, records: list[EpisodeRecord]) -> MetricsReport:
    return MetricsReport(split, compute_sr(records), compute_spl(records), compute_sna(records), records)


# ---------------------------------------------------------------- oracle


def cost_to_go(grid: OccupancyGrid, source, radius: int = 1) -> np.ndarray:
    """Fewest MoveForward/TurnLeft/TurnRight actions from each pose to a pose within ``radius`` hops of the source.

    Indexed [y, x, heading]; -1 where unreachable.  Computed by reverse BFS over poses.
    """
    key = ("cost", tuple(source), radius)
    hit = grid._field_cache.get(key)
    if hit is not None:
        return hit
    hops = grid.distance_field(source)
    cost = np.full(grid.blocked.shape + (4,), -1, dtype=np.int64)
    queue = deque()
    for y, x in zip(*np.nonzero((hops >= 0) & (hops <= radius))):
        for h in range(4):
            cost[y, x, h] = 0
            queue.append((int(x), int(y), h))
    while queue:
        x, y, h = queue.popleft()
        c = cost[y, x, h] + 1
        # predecessors: turned left from h-1, turned right from h+1, moved forward from behind
        preds = [(x, y, (h - 1) % 4), (x, y, (h + 1) % 4)]
        dx, dy = HEADINGS[h]
        if grid.is_free((x - dx, y - dy)):
            preds.append((x - dx, y - dy, h))
        for px, py, ph in preds:
            if cost[py, px, ph] < 0:
                cost[py, px, ph] = c
                queue.append((px, py, ph))
    stale = [k for k in grid._field_cache if isinstance(k, tuple) and k[0] == "cost"]
    if len(stale) >= 256:
        for k in stale:
            del grid._field_cache[k]
    grid._field_cache[key] = cost
    return cost


def oracle_action(grid: OccupancyGrid, source, pose: Pose, radius: int = 1) -> int:
    """Greedy step down the pose cost-to-go; Stop once within the success radius."""
    cost = cost_to_go(grid, source, radius)
    here = cost[pose.y, pose.x, pose.heading]
    if here == 0:
        return STOP
    dx, dy = HEADINGS[pose.heading]
    if grid.is_free((pose.x + dx, pose.y + dy)) and cost[pose.y + dy, pose.x + dx, pose.heading] == here - 1:
        return MOVE_FORWARD
    if cost[pose.y, pose.x, (pose.heading + 1) % 4] == here - 1:
        return TURN_LEFT
    return TURN_RIGHT


def shortest_success_path(spec: EpisodeSpec) -> float:
    """Geodesic length (meters) from the start to the nearest cell inside the success radius."""
    hops = spec.grid.distance_field(spec.source)[spec.start.y, spec.start.x]
    return max(0, int(hops) - spec.success_radius) * spec.grid.cell_size


def optimal_action_count(spec: EpisodeSpec) -> int:
    """Shortest action sequence that ends with a successful Stop."""
    s = spec.start
    c = cost_to_go(spec.grid, spec.source, spec.success_radius)[s.y, s.x, s.heading]
    if c < 0:
        raise ContractViolation("optimal_action_count: source unreachable")
    return int(c) + 1


# ---------------------------------------------------------------- agents


class OracleAgent:
    def reset(self, n: int) -> None:
        pass

    def act(self, depth, audio, envs: list[NavEnv], starts) -> np.ndarray:
        return np.array([oracle_action(e.spec.grid, e.spec.source, e.pose, e.spec.success_radius) for e in envs])


class RandomAgent:
    def __init__(self, seed: int = 0):
        self.seed = seed

    def reset(self, n: int) -> None:
        self.rng = seed_stream(self.seed, "random-agent")

    def act(self, depth, audio, envs, starts) -> np.ndarray:
        return self.rng.integers(0, 4, size=len(envs))


class PolicyAgent:
    """Greedy (argmax) actions from a trained network."""

    def __init__(self, policy):
        self.policy = policy

    def reset(self, n: int) -> None:
        self.state = self.policy.initial_state(n)

    def act(self, depth, audio, envs, starts) -> np.ndarray:
        with ad.no_grad():
            out, self.state = self.policy.step(depth, audio, self.state, starts)
        return np.argmax(out.logits.values, axis=-1)


def evaluate(agent, split: str, n_episodes: int, seed: int, sim: SimConfig, layouts: str = "test",
             batch: int = 50) -> MetricsReport:
    """Run ``n_episodes`` fresh episodes in lock-step batches; deterministic per seed."""
    if n_episodes <= 0:
        raise ContractViolation("evaluate: n_episodes must be positive")
    sounds = make_sound_bank(sim.sound_seed, sim.bands, sim.n_heard, sim.n_unheard)
    ep_rng = seed_stream(seed, "eval-episodes", 0 if split == "heard" else 1)
    specs = [sample_episode(int(ep_rng.integers(2**31)), split, sim, layouts) for _ in range(n_episodes)]
    records: list[EpisodeRecord] = []
    for b0 in range(0, n_episodes, batch):
        chunk = specs[b0 : b0 + batch]
        envs = [NavEnv(sim, sounds, seed_stream(seed, "eval-noise", b0 + i)) for i in range(len(chunk))]
        results = [env.reset(spec) for env, spec in zip(envs, chunk)]
        agent.reset(len(chunk))
        starts = np.ones(len(chunk))
        active = np.ones(len(chunk), dtype=bool)
        while active.any():
            depth = np.stack([r.depth for r in results]).astype(np.float32)
            audio = np.stack([r.audio for r in results]).astype(np.float32)
            actions = agent.act(depth, audio, envs, starts)
            starts = np.zeros(len(chunk))
            for i, env in enumerate(envs):
                if active[i]:
                    results[i] = env.step(int(actions[i]))
                    if env.done:
                        active[i] = False
        for env, spec in zip(envs, chunk):
            records.append(EpisodeRecord(
                success=env.success,
                path_length=env.forward_moves * spec.grid.cell_size,
                shortest_path=shortest_success_path(spec),
                action_count=env.actions,
                optimal_action_count=optimal_action_count(spec),
                sound_id=spec.sound_id,
                trajectory=list(env.trajectory),
            ))
    return make_report(split, records)


def dump_trajectories(report: MetricsReport, path: str | Path) -> None:
    """One line per episode: ``index success x,y,h x,y,h ...``."""
    lines = []
    for i, r in enumerate(report.records):
        poses = " ".join(f"{p.x},{p.y},{p.heading}" for p in r.trajectory)
        lines.append(f"{i} {int(r.success)} {poses}")
    Path(path).write_text("\n".join(lines) + "\n")
