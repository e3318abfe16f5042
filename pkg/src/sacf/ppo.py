"""Recurrent PPO: rollout collection over parallel environments, GAE, clipped updates, training loop."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ContractViolation, NumericFault, Tensor
from .policy import N_ACTIONS, PolicyNetwork
from .sdld import sdld_aux_loss
from .sim import NavEnv, SimConfig, make_sound_bank, sample_episode, seed_stream

log = logging.getLogger(__name__)


@dataclass
class PPOConfig:
    clip: float = 0.1
    epochs: int = 4
    minibatches: int = 1
    value_coef: float = 0.5
    entropy_coef: float = 0.20
    max_grad_norm: float = 0.5
    lr: float = 2.5e-4
    adam_eps: float = 1e-5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    updates: int = 2000
    aux_weight: float = 0.5
    num_envs: int = 5
    horizon: int = 128


@dataclass
class RolloutBuffer:
    depth: np.ndarray  # (T, N, R)
    audio: np.ndarray  # (T, N, 2, B)
    starts: np.ndarray  # (T, N) 1 where the observation opens a new episode
    actions: np.ndarray
    logprobs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    dist_bin: np.ndarray
    angle_bin: np.ndarray
    reached: np.ndarray
    state0: dict[str, np.ndarray]
    bootstrap: np.ndarray  # (N,) value of the observation after the last step
    episode_returns: list[float] = field(default_factory=list)
    episode_success: list[bool] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.starts.shape[0]


def sample_categorical(logits: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-CDF sampling; returns (actions, log-probs)."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    cdf = np.cumsum(np.exp(logp), axis=-1)
    u = rng.random(len(z))[:, None]
    a = np.minimum((u > cdf).sum(axis=-1), logits.shape[-1] - 1)
    return a, logp[np.arange(len(a)), a]


class VecEnv:
    """N environment slots, each with its own episode and noise streams."""

    def __init__(self, sim: SimConfig, n: int, seed: int, split: str = "heard", layouts: str = "train"):
        self.sim = sim
        self.sounds = make_sound_bank(sim.sound_seed, sim.bands, sim.n_heard, sim.n_unheard)
        self.split, self.layouts = split, layouts
        self.seed = seed
        self.envs = [NavEnv(sim, self.sounds, seed_stream(seed, "env-noise", i)) for i in range(n)]
        self.episode_rngs = [seed_stream(seed, "episodes", i) for i in range(n)]
        self.returns = np.zeros(n)
        self.last = [self._new_episode(i) for i in range(n)]
        self.starts = np.ones(n)

    def _new_episode(self, i: int):
        ep_seed = int(self.episode_rngs[i].integers(2**31))
        return self.envs[i].reset(sample_episode(ep_seed, self.split, self.sim, self.layouts))

    def observations(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.stack([r.depth for r in self.last]).astype(np.float32),
                np.stack([r.audio for r in self.last]).astype(np.float32))

    def truth(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (np.array([r.truth.distance_bin for r in self.last]),
                np.array([r.truth.angle_bin for r in self.last]),
                np.array([r.truth.reached for r in self.last], dtype=np.float64))

    def step(self, actions: np.ndarray):
        n = len(self.envs)
        rewards, dones = np.zeros(n), np.zeros(n)
        finished = []
        for i, (env, a) in enumerate(zip(self.envs, actions)):
            try:
                res = env.step(int(a))
            except Exception as e:  # noqa: BLE001 - annotate with the slot before propagating
                raise RuntimeError(f"environment slot {i}: {e}") from e
            rewards[i] = res.reward
            self.returns[i] += res.reward
            if res.done:
                dones[i] = 1.0
                finished.append((self.returns[i], env.success))
                self.returns[i] = 0.0
                res = self._new_episode(i)
            self.last[i] = res
        self.starts = dones.copy()
        return rewards, dones, finished


def collect_rollout(policy: PolicyNetwork, venv: VecEnv, state: dict[str, np.ndarray], horizon: int,
                    rng: np.random.Generator):
    """Run ``horizon`` steps in every slot.  Returns (buffer, recurrent state after the last step)."""
    n = len(venv.envs)
    d0, a0 = venv.observations()
    depth = np.zeros((horizon, n, d0.shape[1]), dtype=np.float32)
    audio = np.zeros((horizon, n) + a0.shape[1:], dtype=np.float32)
    starts = np.zeros((horizon, n))
    actions = np.zeros((horizon, n), dtype=np.int64)
    logprobs, values, rewards, dones = (np.zeros((horizon, n)) for _ in range(4))
    dist_bin, angle_bin = np.zeros((horizon, n), dtype=np.int64), np.zeros((horizon, n), dtype=np.int64)
    reached = np.zeros((horizon, n))
    state0 = {k: v.copy() for k, v in state.items()}
    rets, succ = [], []
    with ad.no_grad():
        for t in range(horizon):
            depth[t], audio[t] = venv.observations()
            starts[t] = venv.starts
            dist_bin[t], angle_bin[t], reached[t] = venv.truth()
            out, state = policy.step(depth[t], audio[t], state, starts[t])
            a, lp = sample_categorical(out.logits.values, rng)
            actions[t], logprobs[t], values[t] = a, lp, out.value.values[:, 0]
            rewards[t], dones[t], finished = venv.step(a)
            for r, s in finished:
                rets.append(r)
                succ.append(s)
        d, au = venv.observations()
        out, _ = policy.step(d, au, state, venv.starts)
        bootstrap = out.value.values[:, 0].astype(np.float64)
    buf = RolloutBuffer(depth, audio, starts, actions, logprobs, values, rewards, dones, dist_bin, angle_bin,
                        reached, state0, bootstrap, rets, succ)
    return buf, state


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, bootstrap: np.ndarray,
                gamma: float = 0.99, lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimation over (T, N) arrays; ``dones[t]`` ends the episode after step t."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    for t in reversed(range(T)):
        next_value = bootstrap if t == T - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


def normalize(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / (x.std() + 1e-8)


@dataclass
class UpdateStats:
    loss_pi: float
    loss_v: float
    entropy: float
    aux: float
    clipfrac: float
    grad_norm: float
    lr: float
    ratio_max_dev_first: float = 0.0
    value_max_dev_first: float = 0.0


def ppo_loss(policy: PolicyNetwork, buf: RolloutBuffer, adv: np.ndarray, returns: np.ndarray, cfg: PPOConfig):
    """Total loss tensor plus diagnostics for one full-batch pass."""
    out = policy.sequence(buf.depth, buf.audio, buf.starts, buf.state0)
    M = buf.actions.size
    onehot = np.zeros((M, N_ACTIONS))
    onehot[np.arange(M), buf.actions.reshape(-1)] = 1.0
    logp_all = ad.log_softmax(out.logits)
    logp = ad.sum_(ad.mul(logp_all, Tensor(onehot)), axis=-1)
    ratio = ad.exp(ad.sub(logp, Tensor(buf.logprobs.reshape(-1))))
    A = Tensor(adv.reshape(-1))
    surr1 = ad.mul(ratio, A)
    surr2 = ad.mul(ad.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), A)
    loss_pi = ad.neg(ad.mean(ad.minimum(surr1, surr2)))
    v = ad.reshape(out.value, (M,))
    err = ad.sub(v, Tensor(returns.reshape(-1)))
    loss_v = ad.scale(ad.mean(ad.mul(err, err)), 0.5)
    p = ad.softmax(out.logits)
    entropy = ad.neg(ad.mean(ad.sum_(ad.mul(p, logp_all), axis=-1)))
    total = ad.add(ad.add(loss_pi, ad.scale(loss_v, cfg.value_coef)), ad.scale(entropy, -cfg.entropy_coef))
    aux_val = 0.0
    if policy.sdld is not None and cfg.aux_weight:
        fr = out.frame
        aux = sdld_aux_loss(fr.logits_d, fr.logits_theta, fr.sed_logit, buf.dist_bin.reshape(-1),
                            buf.angle_bin.reshape(-1), buf.reached.reshape(-1), policy.cfg.sdld.bins)
        total = ad.add(total, ad.scale(aux, cfg.aux_weight))
        aux_val = aux.item()
    r = ratio.values
    diag = {
        "loss_pi": loss_pi.item(),
        "loss_v": loss_v.item(),
        "entropy": entropy.item(),
        "aux": aux_val,
        "clipfrac": float(np.mean(np.abs(r - 1.0) > cfg.clip)),
        "ratio_dev": float(np.max(np.abs(r - 1.0))),
        "value_dev": float(np.max(np.abs(v.values - buf.values.reshape(-1)))),
    }
    return total, diag


def ppo_update(policy: PolicyNetwork, opt: Adam, buf: RolloutBuffer, cfg: PPOConfig) -> UpdateStats:
    adv, returns = compute_gae(buf.rewards, buf.values, buf.dones, buf.bootstrap, cfg.gamma, cfg.gae_lambda)
    adv = normalize(adv)
    params = policy.parameters()
    agg = {"loss_pi": 0.0, "loss_v": 0.0, "entropy": 0.0, "aux": 0.0, "clipfrac": 0.0}
    first = None
    norm = 0.0
    lr = opt.lr
    for epoch in range(cfg.epochs):
        with ad.Graph():
            total, diag = ppo_loss(policy, buf, adv, returns, cfg)
            if not math.isfinite(total.item()):
                raise NumericFault(f"ppo_update: non-finite loss {diag}")
            opt.zero_grad()
            ad.backward(total)
        if first is None:
            first = diag
        norm = ad.clip_grad_norm(params, cfg.max_grad_norm)
        opt.step()
        for k in agg:
            agg[k] += diag[k] / cfg.epochs
    opt.decay()
    return UpdateStats(agg["loss_pi"], agg["loss_v"], agg["entropy"], agg["aux"], agg["clipfrac"], norm, lr,
                       first["ratio_dev"], first["value_dev"])


def global_grad_norm(params) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)))


# ---------------------------------------------------------------- training loop


class Trainer:
    """Owns the policy, optimiser, environments and streams for one run."""

    def __init__(self, policy: PolicyNetwork, sim: SimConfig, cfg: PPOConfig, seed: int):
        self.policy, self.sim, self.cfg, self.seed = policy, sim, cfg, seed
        self.opt = Adam(policy.parameters(), lr=cfg.lr, eps=cfg.adam_eps, total_updates=cfg.updates)
        self.venv = VecEnv(sim, cfg.num_envs, seed)
        self.sampler = seed_stream(seed, "sampler")
        self.state = policy.initial_state(cfg.num_envs)
        self.recent_returns: deque[float] = deque(maxlen=50)
        self.recent_success: deque[bool] = deque(maxlen=50)

    @property
    def update(self) -> int:
        return self.opt.update

    def reseed(self, update: int) -> None:
        """Fresh environment/sampler streams for a run resumed at ``update``."""
        env_seed = int(seed_stream(self.seed, "resume-envs", update).integers(2**31))
        self.venv = VecEnv(self.sim, self.cfg.num_envs, env_seed)
        self.sampler = seed_stream(self.seed, "resume-sampler", update)
        self.state = self.policy.initial_state(self.cfg.num_envs)

    def train_one(self) -> tuple[UpdateStats, float]:
        buf, self.state = collect_rollout(self.policy, self.venv, self.state, self.cfg.horizon, self.sampler)
        self.recent_returns.extend(buf.episode_returns)
        self.recent_success.extend(buf.episode_success)
        stats = ppo_update(self.policy, self.opt, buf, self.cfg)
        reward = float(np.mean(self.recent_returns)) if self.recent_returns else 0.0
        return stats, reward


def format_log_line(update: int, reward: float, s: UpdateStats) -> str:
    return (f"{update} {reward:.6f} {s.loss_pi:.6f} {s.loss_v:.6f} {s.entropy:.6f} {s.aux:.6f} "
            f"{s.clipfrac:.6f} {s.lr:.8g}")


LOG_COLUMNS = ("update", "reward", "loss_pi", "loss_v", "entropy", "aux", "clipfrac", "lr")


def parse_log(path: str | Path) -> list[dict[str, float]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != len(LOG_COLUMNS):
            raise ContractViolation(f"{path}:{lineno}: expected {len(LOG_COLUMNS)} fields, got {len(parts)}")
        try:
            vals = [float(x) for x in parts]
        except ValueError as e:
            raise ContractViolation(f"{path}:{lineno}: non-numeric field") from e
        rows.append(dict(zip(LOG_COLUMNS, vals)))
    return rows
