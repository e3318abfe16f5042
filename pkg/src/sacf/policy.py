"""The recurrent actor-critic: encoders -> SDLD -> fusion -> GRU -> actor/critic heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .acvf import FiLMGenerator, FusionVariant, fuse_for_policy, policy_input_dim
from .autodiff import Tensor
from .nets import (
    AudioEncoder,
    AudioEncoderConfig,
    GRUCell,
    Linear,
    Module,
    VisualEncoder,
    VisualEncoderConfig,
    gru_count,
)
from .sdld import SDLD, FrameOutput, SDLDConfig

N_ACTIONS = 4


@dataclass
class ModelConfig:
    variant: FusionVariant = FusionVariant.SACF
    visual: VisualEncoderConfig = field(default_factory=VisualEncoderConfig)
    audio: AudioEncoderConfig = field(default_factory=AudioEncoderConfig)
    sdld: SDLDConfig = field(default_factory=SDLDConfig)
    film_hidden: int = 64
    gru_hidden: int = 128


@dataclass
class PolicyOutput:
    logits: Tensor
    value: Tensor
    frame: FrameOutput | None


class PolicyNetwork(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.variant = v = FusionVariant(cfg.variant)
        vc, ac = cfg.visual, cfg.audio
        self.visual = VisualEncoder(vc, rng)
        self.audio = AudioEncoder(ac, rng)
        self.sdld = SDLD(cfg.sdld, vc.channels, ac.channels, rng) if v.uses_sdld else None
        if v.uses_film:
            cond = ac.embed_dim + (cfg.sdld.descriptor_dim if v.uses_sdld else 0)
            self.film = FiLMGenerator(cond, vc.channels, rng, cfg.film_hidden)
        else:
            self.film = None
        self.input_dim = policy_input_dim(v, vc.channels, vc.height, vc.width, ac.embed_dim, cfg.sdld.descriptor_dim)
        self.gru = GRUCell(self.input_dim, cfg.gru_hidden, rng)
        self.actor = Linear(cfg.gru_hidden, N_ACTIONS, rng)
        self.critic = Linear(cfg.gru_hidden, 1, rng)

    # ------------------------------------------------------------ state

    def initial_state(self, n: int) -> dict[str, np.ndarray]:
        st = {"gru": np.zeros((n, self.cfg.gru_hidden), dtype=np.float32)}
        if self.sdld is not None:
            k = self.cfg.sdld.lstm_hidden
            st["lstm_h"] = np.zeros((n, k), dtype=np.float32)
            st["lstm_c"] = np.zeros((n, k), dtype=np.float32)
        return st

    # ------------------------------------------------------------ forward

    def step(self, depth: np.ndarray, audio: np.ndarray, state: dict[str, np.ndarray], starts: np.ndarray):
        """One batched step.  ``starts`` marks slots whose recurrent state is reset first."""
        keep = Tensor((1.0 - np.asarray(starts, dtype=np.float64))[:, None])
        f_v = self.visual(Tensor(depth))
        f_a, a_emb = self.audio(Tensor(audio))
        g = frame = None
        new_state = {}
        if self.sdld is not None:
            lstm_state = (ad.mul(Tensor(state["lstm_h"]), keep), ad.mul(Tensor(state["lstm_c"]), keep))
            frame = self.sdld.frame(f_v, f_a)
            g, (h, c) = self.sdld.refine(frame.triplet, lstm_state)
            new_state["lstm_h"], new_state["lstm_c"] = h.values, c.values
        x = fuse_for_policy(self.variant, f_v, a_emb, g, self.film)
        h = self.gru(x, ad.mul(Tensor(state["gru"]), keep))
        new_state["gru"] = h.values
        return PolicyOutput(self.actor(h), self.critic(h), frame), new_state

    def sequence(self, depth: np.ndarray, audio: np.ndarray, starts: np.ndarray, state0: dict[str, np.ndarray]):
        """Replay T x N steps from segment-start states.  Outputs are flattened time-major (t * N + slot)."""
        T, N = starts.shape
        M = T * N
        keep = [Tensor((1.0 - starts[t].astype(np.float64))[:, None]) for t in range(T)]
        f_v = self.visual(Tensor(depth.reshape(M, -1)))
        f_a, a_emb = self.audio(Tensor(audio.reshape(M, *audio.shape[2:])))
        g = frame = None
        if self.sdld is not None:
            frame = self.sdld.frame(f_v, f_a)
            trip = ad.reshape(frame.triplet, (T, N, 3))
            h, c = Tensor(state0["lstm_h"]), Tensor(state0["lstm_c"])
            hs = []
            for t in range(T):
                h, (_, c) = self.sdld.lstm(trip[t], (ad.mul(h, keep[t]), ad.mul(c, keep[t])))
                hs.append(h)
            # the output projection is applied once to all steps
            g = self.sdld.out(ad.concat(hs, axis=0))
        x = fuse_for_policy(self.variant, f_v, a_emb, g, self.film)
        H = self.cfg.gru_hidden
        gx = ad.reshape(ad.add(ad.matmul(x, self.gru.w_x), self.gru.b_x), (T, N, 3 * H))
        h = Tensor(state0["gru"])
        hs = []
        for t in range(T):
            h = self.gru.step_projected(gx[t], ad.mul(h, keep[t]))
            hs.append(h)
        hseq = ad.concat(hs, axis=0)
        return PolicyOutput(self.actor(hseq), self.critic(hseq), frame)

    # ------------------------------------------------------------ accounting

    def overhead_breakdown(self) -> dict[str, int]:
        """Parameters this variant adds on top of the concatenation baseline."""
        cfg = self.cfg
        out = {}
        if self.sdld is not None:
            out["sdld"] = self.sdld.param_count()
            out["gru_descriptor_input"] = 3 * cfg.gru_hidden * cfg.sdld.descriptor_dim
        if self.film is not None:
            out["film_generator"] = self.film.param_count()
        return out

    def gru_param_count(self) -> int:
        return gru_count(self.input_dim, self.cfg.gru_hidden)
