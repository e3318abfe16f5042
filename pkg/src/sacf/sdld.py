"""Discretised direction/distance localisation descriptor.

Audio and visual features are fused, two K-bin softmax heads predict the
source distance and bearing, the distributions are decoded by expectation over
bin centres, the bearing is turned into a unit direction vector, and the
triplet (sed score, x, y) is refined by an LSTM into a compact descriptor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .nets import LSTMCell, Linear, Module, linear_count, lstm_count


@dataclass(frozen=True)
class BinGrid:
    bins: int = 20
    max_distance: float = 30.0

    @property
    def distance_width(self) -> float:
        return self.max_distance / self.bins

    @property
    def angle_width(self) -> float:
        return 2 * math.pi / self.bins

    @cached_property
    def distance_centers(self) -> np.ndarray:
        return (np.arange(self.bins) + 0.5) * self.distance_width

    @cached_property
    def angle_centers(self) -> np.ndarray:
        return -math.pi + (np.arange(self.bins) + 0.5) * self.angle_width

    def distance_bin(self, d):
        idx = np.floor(np.asarray(d, dtype=np.float64) / self.distance_width).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1)

    def angle_bin(self, theta):
        """Bins cover (-pi, pi]; a bearing of exactly pi lands in the last bin."""
        idx = np.floor((np.asarray(theta, dtype=np.float64) + math.pi) / self.angle_width).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1)


def decode_expectation(probs, centers: np.ndarray, tol: float = 1e-4) -> np.ndarray:
    """Expected value sum_i P(i) * c_i over the last axis of ``probs``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.shape[-1] != len(centers):
        raise ContractViolation(f"decode_expectation: {p.shape[-1]} probabilities for {len(centers)} bins")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol) or np.any(p < -tol):
        raise ContractViolation("decode_expectation: distribution is not normalised")
    return p @ np.asarray(centers, dtype=np.float64)


def encode_direction(theta):
    theta = np.asarray(theta, dtype=np.float64)
    return np.cos(theta), np.sin(theta)


@dataclass
class SDLDConfig:
    bins: int = 20
    max_distance: float = 30.0
    fused_dim: int = 64
    lstm_hidden: int = 32
    descriptor_dim: int = 32


@dataclass
class FrameOutput:
    """Single-frame predictions for a batch of observations."""

    logits_d: Tensor
    logits_theta: Tensor
    sed_logit: Tensor
    p_d: Tensor
    p_theta: Tensor
    d_hat: Tensor
    theta_hat: Tensor
    sed: Tensor
    triplet: Tensor  # (N, 3): sed, x, y


class SDLD(Module):
    def __init__(self, cfg: SDLDConfig, visual_channels: int, audio_channels: int, rng: np.random.Generator,
                 zero_init: bool = False):
        self.cfg = cfg
        self.grid = BinGrid(cfg.bins, cfg.max_distance)
        self.visual_channels, self.audio_channels = visual_channels, audio_channels
        init = "zeros" if zero_init else "uniform"
        self.fuse = Linear(visual_channels + audio_channels, cfg.fused_dim, rng, init=init)
        self.head = Linear(cfg.fused_dim, 2 * cfg.bins + 1, rng, init=init)
        self.lstm = LSTMCell(3, cfg.lstm_hidden, rng, zero=zero_init)
        self.out = Linear(cfg.lstm_hidden, cfg.descriptor_dim, rng, init=init)
        self._dc = None

    def _centers(self):
        if self._dc is None or self._dc[0].values.dtype != ad.current_dtype():
            self._dc = (
                Tensor(self.grid.distance_centers[:, None]),
                Tensor(self.grid.angle_centers[:, None]),
            )
        return self._dc

    def fuse_av(self, f_v: Tensor, f_a: Tensor) -> Tensor:
        """Channel concat after nearest-neighbour alignment of the audio map, then pool + linear + relu."""
        if f_v.values.ndim != 4 or f_a.values.ndim != 4:
            raise ContractViolation("fuse_av: feature maps must be (N, C, H, W)")
        if f_v.shape[1] != self.visual_channels or f_a.shape[1] != self.audio_channels:
            raise ContractViolation(f"fuse_av: channel mismatch {f_v.shape} / {f_a.shape}")
        _, _, h, w = f_v.shape
        ah, aw = f_a.shape[2:]
        if h % ah or w % aw:
            raise ContractViolation(f"fuse_av: audio map {ah}x{aw} does not tile visual map {h}x{w}")
        aligned = ad.upsample_nearest(f_a, h // ah, w // aw)
        joint = ad.concat([f_v, aligned], axis=1)
        return ad.relu(self.fuse(ad.mean_pool_spatial(joint)))

    def predict_bins(self, f_av: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Raw logits for distance, bearing and the sed score."""
        k = self.cfg.bins
        out = self.head(f_av)
        return out[:, :k], out[:, k : 2 * k], out[:, 2 * k :]

    def frame(self, f_v: Tensor, f_a: Tensor) -> FrameOutput:
        logits_d, logits_t, sed_logit = self.predict_bins(self.fuse_av(f_v, f_a))
        p_d, p_t = ad.softmax(logits_d), ad.softmax(logits_t)
        cd, ct = self._centers()
        d_hat = ad.matmul(p_d, cd)
        theta_hat = ad.matmul(p_t, ct)
        sed = ad.sigmoid(sed_logit)
        triplet = ad.concat([sed, ad.cos(theta_hat), ad.sin(theta_hat)], axis=-1)
        return FrameOutput(logits_d, logits_t, sed_logit, p_d, p_t, d_hat, theta_hat, sed, triplet)

    def refine(self, triplet: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        h, state = self.lstm(triplet, state)
        return self.out(h), state

    def zero_state(self, n: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((n, self.cfg.lstm_hidden))
        return Tensor(z), Tensor(z)

    def param_count(self) -> int:
        return self.count_formula(self.cfg, self.visual_channels, self.audio_channels)

    @staticmethod
    def count_formula(cfg: SDLDConfig, visual_channels: int, audio_channels: int) -> int:
        return (
            linear_count(visual_channels + audio_channels, cfg.fused_dim)
            + linear_count(cfg.fused_dim, 2 * cfg.bins + 1)
            + lstm_count(3, cfg.lstm_hidden)
            + linear_count(cfg.lstm_hidden, cfg.descriptor_dim)
        )


def sdld_step(sdld: SDLD, f_v: Tensor, f_a: Tensor, state):
    """One step: frame predictions, then LSTM refinement into the descriptor g."""
    fr = sdld.frame(f_v, f_a)
    g, new_state = sdld.refine(fr.triplet, state)
    return g, new_state, fr


def sdld_aux_loss(logits_d: Tensor, logits_theta: Tensor, sed_logit: Tensor, dist_bin, angle_bin, reached,
                  bins: int = 20, mask=None) -> Tensor:
    """CE(distance) + CE(bearing) + BCE(sed), averaged over the (optionally masked) batch."""
    dist_bin = np.asarray(dist_bin, dtype=np.int64)
    angle_bin = np.asarray(angle_bin, dtype=np.int64)
    for name, idx in (("distance", dist_bin), ("angle", angle_bin)):
        if np.any(idx < 0) or np.any(idx >= bins):
            raise ContractViolation(f"sdld_aux_loss: {name} bin index outside [0, {bins})")
    n = dist_bin.shape[0]
    w = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    denom = max(float(w.sum()), 1.0)
    onehot_d = np.zeros((n, bins))
    onehot_d[np.arange(n), dist_bin] = w
    onehot_t = np.zeros((n, bins))
    onehot_t[np.arange(n), angle_bin] = w
    ce_d = ad.sum_(ad.mul(ad.log_softmax(logits_d), Tensor(onehot_d)))
    ce_t = ad.sum_(ad.mul(ad.log_softmax(logits_theta), Tensor(onehot_t)))
    y = np.asarray(reached, dtype=np.float64).reshape(n, 1)
    z = sed_logit
    bce = ad.sum_(ad.mul(ad.sub(ad.softplus(z), ad.mul(z, Tensor(y))), Tensor(w.reshape(n, 1))))
    total = ad.add(ad.add(ad.neg(ce_d), ad.neg(ce_t)), bce)
    return ad.scale(total, 1.0 / denom)
