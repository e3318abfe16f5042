"""Layers, encoders and recurrent cells built on :mod:`sacf.autodiff`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor


class Module:
    """Parameter container.  Parameters and submodules are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((prefix + key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix + key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _param(values: np.ndarray, name: str) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float = 1.0) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, init: str = "uniform"):
        self.n_in, self.n_out = n_in, n_out
        if init == "zeros":
            w = np.zeros((n_in, n_out))
        elif init == "orthogonal":
            w = orthogonal(rng, (n_in, n_out))
        else:
            w = uniform_fan_in(rng, n_in, (n_in, n_out))
        self.weight = _param(w, "weight")
        self.bias = _param(np.zeros(n_out), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ContractViolation(f"Linear: expected last dim {self.n_in}, got {x.shape}")
        return ad.add(ad.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: tuple[int, int], rng: np.random.Generator, stride=1):
        kh, kw = kernel
        self.stride = stride
        self.weight = _param(uniform_fan_in(rng, c_in * kh * kw, (c_out, c_in, kh, kw)), "weight")
        self.bias = _param(np.zeros(c_out), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride)


class MLP(Module):
    """Linear layers with relu between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, zero_last: bool = False):
        n = len(sizes) - 1
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng, init="zeros" if zero_last and i == n - 1 else "uniform")
            for i in range(n)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class GRUCell(Module):
    """Gate order in the packed matrices: reset, update, candidate."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, zero: bool = False):
        self.n_in, self.hidden = n_in, hidden
        h3 = 3 * hidden
        if zero:
            wx, wh = np.zeros((n_in, h3)), np.zeros((hidden, h3))
        else:
            wx = uniform_fan_in(rng, n_in, (n_in, h3))
            wh = np.concatenate([orthogonal(rng, (hidden, hidden)) for _ in range(3)], axis=1)
        self.w_x = _param(wx, "w_x")
        self.w_h = _param(wh, "w_h")
        self.b_x = _param(np.zeros(h3), "b_x")
        self.b_h = _param(np.zeros(h3), "b_h")

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in or h.shape[-1] != self.hidden:
            raise ContractViolation(f"GRUCell: input {x.shape}, state {h.shape}")
        return self.step_projected(ad.add(ad.matmul(x, self.w_x), self.b_x), h)

    def step_projected(self, gx: Tensor, h: Tensor) -> Tensor:
        """Update from a precomputed input projection x @ w_x + b_x."""
        return ad.gru_cell(gx, h, self.w_h, self.b_h)


class LSTMCell(Module):
    """Gate order in the packed matrices: input, forget, cell, output."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, zero: bool = False):
        self.n_in, self.hidden = n_in, hidden
        h4 = 4 * hidden
        if zero:
            wx, wh = np.zeros((n_in, h4)), np.zeros((hidden, h4))
        else:
            wx = uniform_fan_in(rng, n_in, (n_in, h4))
            wh = np.concatenate([orthogonal(rng, (hidden, hidden)) for _ in range(4)], axis=1)
        self.w_x = _param(wx, "w_x")
        self.w_h = _param(wh, "w_h")
        self.bias = _param(np.zeros(h4), "bias")

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        h, c = state
        if x.shape[-1] != self.n_in or h.shape[-1] != self.hidden or c.shape != h.shape:
            raise ContractViolation(f"LSTMCell: input {x.shape}, state {h.shape}/{c.shape}")
        hc = ad.lstm_cell(x, h, c, self.w_x, self.w_h, self.bias)
        H = self.hidden
        h_new, c_new = hc[:, :H], hc[:, H:]
        return h_new, (h_new, c_new)


# ---------------------------------------------------------------- encoders


@dataclass
class VisualEncoderConfig:
    rays: int = 32
    channels: int = 16
    height: int = 4
    width: int = 4
    conv_channels: tuple[int, int] = (32, 64)
    hidden: int = 512


class VisualEncoder(Module):
    """Depth ray row -> C x H x W feature map.

    The rays form a 1 x R image row; two 1-d valid convolutions (kernel 3,
    strides 1 and 2) feed a dense projection reshaped to the output map.
    """

    def __init__(self, cfg: VisualEncoderConfig, rng: np.random.Generator):
        if cfg.channels <= 0 or cfg.height <= 0 or cfg.width <= 0:
            raise ContractViolation("VisualEncoder: output map dimensions must be positive")
        self.cfg = cfg
        c1, c2 = cfg.conv_channels
        self.conv1 = Conv2d(1, c1, (1, 3), rng, stride=1)
        self.conv2 = Conv2d(c1, c2, (1, 3), rng, stride=(1, 2))
        self.flat_dim = c2 * self.conv_out_width(cfg.rays)
        self.fc = Linear(self.flat_dim, cfg.hidden, rng)
        self.proj = Linear(cfg.hidden, cfg.channels * cfg.height * cfg.width, rng)

    @staticmethod
    def conv_out_width(rays: int) -> int:
        return ((rays - 2) - 3) // 2 + 1

    def __call__(self, depth: Tensor) -> Tensor:
        cfg = self.cfg
        if depth.values.ndim != 2 or depth.shape[1] != cfg.rays:
            raise ContractViolation(f"visual_encode: expected (N, {cfg.rays}) depth, got {depth.shape}")
        n = depth.shape[0]
        x = ad.reshape(depth, (n, 1, 1, cfg.rays))
        x = ad.relu(self.conv1(x))
        x = ad.relu(self.conv2(x))
        x = ad.relu(self.fc(ad.reshape(x, (n, self.flat_dim))))
        x = ad.relu(self.proj(x))
        return ad.reshape(x, (n, cfg.channels, cfg.height, cfg.width))


@dataclass
class AudioEncoderConfig:
    bands: int = 8
    channels: int = 16
    map_size: int = 2
    embed_dim: int = 32
    # intensities are compressed as log(1 + a / floor) before the first layer
    log_floor: float = 0.01


class AudioEncoder(Module):
    """2 x B band intensities -> (C x 2 x 2 feature map, pooled embedding)."""

    def __init__(self, cfg: AudioEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.fc = Linear(2 * cfg.bands, cfg.channels * cfg.map_size**2, rng)
        self.pool_proj = Linear(cfg.channels, cfg.embed_dim, rng)

    def __call__(self, audio: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        if audio.values.ndim != 3 or audio.shape[1:] != (2, cfg.bands):
            raise ContractViolation(f"audio_encode: expected (N, 2, {cfg.bands}), got {audio.shape}")
        if np.any(audio.values < 0):
            raise ContractViolation("audio_encode: negative band intensity")
        n = audio.shape[0]
        compressed = Tensor(np.log1p(audio.values / cfg.log_floor))
        x = ad.relu(self.fc(ad.reshape(compressed, (n, 2 * cfg.bands))))
        fmap = ad.reshape(x, (n, cfg.channels, cfg.map_size, cfg.map_size))
        return fmap, self.pool_proj(ad.mean_pool_spatial(fmap))


# ---------------------------------------------------------------- parameter accounting


def count_parameters(model: Module) -> dict[str, int]:
    """Trainable scalar counts per top-level submodule plus ``total``."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        counts[top] = counts.get(top, 0) + p.size
    counts["total"] = sum(v for k, v in counts.items())
    return counts


def linear_count(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def conv_count(c_in: int, c_out: int, kh: int, kw: int) -> int:
    return c_in * c_out * kh * kw + c_out


def gru_count(n_in: int, hidden: int) -> int:
    return 3 * hidden * (n_in + hidden) + 6 * hidden


def lstm_count(n_in: int, hidden: int) -> int:
    return 4 * hidden * (n_in + hidden) + 4 * hidden


def visual_encoder_count(cfg: VisualEncoderConfig) -> int:
    c1, c2 = cfg.conv_channels
    flat = c2 * VisualEncoder.conv_out_width(cfg.rays)
    return (
        conv_count(1, c1, 1, 3)
        + conv_count(c1, c2, 1, 3)
        + linear_count(flat, cfg.hidden)
        + linear_count(cfg.hidden, cfg.channels * cfg.height * cfg.width)
    )


def audio_encoder_count(cfg: AudioEncoderConfig) -> int:
    return linear_count(2 * cfg.bands, cfg.channels * cfg.map_size**2) + linear_count(cfg.channels, cfg.embed_dim)
