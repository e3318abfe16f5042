"""Audio/descriptor-conditioned channel modulation of visual features, plus the fusion ablations."""

from __future__ import annotations

import enum

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .nets import MLP, Linear, Module, linear_count


class FusionVariant(str, enum.Enum):
    SACF = "sacf"
    NO_SDLD = "no_sdld"
    NO_ACVF = "no_acvf"
    CONCAT = "concat"

    @property
    def uses_sdld(self) -> bool:
        return self in (FusionVariant.SACF, FusionVariant.NO_ACVF)

    @property
    def uses_film(self) -> bool:
        return self in (FusionVariant.SACF, FusionVariant.NO_SDLD)

    @property
    def label(self) -> str:
        return {
            "sacf": "SACF (full)",
            "no_sdld": "w/o SDLD",
            "no_acvf": "w/o ACVF",
            "concat": "w/o SDLD and w/o ACVF",
        }[self.value]


def build_condition(audio_embed: Tensor, g: Tensor | None = None) -> Tensor:
    """[audio; g], audio first.  With ``g`` omitted the condition is the audio embedding alone."""
    if g is None:
        return audio_embed
    if audio_embed.values.ndim != g.values.ndim or audio_embed.shape[:-1] != g.shape[:-1]:
        raise ContractViolation(f"build_condition: {audio_embed.shape} vs {g.shape}")
    return ad.concat([audio_embed, g], axis=-1)


class FiLMGenerator(Module):
    """The parameter network: condition -> (gamma, beta), each of length C.

    The last layer starts at zero so modulation begins as the identity.
    """

    def __init__(self, cond_dim: int, channels: int, rng: np.random.Generator, hidden: int = 64):
        self.cond_dim, self.channels, self.hidden = cond_dim, channels, hidden
        self.mlp = MLP([cond_dim, hidden, 2 * channels], rng, zero_last=True)

    def __call__(self, c: Tensor) -> tuple[Tensor, Tensor]:
        return generate_film(c, self.mlp, self.channels)

    def param_count(self) -> int:
        return linear_count(self.cond_dim, self.hidden) + linear_count(self.hidden, 2 * self.channels)


def generate_film(c: Tensor, psi, channels: int) -> tuple[Tensor, Tensor]:
    out = psi(c)
    if out.shape[-1] != 2 * channels:
        raise ContractViolation(f"generate_film: network emits {out.shape[-1]} values, need {2 * channels}")
    return out[:, :channels], out[:, channels:]


def film_modulate(f_v: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """(1 + gamma[c]) * F[c, h, w] + beta[c]."""
    if gamma.shape[-1] != f_v.shape[1] or beta.shape[-1] != f_v.shape[1]:
        raise ContractViolation(f"film_modulate: {f_v.shape[1]} channels, gamma {gamma.shape}, beta {beta.shape}")
    return ad.affine_channel(f_v, gamma, beta)


def fuse_for_policy(variant: FusionVariant, f_v: Tensor, audio_embed: Tensor, g: Tensor | None,
                    film: FiLMGenerator | None) -> Tensor:
    n = f_v.shape[0]
    if variant.uses_sdld and g is None:
        raise ContractViolation(f"fuse_for_policy: {variant.value} needs a descriptor")
    if variant.uses_film:
        if film is None:
            raise ContractViolation(f"fuse_for_policy: {variant.value} needs a FiLM generator")
        cond = build_condition(audio_embed, g if variant.uses_sdld else None)
        gamma, beta = film(cond)
        f_v = film_modulate(f_v, gamma, beta)
    flat = ad.reshape(f_v, (n, -1))
    parts = [flat, audio_embed] + ([g] if variant.uses_sdld else [])
    return ad.concat(parts, axis=-1)


def policy_input_dim(variant: FusionVariant, channels: int, height: int, width: int, audio_dim: int,
                     descriptor_dim: int) -> int:
    return channels * height * width + audio_dim + (descriptor_dim if variant.uses_sdld else 0)


# ---------------------------------------------------------------- cost model


def film_flops(channels: int, height: int, width: int, cond_dim: int, hidden: int = 64) -> int:
    """Multiply-adds of one modulation: the generator MLP plus a mul and an add per feature element."""
    return cond_dim * hidden + hidden * 2 * channels + 2 * channels * height * width


class SpatialAttentionFusion(Module):
    """Cross-modal spatial attention used only for parameter/FLOP accounting.

    Each of the H*W visual positions is a token (projected to ``dim``, with a
    learned positional embedding and the projected audio embedding added);
    tokens self-attend, pass an FFN, and are projected back to C channels.
    """

    def __init__(self, channels: int, height: int, width: int, audio_dim: int, rng: np.random.Generator,
                 dim: int = 128, ffn_mult: int = 4):
        self.channels, self.height, self.width, self.audio_dim = channels, height, width, audio_dim
        self.dim, self.ffn_mult = dim, ffn_mult
        self.token = Linear(channels, dim, rng)
        self.pos = Tensor(np.zeros((height * width, dim)), requires_grad=True, name="pos")
        self.audio = Linear(audio_dim, dim, rng)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.ffn = MLP([dim, ffn_mult * dim, dim], rng)
        self.back = Linear(dim, channels, rng)

    def param_count(self) -> int:
        return spatial_attention_param_count(self.channels, self.height, self.width, self.audio_dim, self.dim,
                                             self.ffn_mult)


def spatial_attention_param_count(channels: int, height: int, width: int, audio_dim: int, dim: int = 128,
                                  ffn_mult: int = 4) -> int:
    return (
        linear_count(channels, dim)
        + height * width * dim
        + linear_count(audio_dim, dim)
        + 4 * linear_count(dim, dim)
        + linear_count(dim, ffn_mult * dim)
        + linear_count(ffn_mult * dim, dim)
        + linear_count(dim, channels)
    )


def spatial_attention_flops(channels: int, height: int, width: int, audio_dim: int, dim: int = 128,
                            ffn_mult: int = 4) -> int:
    n = height * width
    per_token = channels * dim + 4 * dim * dim + 2 * ffn_mult * dim * dim + dim * channels
    return audio_dim * dim + n * per_token + 2 * n * n * dim
