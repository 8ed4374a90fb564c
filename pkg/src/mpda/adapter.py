"""Learnable feature resizer and sparse cross-domain transformer.

Together they map a collaborator's features ``[N, H_T, W_T, C_T]`` into the ego
feature space ``[N, H_S, W_S, C_S]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from mpda.fax_attention import FaxBlock, FaxConfig
from mpda.feature_core import FeatureMap, resize_tensor


@dataclass(frozen=True)
class ResizerConfig:
    target_h: int
    target_w: int
    target_c: int
    n_repeats: int = 4
    r_blocks: int = 2
    fax_cfg: FaxConfig = field(default_factory=FaxConfig)
    rng_seed: int = 0
    ffn_expansion: int = 2

    def __post_init__(self):
        if min(self.target_h, self.target_w, self.target_c) < 1:
            raise ValueError("target dims must be positive")
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be >= 1")
        if self.r_blocks < 0:
            raise ValueError("r_blocks must be >= 0")

    @property
    def c_in(self) -> int:
        return 2 * self.target_c


class ChannelAligner(nn.Module):
    """1x1 convolution from ``2*C_S`` to ``C_S`` channels with random drop/pad of the input.

    Too many input channels: ``n_repeats`` random subsets of size ``2*C_S`` are each
    convolved and the results averaged. Too few: random input channels (with
    replacement) are appended until there are ``2*C_S``.
    """

    def __init__(self, target_c: int, n_repeats: int = 4, seed: int = 0):
        super().__init__()
        self.target_c = target_c
        self.c_in = 2 * target_c
        self.n_repeats = n_repeats
        self.conv = nn.Linear(self.c_in, target_c)
        self.reseed(seed)
        self.last_plan: list[np.ndarray] = []

    def reseed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def plan(self, c_t: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
        """Channel index lists, one per convolution pass."""
        rng = self.rng if rng is None else rng
        if c_t == self.c_in:
            return [np.arange(c_t)]
        if c_t > self.c_in:
            return [np.sort(rng.choice(c_t, self.c_in, replace=False)) for _ in range(self.n_repeats)]
        pad = rng.integers(0, c_t, size=self.c_in - c_t)
        return [np.concatenate([np.arange(c_t), pad])]

    def single_pass(self, x: torch.Tensor, idx: np.ndarray) -> torch.Tensor:
        return self.conv(x[..., torch.as_tensor(idx, dtype=torch.long)])

    def forward(self, x: torch.Tensor, plan: list[np.ndarray] | None = None) -> torch.Tensor:
        if plan is None:
            plan = self.plan(x.shape[-1])
        self.last_plan = plan
        if len(plan) == 1:
            return self.single_pass(x, plan[0])
        return torch.stack([self.single_pass(x, idx) for idx in plan]).mean(dim=0)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # NCHW
        return x + self.conv2(F.gelu(self.conv1(x)))


class LearnableResizer(nn.Module):
    """Channel aligner -> FAX -> bilinear resize, plus a bilinear skip, then res-blocks."""

    def __init__(self, cfg: ResizerConfig):
        super().__init__()
        self.cfg = cfg
        self.aligner = ChannelAligner(cfg.target_c, cfg.n_repeats, cfg.rng_seed)
        self.fax = FaxBlock(cfg.target_c, cfg.fax_cfg)
        self.res_blocks = nn.ModuleList(ResBlock(cfg.target_c) for _ in range(cfg.r_blocks))

    def forward(self, x: torch.Tensor, plan: list[np.ndarray] | None = None) -> torch.Tensor:
        h, w = self.cfg.target_h, self.cfg.target_w
        aligned = self.aligner(x, plan)
        # the skip path carries the identity, so the main path resizes only the attention update
        main = resize_tensor(self.fax.update(aligned), h, w)
        y = main + resize_tensor(aligned, h, w)
        if not len(self.res_blocks):
            return y
        y = y.permute(0, 3, 1, 2)
        for block in self.res_blocks:
            y = block(y)
        return y.permute(0, 2, 3, 1)

    def zero_branches(self) -> None:
        """Zero the FAX outputs and each res-block's second convolution."""
        self.fax.zero_output()
        with torch.no_grad():
            for block in self.res_blocks:
                block.conv2.weight.zero_()
                block.conv2.bias.zero_()


class CrossDomainTransformer(nn.Module):
    """Collaborator queries attend to ego keys/values through a FAX block, then an FFN.

    Both residual branches start at zero and ``W_Q`` at identity, so a freshly built
    block is an exact identity on its first input.
    """

    def __init__(self, channels: int, fax_cfg: FaxConfig = FaxConfig(), ffn_expansion: int = 2):
        super().__init__()
        self.w_q = nn.Linear(channels, channels)
        self.w_k = nn.Linear(channels, channels)
        self.w_v = nn.Linear(channels, channels)
        self.fax = FaxBlock(channels, fax_cfg)
        self.norm_attn = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, ffn_expansion * channels),
            nn.GELU(),
            nn.Linear(ffn_expansion * channels, channels),
        )
        self.norm_ffn = nn.LayerNorm(channels)
        self.identity_init()

    def identity_init(self) -> None:
        with torch.no_grad():
            nn.init.eye_(self.w_q.weight)
            self.w_q.bias.zero_()
            self.ffn[2].weight.zero_()
            self.ffn[2].bias.zero_()
            self.norm_attn.bias.zero_()
            self.norm_ffn.bias.zero_()
        self.fax.zero_output()

    def forward(self, f_t: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
        if f_t.shape[1:] != f_s.shape[1:]:
            raise ValueError(f"collaborator {tuple(f_t.shape)} and ego {tuple(f_s.shape)} maps differ in [H,W,C]")
        q = self.w_q(f_t)
        k = self.w_k(f_s)
        v = self.w_v(f_s)
        f_hat = q + self.norm_attn(self.fax.update(q, k, v))
        return f_hat + self.norm_ffn(self.ffn(f_hat))


class AdapterPipeline(nn.Module):
    """Resizer followed by the cross-domain transformer."""

    def __init__(self, cfg: ResizerConfig):
        super().__init__()
        self.cfg = cfg
        self.resizer = LearnableResizer(cfg)
        self.transformer = CrossDomainTransformer(cfg.target_c, cfg.fax_cfg, cfg.ffn_expansion)

    def reseed(self, seed: int) -> None:
        self.resizer.aligner.reseed(seed)

    def forward(self, f_t: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
        return self.transformer(self.resizer(f_t), f_s)


def channel_align(f_t: FeatureMap, aligner: ChannelAligner) -> FeatureMap:
    return f_t.with_data(aligner(f_t.data))


def resize_features(f_t: FeatureMap, resizer: LearnableResizer) -> FeatureMap:
    return f_t.with_data(resizer(f_t.data))


def cross_domain_transform(f_t_prime: FeatureMap, f_s: FeatureMap, transformer: CrossDomainTransformer) -> FeatureMap:
    if f_s.agents != 1:
        raise ValueError(f"ego map must have one agent, got {f_s.agents}")
    return f_t_prime.with_data(transformer(f_t_prime.data, f_s.data))


def adapt(f_t: FeatureMap, f_s: FeatureMap, pipeline: AdapterPipeline) -> FeatureMap:
    return cross_domain_transform(resize_features(f_t, pipeline.resizer), f_s, pipeline.transformer)
