"""Fused axial attention: window/grid token partitions and the two-sublayer FAX block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class FaxConfig:
    window_p: int = 4
    grid_g: int = 4
    heads: int = 4
    head_dim: int = 8

    def __post_init__(self):
        for name in ("window_p", "grid_g", "heads", "head_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    def check(self, h: int, w: int) -> None:
        if h % self.window_p or w % self.window_p:
            raise DimensionError(f"{h}x{w} map not divisible by window size {self.window_p}")
        if h % self.grid_g or w % self.grid_g:
            raise DimensionError(f"{h}x{w} map not divisible by grid count {self.grid_g}")


@dataclass(frozen=True)
class PartitionMeta:
    """What is needed to undo a partition."""

    kind: str  # "window" or "grid"
    agents: int
    height: int
    width: int
    size: int  # p for window, g for grid


def window_partition(t: torch.Tensor, p: int) -> tuple[torch.Tensor, PartitionMeta]:
    """Split ``[A,H,W,D]`` into non-overlapping ``p x p`` windows -> ``[A*(H/p)*(W/p), p*p, D]``."""
    a, h, w, d = t.shape
    if h % p or w % p:
        raise DimensionError(f"window size {p} does not divide {h}x{w}")
    x = t.reshape(a, h // p, p, w // p, p, d).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(a * (h // p) * (w // p), p * p, d), PartitionMeta("window", a, h, w, p)


def window_unpartition(groups: torch.Tensor, meta: PartitionMeta) -> torch.Tensor:
    a, h, w, p = meta.agents, meta.height, meta.width, meta.size
    d = groups.shape[-1]
    x = groups.reshape(a, h // p, w // p, p, p, d).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(a, h, w, d)


def grid_partition(t: torch.Tensor, g: int) -> tuple[torch.Tensor, PartitionMeta]:
    """Split ``[A,H,W,D]`` into ``(H/g)*(W/g)`` strided groups of ``g*g`` tokens each.

    Token ``(i, j)`` joins group ``(i mod H/g, j mod W/g)``, so every group spans the whole map.
    """
    a, h, w, d = t.shape
    if h % g or w % g:
        raise DimensionError(f"grid count {g} does not divide {h}x{w}")
    hh, ww = h // g, w // g
    x = t.reshape(a, g, hh, g, ww, d).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(a * hh * ww, g * g, d), PartitionMeta("grid", a, h, w, g)


def grid_unpartition(groups: torch.Tensor, meta: PartitionMeta) -> torch.Tensor:
    a, h, w, g = meta.agents, meta.height, meta.width, meta.size
    hh, ww = h // g, w // g
    d = groups.shape[-1]
    x = groups.reshape(a, hh, ww, g, g, d).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(a, h, w, d)


_PARTITIONS = {
    "window": (window_partition, window_unpartition),
    "grid": (grid_partition, grid_unpartition),
}


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over token groups ``[G, T, D]``."""

    def __init__(self, dim: int, cfg: FaxConfig):
        super().__init__()
        self.cfg = cfg
        self.q_proj = nn.Linear(dim, cfg.model_dim)
        self.k_proj = nn.Linear(dim, cfg.model_dim)
        self.v_proj = nn.Linear(dim, cfg.model_dim)
        self.out_proj = nn.Linear(cfg.model_dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        g, t, _ = x.shape
        return x.reshape(g, t, self.cfg.heads, self.cfg.head_dim).transpose(1, 2)

    def weights(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        """Attention weights ``[G, heads, Tq, Tk]``."""
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.cfg.head_dim)
        return scores.softmax(dim=-1)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, return_weights: bool = False):
        if q.dim() != 3 or k.dim() != 3 or v.dim() != 3:
            raise DimensionError("attention inputs must be [groups, tokens, dim]")
        if not (q.shape[0] == k.shape[0] == v.shape[0]):
            raise DimensionError(f"group counts differ: {q.shape[0]}, {k.shape[0]}, {v.shape[0]}")
        if k.shape[1] != v.shape[1]:
            raise DimensionError(f"keys ({k.shape[1]}) and values ({v.shape[1]}) differ in token count")
        attn = self.weights(q, k)
        out = attn @ self._split(self.v_proj(v))
        g, _, tq, _ = out.shape
        out = self.out_proj(out.transpose(1, 2).reshape(g, tq, self.cfg.model_dim))
        return (out, attn) if return_weights else out


def multi_head_attention(q_tokens, k_tokens, v_tokens, params: MultiHeadAttention) -> torch.Tensor:
    return params(q_tokens, k_tokens, v_tokens)


def _broadcast_agents(x: torch.Tensor, agents: int) -> torch.Tensor:
    if x.shape[0] == agents:
        return x
    if x.shape[0] == 1:
        return x.expand(agents, *x.shape[1:])
    raise DimensionError(f"cannot broadcast {x.shape[0]} key/value agents to {agents} query agents")


class FaxSublayer(nn.Module):
    """Pre-norm cross attention inside one partition scheme; returns the residual update."""

    def __init__(self, dim: int, cfg: FaxConfig, kind: str):
        super().__init__()
        self.kind = kind
        self.size = cfg.window_p if kind == "window" else cfg.grid_g
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, cfg)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        part, unpart = _PARTITIONS[self.kind]
        qg, meta = part(self.norm_q(q), self.size)
        kg, _ = part(self.norm_kv(k), self.size)
        vg = kg if v is k else part(self.norm_kv(v), self.size)[0]
        return unpart(self.attn(qg, kg, vg), meta)


class FaxBlock(nn.Module):
    """Window-attention sublayer followed by grid-attention sublayer, each with a residual.

    Queries come from ``q``; keys from ``k`` and values from ``v`` (``v`` defaults to
    ``k``). Key/value maps with a single agent are broadcast over the query agents.
    """

    def __init__(self, dim: int, cfg: FaxConfig = FaxConfig()):
        super().__init__()
        self.cfg = cfg
        self.window = FaxSublayer(dim, cfg, "window")
        self.grid = FaxSublayer(dim, cfg, "grid")

    def _prepare(self, q, k, v):
        if v is None:
            v = k
        if q.dim() != 4 or k.shape[1:] != q.shape[1:] or v.shape[1:] != q.shape[1:]:
            raise DimensionError(
                f"query {tuple(q.shape)} and key/value {tuple(k.shape)}/{tuple(v.shape)} must share [H,W,D]"
            )
        self.cfg.check(q.shape[1], q.shape[2])
        same = v is k
        k = _broadcast_agents(k, q.shape[0])
        v = k if same else _broadcast_agents(v, q.shape[0])
        return k, v

    def _run(self, q, k, v):
        k, v = self._prepare(q, k, v)
        a1 = self.window(q, k, v)
        z1 = q + a1
        a2 = self.grid(z1, k, v)
        return z1 + a2, a1 + a2

    def forward(self, q: torch.Tensor, k: torch.Tensor | None = None, v: torch.Tensor | None = None) -> torch.Tensor:
        return self._run(q, q if k is None else k, v)[0]

    def update(self, q: torch.Tensor, k: torch.Tensor | None = None, v: torch.Tensor | None = None) -> torch.Tensor:
        """The summed residual increments of both sublayers, without ``q`` itself."""
        return self._run(q, q if k is None else k, v)[1]

    def zero_output(self) -> None:
        """Zero both output projections so the block reduces to its residual path."""
        with torch.no_grad():
            for sub in (self.window, self.grid):
                sub.attn.out_proj.weight.zero_()
                sub.attn.out_proj.bias.zero_()


def fax_block(q_map: torch.Tensor, kv_map: torch.Tensor, params: FaxBlock) -> torch.Tensor:
    return params(q_map, kv_map)
