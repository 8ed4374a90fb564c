"""Synthetic multi-agent scenes and seeded pseudo-backbones.

A scene is a set of axis-aligned boxes on the ego canvas. Every agent sees a random
subset of them. A pseudo-backbone rasterizes the visible boxes at its own
resolution, runs a fixed random convolution stack, and applies a sign (objects
bright or dark). Domains differ in resolution, channel count, kernels and sign.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from mpda.feature_core import FeatureMap
from mpda.fusion_head import BoxSet, iou_matrix

CANVAS = (32, 88)


@dataclass(frozen=True)
class DomainSpec:
    name: str
    spatial: tuple[int, int]
    channels: int
    polarity: int = 1
    kernel_seed: int = 0
    noise_sigma: float = 0.01
    depth: int = 2
    domain_id: int = 0
    hidden: int = 32

    def __post_init__(self):
        if self.polarity not in (1, -1):
            raise ValueError("polarity must be +1 or -1")
        if min(self.spatial) < 1 or self.channels < 1:
            raise ValueError("spatial dims and channels must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.depth < 2:
            raise ValueError("a pseudo-backbone needs at least two layers")


# ego backbone and two collaborator families; *_test domains are never seen in training
DOM_S = DomainSpec("p0", (32, 88), 64, polarity=-1, kernel_seed=1000, domain_id=0)
DOM_T_TRAIN = DomainSpec("p1", (24, 64), 96, polarity=1, kernel_seed=2001, domain_id=1)
DOM_T_TEST = DomainSpec("p2", (16, 56), 128, polarity=1, kernel_seed=3002, domain_id=2)
DOM_S0 = DomainSpec("s0", (24, 88), 128, polarity=1, kernel_seed=4003, depth=3, domain_id=3)
DOM_S1 = DomainSpec("s1", (16, 44), 96, polarity=1, kernel_seed=5004, depth=3, domain_id=4)

DOMAINS = {d.name: d for d in (DOM_S, DOM_T_TRAIN, DOM_T_TEST, DOM_S0, DOM_S1)}


@dataclass(frozen=True)
class Scenario:
    name: str
    ego: DomainSpec
    collab_train: DomainSpec
    collab_test: DomainSpec


SCENARIOS = {
    "normal": Scenario("normal", DOM_S, DOM_S, DOM_S),
    "hetero1": Scenario("hetero1", DOM_S, DOM_T_TRAIN, DOM_T_TEST),
    "hetero2": Scenario("hetero2", DOM_S, DOM_S0, DOM_S1),
}


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None


@dataclass(frozen=True)
class SceneConfig:
    canvas: tuple[int, int] = CANVAS
    min_boxes: int = 2
    max_boxes: int = 8
    box_w: tuple[float, float] = (2.5, 4.5)
    box_h: tuple[float, float] = (1.8, 3.0)
    min_gap: float = 0.5
    p_ego: float = 0.5
    p_collab: float = 0.5
    collaborators: tuple[int, ...] = (1, 2, 3)


@dataclass
class SceneSpec:
    canvas: tuple[int, int]
    boxes: BoxSet
    visibility: np.ndarray  # [1 + N, K] bool, row 0 is the ego agent
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def n_collaborators(self) -> int:
        return self.visibility.shape[0] - 1

    def visible(self, agent: int) -> BoxSet:
        return BoxSet(self.boxes.array[self.visibility[agent]])


def _overlaps(arr: np.ndarray, cand: np.ndarray, gap: float) -> bool:
    if not len(arr):
        return False
    grown = cand.copy()
    grown[2:4] += gap
    return bool((iou_matrix(arr, grown[None]) > 0).any())


def gen_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> SceneSpec:
    rng = np.random.default_rng(seed)
    h, w = cfg.canvas
    k = int(rng.integers(cfg.min_boxes, cfg.max_boxes + 1))
    boxes = np.zeros((0, 5))
    while len(boxes) < k:
        bw = rng.uniform(*cfg.box_w)
        bh = rng.uniform(*cfg.box_h)
        cand = np.array([rng.uniform(bw / 2, w - bw / 2), rng.uniform(bh / 2, h - bh / 2), bw, bh, 1.0])
        if not _overlaps(boxes, cand, cfg.min_gap):
            boxes = np.vstack([boxes, cand])
    n = int(rng.choice(cfg.collaborators))
    vis = np.zeros((1 + n, k), dtype=bool)
    vis[0] = rng.random(k) < cfg.p_ego
    vis[1:] = rng.random((n, k)) < cfg.p_collab
    # objects nobody saw go to a random agent, so ego and collaborators see alike distributions
    for obj in np.flatnonzero(~vis.any(axis=0)):
        vis[rng.integers(1 + n), obj] = True
    return SceneSpec((h, w), BoxSet(boxes), vis, seed)


def rasterize(boxes: BoxSet, canvas: tuple[int, int], spatial: tuple[int, int]) -> np.ndarray:
    """Area coverage of ``boxes`` over each pixel of an ``spatial``-sized grid spanning the canvas.

    Pixel centers follow the align-corners convention used by the bilinear resizer,
    so resizing a domain's map to the canvas grid lines features back up with the boxes.
    """
    ch, cw = canvas
    th, tw = spatial

    def axis(n_canvas, n_target):
        step = (n_canvas - 1) / (n_target - 1) if n_target > 1 else 0.0
        centers = np.arange(n_target) * step + 0.5
        return centers, n_canvas / n_target

    yc, sy = axis(ch, th)
    xc, sx = axis(cw, tw)
    occ = np.zeros((th, tw))
    for b in boxes:
        oy = np.clip(np.minimum(yc + sy / 2, b.cy + b.h / 2) - np.maximum(yc - sy / 2, b.cy - b.h / 2), 0, None)
        ox = np.clip(np.minimum(xc + sx / 2, b.cx + b.w / 2) - np.maximum(xc - sx / 2, b.cx - b.w / 2), 0, None)
        occ += np.outer(oy, ox) / (sx * sy)
    return np.clip(occ, 0.0, 1.0)


@functools.lru_cache(maxsize=None)
def backbone_weights(dom: DomainSpec) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """The fixed (weight, bias) stack of a pseudo-backbone, in float64 NCHW conv layout."""
    rng = np.random.default_rng(dom.kernel_seed)
    r = np.arange(5) - 2.0
    yy, xx = np.meshgrid(r, r, indexing="ij")
    # multi-scale blob bank: each filter a Gaussian of random width, gain and small jitter
    sig = rng.uniform(0.6, 1.8, dom.hidden)
    w1 = np.exp(-(yy**2 + xx**2)[None] / (2 * sig[:, None, None] ** 2))
    w1 = w1 / w1.sum(axis=(1, 2), keepdims=True) * rng.uniform(0.5, 1.5, (dom.hidden, 1, 1)) * 3.0
    w1 = (w1 + 0.1 * rng.standard_normal(w1.shape) * w1.mean())[:, None]
    layers = [(w1, rng.uniform(-0.3, 0.0, dom.hidden))]
    for _ in range(dom.depth - 2):
        wm = np.abs(rng.standard_normal((dom.hidden, dom.hidden, 3, 3))) / (9 * dom.hidden) * 2.0
        layers.append((wm, rng.uniform(-0.05, 0.0, dom.hidden)))
    wl = (np.abs(rng.standard_normal((dom.channels, dom.hidden, 1, 1))) + 0.5 * rng.standard_normal((dom.channels, dom.hidden, 1, 1))) * (2.0 / dom.hidden)
    layers.append((wl, rng.uniform(0.0, 0.05, dom.channels)))
    return [(torch.from_numpy(w), torch.from_numpy(b)) for w, b in layers]


def run_backbone(occ: np.ndarray, dom: DomainSpec) -> np.ndarray:
    """Apply a domain's convolution stack to ``[H, W]`` occupancy; returns ``[H, W, C]``."""
    x = torch.from_numpy(np.asarray(occ, dtype=np.float64))[None, None]
    layers = backbone_weights(dom)
    for i, (w, b) in enumerate(layers):
        x = F.conv2d(x, w, b, padding=w.shape[-1] // 2)
        if i < len(layers) - 1:
            x = F.relu(x)
    return x[0].permute(1, 2, 0).numpy()


def extract_features(scene: SceneSpec, dom: DomainSpec, agent_view: int, dtype=torch.float32) -> FeatureMap:
    """What agent ``agent_view`` of ``scene`` would transmit if it ran backbone ``dom``."""
    occ = rasterize(scene.visible(agent_view), scene.canvas, dom.spatial)
    feat = dom.polarity * run_backbone(occ, dom)
    if dom.noise_sigma > 0:
        rng = np.random.default_rng([scene.seed, agent_view, dom.kernel_seed])
        feat = feat + rng.normal(0.0, dom.noise_sigma, feat.shape)
    data = torch.from_numpy(feat).to(dtype)[None]
    return FeatureMap(data, dom.domain_id, (agent_view,))


def stack_agents(maps: list[FeatureMap]) -> FeatureMap:
    data = torch.cat([m.data for m in maps], dim=0)
    return FeatureMap(data, maps[0].domain_id, tuple(i for m in maps for i in m.agent_ids))


def collaborator_features(scene: SceneSpec, dom: DomainSpec, dtype=torch.float32) -> FeatureMap | None:
    if scene.n_collaborators == 0:
        return None
    return stack_agents([extract_features(scene, dom, a, dtype) for a in range(1, scene.n_collaborators + 1)])


def scene_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)]
