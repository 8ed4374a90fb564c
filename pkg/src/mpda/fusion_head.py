"""Agent-axis attention fusion, a toy BEV detection head, detection losses and AP@IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from mpda.fax_attention import FaxConfig, MultiHeadAttention
from mpda.feature_core import FeatureMap

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


class FusionModel(nn.Module):
    """Per pixel, the ego feature attends over the stacked ego + collaborator features."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.channels = channels
        self.attn = MultiHeadAttention(channels, FaxConfig(heads=heads, head_dim=channels // heads))

    def forward(self, f_s: torch.Tensor, f_t: torch.Tensor | None = None) -> torch.Tensor:
        if f_s.shape[0] != 1:
            raise ValueError(f"ego map must have one agent, got {f_s.shape[0]}")
        if f_t is not None and f_t.shape[0] and f_t.shape[1:] != f_s.shape[1:]:
            raise ValueError(f"collaborator {tuple(f_t.shape)} and ego {tuple(f_s.shape)} maps differ in [H,W,C]")
        stack = f_s if f_t is None or not f_t.shape[0] else torch.cat([f_s, f_t], dim=0)
        _, h, w, c = f_s.shape
        q = f_s.reshape(h * w, 1, c)
        kv = stack.permute(1, 2, 0, 3).reshape(h * w, stack.shape[0], c)
        return f_s + self.attn(q, kv, kv).reshape(1, h, w, c)


def fuse(f_s: FeatureMap, f_t2: FeatureMap | None, m: FusionModel) -> FeatureMap:
    out = m(f_s.data, None if f_t2 is None else f_t2.data)
    return FeatureMap(out, f_s.domain_id, f_s.agent_ids)


class DetectionHead(nn.Module):
    """1x1 convolution to (objectness logit, dcx, dcy, log w, log h) per cell."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Linear(channels, 5)
        with torch.no_grad():
            # start from a low objectness prior so the focal loss is not swamped by negatives
            self.conv.bias[0] = -math.log(99.0)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.conv(v)


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float
    score: float = 1.0


class BoxSet:
    """Axis-aligned boxes as an ``[K, 5]`` array of (cx, cy, w, h, score) in map-cell units."""

    def __init__(self, boxes: Iterable[Box] | np.ndarray | None = None):
        if boxes is None:
            arr = np.zeros((0, 5))
        elif isinstance(boxes, np.ndarray):
            arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
        else:
            arr = np.array([[b.cx, b.cy, b.w, b.h, b.score] for b in boxes], dtype=np.float64).reshape(-1, 5)
        if len(arr) and (np.any(arr[:, 2:4] <= 0) or np.any((arr[:, 4] < 0) | (arr[:, 4] > 1))):
            raise ValueError("boxes need positive sizes and scores in [0, 1]")
        self.array = arr

    def __len__(self) -> int:
        return len(self.array)

    def __iter__(self):
        return (Box(*map(float, row)) for row in self.array)

    def __getitem__(self, i) -> Box:
        return Box(*map(float, self.array[i]))

    def __repr__(self) -> str:
        return f"BoxSet({len(self)} boxes)"

    @property
    def scores(self) -> np.ndarray:
        return self.array[:, 4]


def _corners(arr: np.ndarray) -> tuple[np.ndarray, ...]:
    cx, cy, w, h = arr[..., 0], arr[..., 1], arr[..., 2], arr[..., 3]
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``[K,>=4]`` and ``[M,>=4]`` center-format boxes."""
    ax0, ay0, ax1, ay1 = _corners(np.asarray(a)[:, None, :])
    bx0, by0, bx1, by1 = _corners(np.asarray(b)[None, :, :])
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None)
    inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    return inter / (area_a + area_b - inter)


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(np.array([[a.cx, a.cy, a.w, a.h]]), np.array([[b.cx, b.cy, b.w, b.h]]))[0, 0])


def nms(boxes: BoxSet, iou_thr: float) -> BoxSet:
    """Greedy non-maximum suppression; keeps the higher score of any pair above ``iou_thr``."""
    arr = boxes.array
    order = np.argsort(-arr[:, 4], kind="stable")
    keep: list[int] = []
    ious = iou_matrix(arr, arr)
    for i in order:
        if all(ious[i, j] <= iou_thr for j in keep):
            keep.append(i)
    return BoxSet(arr[keep])


def decode(head_out: torch.Tensor) -> np.ndarray:
    """Per-cell boxes ``[H*W, 5]`` from a single ``[H, W, 5]`` head output."""
    out = head_out.detach().to(torch.float64).cpu()
    h, w, _ = out.shape
    ys, xs = torch.meshgrid(torch.arange(h, dtype=out.dtype), torch.arange(w, dtype=out.dtype), indexing="ij")
    cx = xs + torch.sigmoid(out[..., 1])
    cy = ys + torch.sigmoid(out[..., 2])
    bw = torch.exp(out[..., 3])
    bh = torch.exp(out[..., 4])
    score = torch.sigmoid(out[..., 0])
    return torch.stack([cx, cy, bw, bh, score], dim=-1).reshape(-1, 5).numpy()


def detect(v: FeatureMap, head: DetectionHead, score_thr: float = 0.3, nms_iou: float = 0.5) -> BoxSet:
    with torch.no_grad():
        out = head(v.data)[0]
    return detections_from_output(out, score_thr, nms_iou)


def detections_from_output(head_out: torch.Tensor, score_thr: float = 0.3, nms_iou: float = 0.5) -> BoxSet:
    cells = decode(head_out)
    cells = cells[cells[:, 4] > score_thr]
    cells = cells[np.isfinite(cells).all(axis=1) & (cells[:, 2] > 0) & (cells[:, 3] > 0)]
    return nms(BoxSet(cells), nms_iou)


@dataclass
class DenseTargets:
    objectness: torch.Tensor  # [H, W] in {0, 1}
    regression: torch.Tensor  # [H, W, 4]: sub-cell x, sub-cell y, log w, log h
    positive: torch.Tensor  # [H, W] bool


def rasterize_targets(gts: BoxSet, h: int, w: int, dtype=torch.float32) -> DenseTargets:
    """Mark the cell holding each box center as positive; the first box wins a shared cell."""
    obj = torch.zeros(h, w, dtype=dtype)
    reg = torch.zeros(h, w, 4, dtype=dtype)
    for b in gts:
        j, i = int(math.floor(b.cx)), int(math.floor(b.cy))
        if not (0 <= i < h and 0 <= j < w) or obj[i, j]:
            continue
        obj[i, j] = 1
        reg[i, j] = torch.tensor([b.cx - j, b.cy - i, math.log(b.w), math.log(b.h)], dtype=dtype)
    return DenseTargets(obj, reg, obj > 0)


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """Elementwise sigmoid focal loss."""
    log_p = F.logsigmoid(logits)
    log_1mp = F.logsigmoid(-logits)
    log_pt = targets * log_p + (1 - targets) * log_1mp
    pt = log_pt.exp()
    alpha_t = targets * alpha + (1 - targets) * (1 - alpha)
    return -alpha_t * (1 - pt) ** gamma * log_pt


def smooth_l1(d: torch.Tensor) -> torch.Tensor:
    ad = d.abs()
    return torch.where(ad < 1, 0.5 * d * d, ad - 0.5)


def detection_loss(head_out: torch.Tensor, targets: BoxSet | DenseTargets) -> tuple[torch.Tensor, dict[str, float]]:
    """Focal objectness averaged over all cells plus smooth-L1 regression averaged over positive cells.

    ``head_out`` is ``[H, W, 5]`` (or ``[1, H, W, 5]``). Regression compares
    sigmoid(dcx), sigmoid(dcy), log w, log h against the sub-cell center and log size.
    """
    if head_out.dim() == 4:
        head_out = head_out[0]
    h, w, _ = head_out.shape
    if isinstance(targets, BoxSet):
        targets = rasterize_targets(targets, h, w, head_out.dtype)
    cls = focal_loss(head_out[..., 0], targets.objectness.to(head_out.dtype)).mean()
    n_pos = int(targets.positive.sum())
    if n_pos:
        pos = head_out[targets.positive]
        pred = torch.cat([torch.sigmoid(pos[:, 1:3]), pos[:, 3:5]], dim=1)
        reg = smooth_l1(pred - targets.regression[targets.positive].to(head_out.dtype)).sum() / n_pos
    else:
        reg = head_out.new_zeros(())
    total = cls + reg
    return total, {"focal": float(cls.detach()), "smooth_l1": float(reg.detach()), "num_pos": n_pos}


def average_precision(dets: BoxSet, gts: BoxSet, iou_thr: float) -> float:
    return pooled_average_precision([(dets, gts)], iou_thr)


def match_detections(dets: BoxSet, gts: BoxSet, iou_thr: float) -> np.ndarray:
    """True-positive flags for ``dets`` in descending score order.

    Each detection takes the unmatched ground truth with the highest IoU, if that IoU
    reaches ``iou_thr``.
    """
    order = np.argsort(-dets.scores, kind="stable")
    tp = np.zeros(len(dets), dtype=bool)
    if not len(gts) or not len(dets):
        return tp
    ious = iou_matrix(dets.array[order], gts.array)
    taken = np.zeros(len(gts), dtype=bool)
    for r in range(len(order)):
        cand = np.where(taken, -1.0, ious[r])
        g = int(np.argmax(cand))
        if cand[g] >= iou_thr:
            taken[g] = True
            tp[r] = True
    return tp


def pooled_average_precision(pairs: Sequence[tuple[BoxSet, BoxSet]], iou_thr: float) -> float:
    """AP over several scenes: match within each scene, rank all detections by score globally.

    AP is the area under the step precision-recall curve, summing precision times the
    recall increment at every true positive.
    """
    scores, flags = [], []
    num_gt = 0
    for dets, gts in pairs:
        num_gt += len(gts)
        order = np.argsort(-dets.scores, kind="stable")
        scores.append(dets.scores[order])
        flags.append(match_detections(dets, gts, iou_thr))
    if num_gt == 0:
        return 0.0
    if not scores or not sum(len(s) for s in scores):
        return 0.0
    scores_all = np.concatenate(scores)
    flags_all = np.concatenate(flags)
    order = np.argsort(-scores_all, kind="stable")
    tp = flags_all[order].astype(np.float64)
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    return float(np.sum(precision * tp) / num_gt)
