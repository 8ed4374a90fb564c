"""Domain classifier, gradient reversal and the adversarial domain loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from mpda.feature_core import FeatureMap


@dataclass(frozen=True)
class GrlSetting:
    lambda_: float = 1.0

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError(f"reversal strength must be >= 0, got {self.lambda_}")


def linear_warmup(step: int, warmup_steps: int, final: float = 1.0) -> GrlSetting:
    """Ramp the reversal strength linearly from 0 to ``final`` over ``warmup_steps``."""
    if warmup_steps <= 0:
        return GrlSetting(final)
    return GrlSetting(final * min(1.0, step / warmup_steps))


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambda_):
        ctx.lambda_ = lambda_
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * -ctx.lambda_, None


def grl(x: torch.Tensor, setting: GrlSetting = GrlSetting()) -> torch.Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-lambda``."""
    return _GradReverse.apply(x, float(setting.lambda_))


class DomainClassifier(nn.Module):
    """Two 3x3 convolutions, spatially mean-pooled to one logit per map."""

    def __init__(self, channels: int):
        super().__init__()
        hidden = max(1, channels // 2)
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.channels:
            raise ValueError(f"classifier expects {self.channels} channels, got {x.shape[-1]}")
        y = self.conv2(F.leaky_relu(self.conv1(x.permute(0, 3, 1, 2)), 0.2))
        return y.mean(dim=(1, 2, 3))

    def zero_(self) -> "DomainClassifier":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def classify_domain(fm: FeatureMap, clf: DomainClassifier) -> torch.Tensor:
    """Per-agent logits; ``sigmoid(logit)`` is the probability of the target domain."""
    return clf(fm.data)


def domain_loss(logits_s: torch.Tensor, logits_t: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy, source labelled 0 and target 1.

    Each domain's slices are averaged separately and the two means averaged, so a
    single ego slice weighs as much as N collaborator slices. An empty group is skipped.
    """
    terms = []
    if logits_s.numel():
        terms.append(F.binary_cross_entropy_with_logits(logits_s, torch.zeros_like(logits_s)))
    if logits_t.numel():
        terms.append(F.binary_cross_entropy_with_logits(logits_t, torch.ones_like(logits_t)))
    if not terms:
        raise ValueError("domain_loss needs at least one logit")
    return torch.stack(terms).mean()


def domain_accuracy(logits_s: torch.Tensor, logits_t: torch.Tensor) -> float:
    correct = (logits_s < 0).sum() + (logits_t > 0).sum()
    return float(correct) / max(1, logits_s.numel() + logits_t.numel())
