"""Central finite-difference checks of every learnable operation, in float64."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from mpda.adapter import ChannelAligner, CrossDomainTransformer, LearnableResizer, ResizerConfig
from mpda.adversary import DomainClassifier, GrlSetting, domain_loss, grl
from mpda.fax_attention import FaxBlock, FaxConfig
from mpda.feature_core import resize_tensor
from mpda.fusion_head import BoxSet, DetectionHead, FusionModel, detection_loss, focal_loss, smooth_l1

FD_STEP = 1e-6
TOL = 1e-3
GRL_TOL = 1e-4


def central_difference(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], h: float = FD_STEP):
    """Numerical gradient of the scalar ``fn()`` with respect to each tensor, perturbing in place."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = float(fn())
                flat[i] = orig - h
                minus = float(fn())
                flat[i] = orig
                gflat[i] = (plus - minus) / (2 * h)
            grads.append(g)
    return grads


def analytic_gradient(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor]):
    out = fn()
    grads = torch.autograd.grad(out, list(tensors), allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()))
    if denom == 0.0:
        return 0.0
    return float((a - b).norm()) / denom


@dataclass
class GradCheck:
    name: str
    rel_err: float
    tol: float
    n_values: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.rel_err <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} rel_err={self.rel_err:.3e} tol={self.tol:.0e} n={self.n_values}"


def check(name: str, fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], tol: float = TOL) -> GradCheck:
    t0 = time.perf_counter()
    tensors = list(tensors)
    analytic = analytic_gradient(fn, tensors)
    numeric = central_difference(fn, tensors)
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    return GradCheck(name, relative_error(a, n), tol, a.numel(), time.perf_counter() - t0)


def _randomize(module: nn.Module, gen: torch.Generator, scale: float = 0.5) -> nn.Module:
    module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * scale)
    return module


def _leaf(gen: torch.Generator, *shape, scale: float = 1.0) -> torch.Tensor:
    return (torch.randn(*shape, generator=gen, dtype=torch.float64) * scale).requires_grad_(True)


def _projector(gen: torch.Generator, like: torch.Tensor) -> Callable[[torch.Tensor], torch.Tensor]:
    w = torch.randn(like.shape, generator=gen, dtype=torch.float64)
    return lambda out: (out * w).sum()


def _module_check(name, module, inputs, forward, gen, tol=TOL) -> GradCheck:
    with torch.no_grad():
        proj = _projector(gen, forward())
    return check(name, lambda: proj(forward()), [*inputs, *module.parameters()], tol)


def run_suite(seed: int = 0) -> list[GradCheck]:
    """Every check on instances no larger than 2 agents, 8x8 maps, 8 channels."""
    g = torch.Generator().manual_seed(seed)
    results = []

    x = _leaf(g, 2, 4, 6, 3)
    proj = _projector(g, torch.zeros(2, 8, 8, 3))
    results.append(check("bilinear_resize", lambda: proj(resize_tensor(x, 8, 8)), [x]))

    fcfg = FaxConfig(window_p=4, grid_g=2, heads=2, head_dim=4)
    fax = _randomize(FaxBlock(8, fcfg), g)
    with torch.no_grad():
        for mod in fax.modules():
            if isinstance(mod, nn.LayerNorm):
                mod.weight.add_(1.0)
    q, kv = _leaf(g, 2, 8, 8, 8), _leaf(g, 1, 8, 8, 8)
    results.append(_module_check("fax_block", fax, [q, kv], lambda: fax(q, kv), g))

    aligner = _randomize(ChannelAligner(4, n_repeats=3, seed=seed), g)
    xt = _leaf(g, 2, 8, 8, 10)
    plan = aligner.plan(10)
    results.append(_module_check("channel_aligner(drop)", aligner, [xt], lambda: aligner(xt, plan), g))
    xp = _leaf(g, 2, 8, 8, 5)
    plan_p = aligner.plan(5)
    results.append(_module_check("channel_aligner(pad)", aligner, [xp], lambda: aligner(xp, plan_p), g))

    rcfg = ResizerConfig(8, 8, 4, n_repeats=2, r_blocks=1, fax_cfg=FaxConfig(2, 2, 2, 2), rng_seed=seed)
    resizer = _randomize(LearnableResizer(rcfg), g, scale=0.3)
    with torch.no_grad():
        for mod in resizer.modules():
            if isinstance(mod, nn.LayerNorm):
                mod.weight.add_(1.0)
    xr = _leaf(g, 2, 4, 4, 10)
    plan_r = resizer.aligner.plan(10)
    results.append(_module_check("learnable_resizer", resizer, [xr], lambda: resizer(xr, plan_r), g))

    cdt = _randomize(CrossDomainTransformer(4, FaxConfig(4, 2, 2, 2)), g, scale=0.3)
    with torch.no_grad():
        for mod in cdt.modules():
            if isinstance(mod, nn.LayerNorm):
                mod.weight.add_(1.0)
    ft, fs = _leaf(g, 2, 8, 8, 4), _leaf(g, 1, 8, 8, 4)
    results.append(_module_check("cross_domain_transformer", cdt, [ft, fs], lambda: cdt(ft, fs), g))

    clf = _randomize(DomainClassifier(8), g)
    xc = _leaf(g, 2, 8, 8, 8)
    results.append(_module_check("domain_classifier", clf, [xc], lambda: clf(xc), g))

    fusion = _randomize(FusionModel(8, heads=2), g)
    fs8, ft8 = _leaf(g, 1, 8, 8, 8), _leaf(g, 2, 8, 8, 8)
    results.append(_module_check("fusion", fusion, [fs8, ft8], lambda: fusion(fs8, ft8), g))

    head = _randomize(DetectionHead(8), g)
    v = _leaf(g, 1, 8, 8, 8)
    gts = BoxSet(np.array([[2.3, 3.6, 2.0, 1.5, 1.0], [6.1, 1.2, 3.0, 2.5, 1.0]]))
    results.append(check("detection_head+loss", lambda: detection_loss(head(v), gts)[0], [v, *head.parameters()]))

    logits = _leaf(g, 8, 8)
    targets = (torch.rand(8, 8, generator=g) < 0.2).double()
    results.append(check("focal_loss", lambda: focal_loss(logits, targets).mean(), [logits]))
    d = _leaf(g, 40, scale=1.5)
    results.append(check("smooth_l1", lambda: smooth_l1(d).sum(), [d]))
    ls, lt = _leaf(g, 1), _leaf(g, 2)
    results.append(check("domain_loss", lambda: domain_loss(ls, lt), [ls, lt]))

    results.extend(grl_checks(g))
    return results


def grl_checks(g: torch.Generator) -> list[GradCheck]:
    """Gradient through f(grl(x)) equals -lambda times the finite-difference gradient of f."""
    out = []
    a = torch.randn(6, generator=g, dtype=torch.float64)
    quad = lambda y: ((y - a) ** 2).sum() + 0.5 * (y**2).sum() ** 2 / 10
    for lam in (0.5, 1.0):
        x = _leaf(g, 6)
        t0 = time.perf_counter()
        (analytic,) = analytic_gradient(lambda: quad(grl(x, GrlSetting(lam))), [x])
        (numeric,) = central_difference(lambda: quad(x), [x])
        err = relative_error(analytic, -lam * numeric)
        out.append(GradCheck(f"grl(lambda={lam})", err, GRL_TOL, x.numel(), time.perf_counter() - t0))
    return out


def format_results(results: list[GradCheck]) -> str:
    total = sum(r.seconds for r in results)
    lines = [r.line() for r in results]
    lines.append(f"{sum(r.passed for r in results)}/{len(results)} passed in {total:.1f}s")
    return "\n".join(lines)
