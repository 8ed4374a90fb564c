"""Adversarial training loop, configs and the trained-system container.

``train`` produces three models that share a checkpoint:

* ``single`` - fusion + head trained on the ego map alone (no-fusion baseline);
* ``naive``  - fusion + head trained with same-backbone collaborators, later fed
  naively resized features from foreign backbones;
* ``mpda``   - adapter + fusion + head + domain classifier trained on the
  heterogeneous scenario, starting from the ``naive`` fusion/head weights.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from mpda.adapter import AdapterPipeline, ResizerConfig
from mpda.adversary import DomainClassifier, GrlSetting, domain_accuracy, domain_loss, grl
from mpda.checkpoint import dtype_code_for, load_checkpoint, save_checkpoint
from mpda.fax_attention import FaxConfig
from mpda.fusion_head import DetectionHead, FusionModel, detection_loss, rasterize_targets
from mpda.synth import SceneConfig, SceneSpec, collaborator_features, extract_features, gen_scene, get_scenario, scene_seeds

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    alpha: float = 1.0
    beta: float = 0.1
    lr: float = 1e-3
    lr_decay: float = 0.1
    decay_every: int = 10
    epochs: int = 20
    baseline_epochs: int = 10
    batch: int = 4
    seed: int = 0
    scenario: str = "hetero1"
    train_scenes: int = 64
    precision: str = "f32"
    grl_lambda: float = 1.0
    n_repeats: int = 4
    r_blocks: int = 2
    window_p: int = 4
    grid_g: int = 4
    heads: int = 4
    head_dim: int = 8
    fusion_heads: int = 4

    def __post_init__(self):
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1):
            raise ConfigError("alpha and beta must lie in [0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if min(self.epochs, self.baseline_epochs, self.train_scenes) < 0 or self.batch < 1 or self.decay_every < 1:
            raise ConfigError("epochs/scenes must be >= 0, batch and decay_every >= 1")
        if self.grl_lambda < 0:
            raise ConfigError("grl_lambda must be >= 0")
        get_scenario(self.scenario)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "f64" else torch.float32

    @property
    def fax_cfg(self) -> FaxConfig:
        return FaxConfig(self.window_p, self.grid_g, self.heads, self.head_dim)


def parse_config(text: str) -> TrainingConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    types = {f.name: f.type for f in dataclasses.fields(TrainingConfig)}
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = types[key]
        try:
            values[key] = int(val) if kind == "int" else float(val) if kind == "float" else val
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} expects {kind}, got {val!r}") from None
    return TrainingConfig(**values)


def load_config(path: str | Path) -> TrainingConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: TrainingConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    L: float
    L_det: float
    L_domain: float
    domain_acc: float


@dataclass
class LossReport:
    alpha: float
    beta: float
    steps: list[StepRecord] = field(default_factory=list)
    epoch_domain_acc: list[float] = field(default_factory=list)
    baseline_losses: dict[str, list[float]] = field(default_factory=dict)
    ap: dict[str, float] = field(default_factory=dict)

    def rows(self) -> list[tuple]:
        return [dataclasses.astuple(s) for s in self.steps]

    def to_csv(self) -> str:
        head = ",".join(f.name for f in dataclasses.fields(StepRecord))
        return head + "\n" + "".join(",".join(repr(v) for v in r) + "\n" for r in self.rows())


class Detector(nn.Module):
    """Fusion model followed by the detection head."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.fusion = FusionModel(channels, heads)
        self.head = DetectionHead(channels)

    def forward(self, f_s: torch.Tensor, f_t: torch.Tensor | None = None) -> torch.Tensor:
        return self.head(self.fusion(f_s, f_t))


class MPDAModel(nn.Module):
    def __init__(self, rcfg: ResizerConfig, fusion_heads: int = 4):
        super().__init__()
        self.adapter = AdapterPipeline(rcfg)
        self.detector = Detector(rcfg.target_c, fusion_heads)
        self.classifier = DomainClassifier(rcfg.target_c)

    def forward(self, f_s: torch.Tensor, f_t: torch.Tensor | None) -> torch.Tensor:
        f2 = None if f_t is None else self.adapter(f_t, f_s)
        return self.detector(f_s, f2)


@dataclass
class TrainedSystem:
    cfg: TrainingConfig
    mpda: MPDAModel
    naive: Detector
    single: Detector

    def modules(self) -> dict[str, nn.Module]:
        return {"mpda": self.mpda, "naive": self.naive, "single": self.single}

    def state(self) -> dict[str, torch.Tensor]:
        return {f"{p}.{k}": v for p, m in self.modules().items() for k, v in m.state_dict().items()}

    def save(self, path: str | Path) -> None:
        meta = {"format": "mpda-system", "config": dataclasses.asdict(self.cfg)}
        save_checkpoint(path, self.state(), meta, dtype_code_for(self.cfg.dtype))

    @classmethod
    def load(cls, path: str | Path) -> "TrainedSystem":
        tensors, meta = load_checkpoint(path)
        if meta.get("format") != "mpda-system":
            raise ValueError(f"{path} is not an mpda system checkpoint")
        system = build_system(TrainingConfig(**meta["config"]))
        for prefix, module in system.modules().items():
            sub = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            module.load_state_dict(sub)
        return system

    def eval(self) -> "TrainedSystem":
        for m in self.modules().values():
            m.eval()
        return self


def resizer_config(cfg: TrainingConfig) -> ResizerConfig:
    ego = get_scenario(cfg.scenario).ego
    return ResizerConfig(
        target_h=ego.spatial[0],
        target_w=ego.spatial[1],
        target_c=ego.channels,
        n_repeats=cfg.n_repeats,
        r_blocks=cfg.r_blocks,
        fax_cfg=cfg.fax_cfg,
        rng_seed=cfg.seed,
    )


def build_system(cfg: TrainingConfig) -> TrainedSystem:
    torch.manual_seed(cfg.seed)
    rcfg = resizer_config(cfg)
    system = TrainedSystem(
        cfg,
        MPDAModel(rcfg, cfg.fusion_heads),
        Detector(rcfg.target_c, cfg.fusion_heads),
        Detector(rcfg.target_c, cfg.fusion_heads),
    )
    for m in system.modules().values():
        m.to(cfg.dtype)
    return system


def lr_at_epoch(cfg: TrainingConfig, epoch: int) -> float:
    lr = cfg.lr
    for e in range(1, epoch + 1):
        if e % cfg.decay_every == 0:
            lr = lr * cfg.lr_decay
    return lr


@dataclass
class SceneSample:
    scene: SceneSpec
    f_s: torch.Tensor
    f_t: torch.Tensor | None
    targets: object


def make_samples(seeds: list[int], ego_dom, collab_dom, dtype, scene_cfg: SceneConfig = SceneConfig()):
    samples = []
    for s in seeds:
        scene = gen_scene(s, scene_cfg)
        f_s = extract_features(scene, ego_dom, 0, dtype).data
        collab = collaborator_features(scene, collab_dom, dtype) if collab_dom is not None else None
        targets = rasterize_targets(scene.boxes, f_s.shape[1], f_s.shape[2], dtype)
        samples.append(SceneSample(scene, f_s, None if collab is None else collab.data, targets))
    return samples


def _fit(
    params,
    samples: list[SceneSample],
    step_fn: Callable[[SceneSample], tuple[torch.Tensor, dict]],
    cfg: TrainingConfig,
    epochs: int,
    on_step: Callable[[int, int, float, list[dict]], None] | None = None,
    rng_seed: int = 0,
) -> None:
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.decay_every, gamma=cfg.lr_decay)
    rng = np.random.default_rng(rng_seed)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch):
            batch = [samples[i] for i in order[start : start + cfg.batch]]
            opt.zero_grad()
            infos = []
            for sample in batch:
                objective, info = step_fn(sample)
                if not torch.isfinite(objective):
                    raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}")
                (objective / len(batch)).backward()
                infos.append(info)
            opt.step()
            if on_step is not None:
                on_step(epoch, step, opt.param_groups[0]["lr"], infos)
            step += 1
        sched.step()


def mpda_objective(model: MPDAModel, s: SceneSample, cfg: TrainingConfig) -> tuple[torch.Tensor, dict]:
    """Backward objective for one scene plus the logged loss terms.

    The classifier learns from the unscaled domain loss while G sees it reversed and
    scaled by ``beta * grl_lambda``; the logged ``L`` is ``alpha * L_det + beta * L_domain``.
    """
    f2 = model.adapter(s.f_t, s.f_s)
    logits_s = model.classifier(s.f_s)
    logits_t = model.classifier(grl(f2, GrlSetting(cfg.beta * cfg.grl_lambda)))
    l_dom = domain_loss(logits_s, logits_t)
    l_det, _ = detection_loss(model.detector(s.f_s, f2), s.targets)
    objective = cfg.alpha * l_det + l_dom
    total = cfg.alpha * l_det + cfg.beta * l_dom
    info = {
        "L": float(total.detach()),
        "L_det": float(l_det.detach()),
        "L_domain": float(l_dom.detach()),
        "acc": domain_accuracy(logits_s.detach(), logits_t.detach()),
    }
    return objective, info


def train(cfg: TrainingConfig, progress: bool = False) -> tuple[TrainedSystem, LossReport]:
    """Train all three models for ``cfg.scenario``; deterministic given ``cfg.seed``."""
    torch.use_deterministic_algorithms(True)
    scen = get_scenario(cfg.scenario)
    system = build_system(cfg)
    report = LossReport(cfg.alpha, cfg.beta)
    seeds = scene_seeds(cfg.seed, cfg.train_scenes)
    dtype = cfg.dtype

    homo = make_samples(seeds, scen.ego, scen.ego, dtype)

    def baseline_step(det: Detector, use_collab: bool, losses: list[float]):
        def fn(s: SceneSample):
            out = det(s.f_s, s.f_t if use_collab else None)
            l_det, _ = detection_loss(out, s.targets)
            return cfg.alpha * l_det, {"L_det": float(l_det.detach())}

        return fn

    for name, det, use_collab in (("single", system.single, False), ("naive", system.naive, True)):
        losses = report.baseline_losses.setdefault(name, [])
        _fit(
            list(det.parameters()),
            homo,
            baseline_step(det, use_collab, losses),
            cfg,
            cfg.baseline_epochs,
            on_step=lambda e, s, lr, infos, losses=losses: losses.append(float(np.mean([i["L_det"] for i in infos]))),
            rng_seed=cfg.seed + (1 if name == "single" else 2),
        )
        if progress:
            log.info("%s baseline: final L_det %.4f", name, losses[-1] if losses else float("nan"))

    del homo
    hetero = make_samples(seeds, scen.ego, scen.collab_train, dtype)
    model = system.mpda
    model.detector.load_state_dict(system.naive.state_dict())
    model.adapter.reseed(cfg.seed)

    def mpda_step(s: SceneSample):
        return mpda_objective(model, s, cfg)

    epoch_acc: dict[int, list[float]] = {}

    def record(epoch, step, lr, infos):
        l_det = float(np.mean([i["L_det"] for i in infos]))
        l_dom = float(np.mean([i["L_domain"] for i in infos]))
        report.steps.append(
            StepRecord(epoch, step, lr, float(np.mean([i["L"] for i in infos])), l_det, l_dom,
                       float(np.mean([i["acc"] for i in infos])))
        )
        epoch_acc.setdefault(epoch, []).extend(i["acc"] for i in infos)
        if progress and step % 20 == 0:
            log.info("epoch %d step %d lr %.2e L %.4f L_det %.4f L_dom %.4f", epoch, step, lr,
                     report.steps[-1].L, l_det, l_dom)

    _fit(list(model.parameters()), hetero, mpda_step, cfg, cfg.epochs, on_step=record, rng_seed=cfg.seed + 3)
    report.epoch_domain_acc = [float(np.mean(epoch_acc[e])) for e in sorted(epoch_acc)]
    system.eval()
    return system, report
