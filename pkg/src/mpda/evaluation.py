"""Held-out evaluation, the post-hoc domain probe, and the inference throughput bench."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from mpda.adversary import DomainClassifier, domain_accuracy, domain_loss
from mpda.feature_core import resize_tensor
from mpda.fusion_head import BoxSet, detections_from_output, pooled_average_precision
from mpda.synth import SceneConfig, collaborator_features, extract_features, gen_scene, get_scenario, scene_seeds
from mpda.training import TrainedSystem

METHODS = ("no_fusion", "naive", "mpda")


def naive_align(f_t: torch.Tensor, out_h: int, out_w: int, out_c: int, rng: np.random.Generator) -> torch.Tensor:
    """Bilinear resize plus random channel drop (or random channel padding when short)."""
    x = resize_tensor(f_t, out_h, out_w)
    c_t = x.shape[-1]
    if c_t >= out_c:
        idx = np.sort(rng.choice(c_t, out_c, replace=False))
    else:
        idx = np.concatenate([np.arange(c_t), rng.integers(0, c_t, out_c - c_t)])
    return x[..., torch.as_tensor(idx, dtype=torch.long)]


@dataclass
class MethodResult:
    scenario: str
    method: str
    ap_at_050: float
    ap_at_070: float
    num_gt: int
    num_det: int


@dataclass
class EvalReport:
    split_seed: int
    results: list[MethodResult] = field(default_factory=list)

    def get(self, method: str, scenario: str | None = None) -> MethodResult:
        for r in self.results:
            if r.method == method and (scenario is None or r.scenario == scenario):
                return r
        raise KeyError(method)

    def to_text(self) -> str:
        lines = [f"{'scenario':<10} {'method':<10} {'AP@0.5':>7} {'AP@0.7':>7} {'num_gt':>7} {'num_det':>7}"]
        for r in self.results:
            lines.append(
                f"{r.scenario:<10} {r.method:<10} {r.ap_at_050:7.4f} {r.ap_at_070:7.4f} {r.num_gt:7d} {r.num_det:7d}"
            )
        return "\n".join(lines)

    def to_kv(self) -> str:
        out = [f"split_seed = {self.split_seed}"]
        for r in self.results:
            for key in ("ap_at_050", "ap_at_070", "num_gt", "num_det"):
                out.append(f"{r.scenario}.{r.method}.{key} = {getattr(r, key)}")
        return "\n".join(out)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _predict(system: TrainedSystem, method: str, f_s, f_t_raw, rng) -> torch.Tensor:
    ego_h, ego_w, ego_c = f_s.shape[1:]
    if method == "no_fusion":
        return system.single(f_s, None)[0]
    if method == "naive":
        f_t = None if f_t_raw is None else naive_align(f_t_raw, ego_h, ego_w, ego_c, rng)
        return system.naive(f_s, f_t)[0]
    if method == "mpda":
        return system.mpda(f_s, f_t_raw)[0]
    raise ValueError(f"unknown method {method!r}")


def evaluate(
    system: TrainedSystem,
    scenario: str,
    split_seed: int,
    n_scenes: int = 64,
    methods: tuple[str, ...] = METHODS,
    score_thr: float = 0.3,
    nms_iou: float = 0.5,
    zero_collaborators: bool = False,
) -> EvalReport:
    """AP@0.5 / AP@0.7 on held-out scenes whose collaborators use the scenario's test backbone."""
    scen = get_scenario(scenario)
    dtype = system.cfg.dtype
    system.eval()
    system.mpda.adapter.reseed(split_seed)
    rng = np.random.default_rng(split_seed)
    pairs: dict[str, list[tuple[BoxSet, BoxSet]]] = {m: [] for m in methods}
    with torch.no_grad():
        for seed in scene_seeds(split_seed + 7919, n_scenes):
            scene = gen_scene(seed, SceneConfig())
            f_s = extract_features(scene, scen.ego, 0, dtype).data
            collab = collaborator_features(scene, scen.collab_test, dtype)
            f_t = None if collab is None else collab.data
            if zero_collaborators and f_t is not None:
                f_t = torch.zeros_like(f_t)
            for m in methods:
                out = _predict(system, m, f_s, f_t, rng)
                pairs[m].append((detections_from_output(out, score_thr, nms_iou), scene.boxes))
    report = EvalReport(split_seed)
    for m in methods:
        report.results.append(
            MethodResult(
                scenario,
                m,
                pooled_average_precision(pairs[m], 0.5),
                pooled_average_precision(pairs[m], 0.7),
                sum(len(g) for _, g in pairs[m]),
                sum(len(d) for d, _ in pairs[m]),
            )
        )
    return report


@dataclass
class ProbeResult:
    adapted_acc: float
    unadapted_acc: float
    n_train: int
    n_test: int


def probe_features(system: TrainedSystem, scenario: str, seed: int, n_scenes: int):
    """Ego maps and the first collaborator's map per scene, adapted and naively aligned."""
    scen = get_scenario(scenario)
    dtype = system.cfg.dtype
    system.eval()
    system.mpda.adapter.reseed(seed)
    rng = np.random.default_rng(seed)
    ego, adapted, naive = [], [], []
    with torch.no_grad():
        for s in scene_seeds(seed + 104729, n_scenes):
            scene = gen_scene(s)
            f_s = extract_features(scene, scen.ego, 0, dtype).data
            f_t = extract_features(scene, scen.collab_test, 1, dtype).data
            ego.append(f_s)
            adapted.append(system.mpda.adapter(f_t, f_s))
            naive.append(naive_align(f_t, *f_s.shape[1:], rng))
    return torch.cat(ego), torch.cat(adapted), torch.cat(naive)


def train_probe(
    source: torch.Tensor,
    target: torch.Tensor,
    seed: int = 0,
    steps: int = 300,
    batch: int = 32,
    lr: float = 1e-3,
    train_frac: float = 0.5,
) -> tuple[float, DomainClassifier]:
    """Fit a fresh domain classifier on a train split; return held-out accuracy."""
    g = torch.Generator().manual_seed(seed)
    n = min(len(source), len(target))
    n_train = int(n * train_frac)
    perm_s = torch.randperm(len(source), generator=g)
    perm_t = torch.randperm(len(target), generator=g)
    s_tr, s_te = source[perm_s[:n_train]], source[perm_s[n_train:n]]
    t_tr, t_te = target[perm_t[:n_train]], target[perm_t[n_train:n]]
    torch.manual_seed(seed)
    clf = DomainClassifier(source.shape[-1]).to(source.dtype)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    half = max(1, batch // 2)
    for _ in range(steps):
        i = torch.randint(0, n_train, (half,), generator=g)
        j = torch.randint(0, n_train, (half,), generator=g)
        loss = domain_loss(clf(s_tr[i]), clf(t_tr[j]))
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        acc = domain_accuracy(clf(s_te), clf(t_te))
    return acc, clf


def domain_probe(system: TrainedSystem, scenario: str, seed: int, n_scenes: int = 200, steps: int = 300) -> ProbeResult:
    ego, adapted, naive = probe_features(system, scenario, seed, n_scenes)
    acc_adapted, _ = train_probe(ego, adapted, seed, steps)
    acc_naive, _ = train_probe(ego, naive, seed, steps)
    n_train = n_scenes // 2
    return ProbeResult(acc_adapted, acc_naive, n_train, n_scenes - n_train)


class EmptyBenchmarkError(ValueError):
    pass


@dataclass
class BenchRow:
    n_agents: int
    fps_mean: float
    fps_std: float


def bench_inference(
    system: TrainedSystem,
    agents: tuple[int, ...] = (1, 2, 3, 4),
    iters: int = 10,
    warmup: int = 2,
    scenario: str | None = None,
) -> list[BenchRow]:
    """Frames per second of adapter + fusion + head for each collaborator count."""
    if iters < 1:
        raise EmptyBenchmarkError("empty benchmark")
    scen = get_scenario(scenario or system.cfg.scenario)
    dtype = system.cfg.dtype
    system.eval()
    g = torch.Generator().manual_seed(0)
    f_s = torch.randn(1, *scen.ego.spatial, scen.ego.channels, generator=g, dtype=dtype)
    rows = []
    with torch.no_grad():
        for n in agents:
            f_t = torch.randn(n, *scen.collab_test.spatial, scen.collab_test.channels, generator=g, dtype=dtype)
            for _ in range(warmup):
                system.mpda(f_s, f_t)
            fps = []
            for _ in range(iters):
                t0 = time.perf_counter()
                system.mpda(f_s, f_t)
                fps.append(1.0 / (time.perf_counter() - t0))
            rows.append(BenchRow(n, statistics.fmean(fps), statistics.pstdev(fps)))
    return rows


def format_bench(rows: list[BenchRow]) -> str:
    return "\n".join(["n_agents  fps_mean  fps_std"] + [f"{r.n_agents:8d}  {r.fps_mean:8.2f}  {r.fps_std:7.2f}" for r in rows])
