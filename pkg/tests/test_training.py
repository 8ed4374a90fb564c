import dataclasses
import math

import pytest
import torch

from mpda.synth import DOM_S, DOM_T_TRAIN, scene_seeds
from mpda.training import (
    ConfigError,
    DivergenceError,
    TrainingConfig,
    _fit,
    build_system,
    dump_config,
    lr_at_epoch,
    make_samples,
    mpda_objective,
    parse_config,
    train,
)

from conftest import TINY


class TestConfig:
    def test_paper_defaults(self):
        cfg = TrainingConfig()
        assert (cfg.alpha, cfg.beta, cfg.lr, cfg.lr_decay, cfg.decay_every) == (1.0, 0.1, 1e-3, 0.1, 10)

    def test_parse(self):
        cfg = parse_config("# comment\nalpha = 0.5  # trailing\n\nepochs=3\nscenario = hetero2\nprecision = f64\n")
        assert cfg.alpha == 0.5 and cfg.epochs == 3 and cfg.scenario == "hetero2" and cfg.dtype == torch.float64

    def test_round_trip(self):
        cfg = TrainingConfig(beta=0.25, train_scenes=7, scenario="normal")
        assert parse_config(dump_config(cfg)) == cfg

    @pytest.mark.parametrize(
        "text",
        ["bogus = 1", "alpha 1", "epochs = 1.5", "alpha = 2", "beta = -0.1", "lr = 0", "scenario = mars", "precision = f16"],
    )
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            parse_config(text)

    def test_unknown_key_is_config_error(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("alpha = 1\nfoo = 2")


class TestSchedule:
    def test_decay_at_multiples(self):
        cfg = TrainingConfig()
        for e in range(30):
            assert lr_at_epoch(cfg, e) == pytest.approx(1e-3 * 0.1 ** (e // 10), rel=1e-12)
        assert lr_at_epoch(cfg, 9) == 1e-3
        assert lr_at_epoch(cfg, 10) == 1e-3 * 0.1

    def test_fit_follows_schedule(self):
        cfg = TrainingConfig(decay_every=2, batch=1)
        w = torch.nn.Parameter(torch.zeros(()))
        seen = []
        _fit([w], [None, None], lambda s: ((w - 1) ** 2, {}), cfg, 5, lambda e, s, lr, i: seen.append((e, lr)))
        for epoch, lr in seen:
            assert lr == lr_at_epoch(cfg, epoch)

    def test_divergence_guard(self):
        cfg = TrainingConfig(batch=1)
        w = torch.nn.Parameter(torch.zeros(()))
        with pytest.raises(DivergenceError):
            _fit([w], [None], lambda s: (w * math.inf, {}), cfg, 1)


def hetero_sample(dtype=torch.float64):
    (s,) = make_samples(scene_seeds(3, 1), DOM_S, DOM_T_TRAIN, dtype)
    return s


class TestObjective:
    def test_loss_identity(self):
        cfg = TrainingConfig(precision="f64")
        system = build_system(cfg)
        _, info = mpda_objective(system.mpda, hetero_sample(), cfg)
        assert info["L"] == pytest.approx(cfg.alpha * info["L_det"] + cfg.beta * info["L_domain"], abs=1e-12)

    def test_beta_zero_decouples_generator(self):
        cfg = TrainingConfig(precision="f64", alpha=0.0, beta=0.0)
        model = build_system(cfg).mpda
        # with alpha = 0 only the domain branch contributes
        objective, _ = mpda_objective(model, hetero_sample(), cfg)
        objective.backward()
        assert all(p.grad is None or not p.grad.any() for p in model.adapter.parameters())
        assert all(p.grad is not None and p.grad.any() for p in model.classifier.parameters())

    def test_beta_reverses_generator_gradient(self):
        sample = hetero_sample()
        grads = {}
        for beta in (0.1, 0.2):
            cfg = TrainingConfig(precision="f64", alpha=0.0, beta=beta)
            model = build_system(cfg).mpda
            mpda_objective(model, sample, cfg)[0].backward()
            grads[beta] = model.adapter.resizer.aligner.conv.weight.grad.clone()
        torch.testing.assert_close(grads[0.2], 2 * grads[0.1], rtol=1e-9, atol=1e-15)


class TestTrain:
    def test_report_identity_every_step(self, tiny_run):
        _, report = tiny_run
        assert report.steps
        for s in report.steps:
            assert abs(s.L - (report.alpha * s.L_det + report.beta * s.L_domain)) <= 1e-6
        assert report.to_csv().startswith("epoch,step,lr,L,L_det,L_domain,domain_acc\n")

    def test_baselines_trained(self, tiny_run):
        _, report = tiny_run
        assert set(report.baseline_losses) == {"single", "naive"}
        assert len(report.epoch_domain_acc) == TINY["epochs"]

    def test_mpda_starts_from_naive_detector(self):
        cfg = TrainingConfig(**{**TINY, "epochs": 0})
        system, _ = train(cfg)
        for k, v in system.naive.state_dict().items():
            assert torch.equal(system.mpda.detector.state_dict()[k], v)

    def test_beta_zero_keeps_generator_on_detection_gradient_only(self):
        base = dict(TINY, alpha=0.0, baseline_epochs=0, precision="f64")
        system, _ = train(TrainingConfig(**base, beta=0.0))
        fresh = build_system(TrainingConfig(**base, beta=0.0))
        for (k, v), (_, v0) in zip(system.mpda.adapter.state_dict().items(), fresh.mpda.adapter.state_dict().items()):
            assert torch.equal(v, v0), k
        changed = [not torch.equal(a, b) for a, b in zip(system.mpda.classifier.parameters(), fresh.mpda.classifier.parameters())]
        assert all(changed)

    def test_deterministic_f64(self):
        cfg = TrainingConfig(**TINY, precision="f64")
        _, a = train(cfg)
        _, b = train(cfg)
        assert a.rows() == b.rows()
        assert a.baseline_losses == b.baseline_losses

    def test_smoke_det_loss_decreases(self):
        cfg = TrainingConfig(train_scenes=64, epochs=2, baseline_epochs=0)
        _, report = train(cfg)
        assert report.steps[-1].L_det < report.steps[0].L_det
