import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mpda.adapter import (
    AdapterPipeline,
    ChannelAligner,
    CrossDomainTransformer,
    LearnableResizer,
    ResizerConfig,
    adapt,
    channel_align,
    cross_domain_transform,
    resize_features,
)
from mpda.fax_attention import DimensionError, FaxConfig
from mpda.feature_core import FeatureMap, resize_tensor

SMALL_FAX = FaxConfig(window_p=2, grid_g=2, heads=2, head_dim=2)


def perturb(module, gen, scale=0.3):
    module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    return module


class TestChannelAligner:
    def test_equal_channels_single_pass(self, gen):
        for n in (1, 5):
            aligner = ChannelAligner(4, n_repeats=n).double()
            x = torch.randn(2, 3, 3, 8, generator=gen, dtype=torch.float64)
            assert torch.equal(aligner(x), aligner.conv(x))
            assert len(aligner.last_plan) == 1

    def test_pad_count(self):
        plan = ChannelAligner(4, seed=3).plan(5)
        assert len(plan) == 1
        idx = plan[0]
        assert len(idx) == 8
        np.testing.assert_array_equal(idx[:5], np.arange(5))
        pad = idx[5:]
        assert len(pad) == 3 and np.all((pad >= 0) & (pad < 5))

    def test_pad_may_repeat_when_short(self):
        # 1 channel padded to 8 has to reuse it
        assert ChannelAligner(4).plan(1)[0].tolist() == [0] * 8

    def test_drop_replay_oracle(self, gen):
        aligner = perturb(ChannelAligner(2, n_repeats=3, seed=11), gen)
        x = torch.randn(2, 3, 4, 6, generator=gen, dtype=torch.float64)
        out = aligner(x).detach().numpy()

        rng = np.random.default_rng(11)
        subsets = [np.sort(rng.choice(6, 4, replace=False)) for _ in range(3)]
        for got, want in zip(aligner.last_plan, subsets):
            np.testing.assert_array_equal(got, want)
        w, b = aligner.conv.weight.detach().numpy(), aligner.conv.bias.detach().numpy()
        xn = x.numpy()
        expected = np.mean([xn[..., s] @ w.T + b for s in subsets], axis=0)
        np.testing.assert_allclose(out, expected, atol=1e-12, rtol=0)

    def test_subsets_are_distinct_channels(self):
        for idx in ChannelAligner(3, n_repeats=20).plan(9):
            assert len(set(idx.tolist())) == 6 and idx.max() < 9

    def test_deterministic_for_seed(self, gen):
        x = torch.randn(1, 2, 2, 13, generator=gen)
        torch.manual_seed(0)
        a = ChannelAligner(4, n_repeats=3, seed=5)
        torch.manual_seed(0)
        b = ChannelAligner(4, n_repeats=3, seed=5)
        assert torch.equal(a(x), b(x))
        a.reseed(5)
        first = a(x)
        a.reseed(5)
        assert torch.equal(a(x), first)

    def test_drop_selection_is_uniform(self):
        c_t, c_in, reps = 10, 4, 10_000
        counts = np.zeros(c_t)
        for idx in ChannelAligner(2, n_repeats=reps, seed=0).plan(c_t):
            counts[idx] += 1
        freq = counts / reps
        expected = c_in / c_t
        assert np.all(np.abs(freq - expected) <= 0.05 * expected)

    def test_feature_map_wrapper(self, gen):
        m = FeatureMap(torch.randn(3, 2, 4, 7, generator=gen), domain_id=4, agent_ids=(1, 2, 3))
        out = channel_align(m, ChannelAligner(2))
        assert out.shape == (3, 2, 4, 2) and out.domain_id == 4 and out.agent_ids == (1, 2, 3)


def small_cfg(h=8, w=12, c=4, **kw):
    return ResizerConfig(h, w, c, fax_cfg=SMALL_FAX, **kw)


class TestLearnableResizer:
    @pytest.mark.parametrize(
        "h_t,w_t,c_t", list(itertools.product((4, 8, 12), (4, 8, 16), (5, 8, 11)))
    )
    def test_shape_contract(self, h_t, w_t, c_t):
        resizer = LearnableResizer(small_cfg())
        out = resizer(torch.randn(2, h_t, w_t, c_t))
        assert out.shape == (2, 8, 12, 4)
        assert torch.isfinite(out).all()

    def test_zero_branches_reduce_to_resized_alignment(self, gen):
        resizer = perturb(LearnableResizer(small_cfg(r_blocks=2)), gen)
        resizer.zero_branches()
        x = torch.randn(2, 4, 6, 11, generator=gen, dtype=torch.float64)
        plan = resizer.aligner.plan(11)
        expected = resize_tensor(resizer.aligner(x, plan), 8, 12)
        torch.testing.assert_close(resizer(x, plan), expected, atol=1e-12, rtol=0)

    def test_identity_seam(self, gen):
        resizer = perturb(LearnableResizer(small_cfg(4, 6, 4, r_blocks=3)), gen)
        resizer.zero_branches()
        x = torch.randn(2, 4, 6, 8, generator=gen, dtype=torch.float64)
        assert torch.equal(resizer(x), resizer.aligner.conv(x))

    def test_no_res_blocks(self, gen):
        resizer = LearnableResizer(small_cfg(r_blocks=0))
        assert resizer(torch.randn(1, 4, 4, 8, generator=gen)).shape == (1, 8, 12, 4)

    def test_rejects_non_divisible_input(self):
        with pytest.raises(DimensionError):
            LearnableResizer(small_cfg())(torch.randn(1, 5, 4, 8))

    def test_feature_map_wrapper(self, gen):
        m = FeatureMap(torch.randn(1, 4, 4, 9, generator=gen), domain_id=2)
        out = resize_features(m, LearnableResizer(small_cfg()))
        assert out.shape == (1, 8, 12, 4) and out.domain_id == 2

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ResizerConfig(0, 4, 4)
        with pytest.raises(ValueError):
            ResizerConfig(4, 4, 4, n_repeats=0)
        assert ResizerConfig(4, 4, 6).c_in == 12


class TestCrossDomainTransformer:
    def test_identity_init_exact(self, gen):
        cdt = CrossDomainTransformer(4, SMALL_FAX).double()
        f_t = torch.randn(3, 4, 4, 4, generator=gen, dtype=torch.float64)
        f_s = torch.randn(1, 4, 4, 4, generator=gen, dtype=torch.float64)
        assert torch.equal(cdt(f_t, f_s), f_t)

    def test_identity_init_restores(self, gen):
        cdt = perturb(CrossDomainTransformer(4, SMALL_FAX), gen)
        f_t = torch.randn(2, 4, 4, 4, generator=gen, dtype=torch.float64)
        f_s = torch.randn(1, 4, 4, 4, generator=gen, dtype=torch.float64)
        assert not torch.equal(cdt(f_t, f_s), f_t)
        cdt.identity_init()
        assert torch.equal(cdt(f_t, f_s), f_t)

    def test_identical_slices_identical_outputs(self, gen):
        cdt = perturb(CrossDomainTransformer(4, SMALL_FAX), gen)
        one = torch.randn(1, 4, 4, 4, generator=gen, dtype=torch.float64)
        out = cdt(one.expand(2, -1, -1, -1).clone(), torch.randn(1, 4, 4, 4, generator=gen, dtype=torch.float64))
        assert torch.equal(out[0], out[1])

    @settings(max_examples=15)
    @given(st.permutations(range(4)))
    def test_agent_permutation_equivariant(self, perm):
        g = torch.Generator().manual_seed(7)
        torch.manual_seed(0)
        cdt = perturb(CrossDomainTransformer(4, SMALL_FAX), g)
        f_t = torch.randn(4, 4, 4, 4, generator=g, dtype=torch.float64)
        f_s = torch.randn(1, 4, 4, 4, generator=g, dtype=torch.float64)
        perm = list(perm)
        torch.testing.assert_close(cdt(f_t[perm], f_s), cdt(f_t, f_s)[perm], atol=1e-12, rtol=0)

    def test_rejects_mismatch(self):
        cdt = CrossDomainTransformer(4, SMALL_FAX)
        with pytest.raises(ValueError):
            cdt(torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 8, 4))

    def test_ego_must_be_single_agent(self):
        cdt = CrossDomainTransformer(4, SMALL_FAX)
        m = FeatureMap(torch.zeros(2, 4, 4, 4))
        with pytest.raises(ValueError):
            cross_domain_transform(m, m, cdt)


class TestPipeline:
    def test_adapt_shapes_and_identity(self, gen):
        pipe = AdapterPipeline(small_cfg(4, 8, 4)).double()
        pipe.resizer.zero_branches()
        f_t = FeatureMap(torch.randn(2, 8, 4, 8, generator=gen, dtype=torch.float64), domain_id=1)
        f_s = FeatureMap(torch.randn(1, 4, 8, 4, generator=gen, dtype=torch.float64), domain_id=0)
        plan = pipe.resizer.aligner.plan(8)
        out = adapt(f_t, f_s, pipe)
        assert out.shape == (2, 4, 8, 4) and out.domain_id == 1
        # zeroed resizer branches and an identity transformer leave only the resized alignment
        expected = resize_tensor(pipe.resizer.aligner(f_t.data, plan), 4, 8)
        torch.testing.assert_close(out.data, expected, atol=1e-12, rtol=0)

    def test_reseed_replays(self, gen):
        pipe = AdapterPipeline(small_cfg(4, 4, 2))
        f_t = torch.randn(1, 4, 4, 9, generator=gen)
        f_s = torch.randn(1, 4, 4, 2, generator=gen)
        pipe.reseed(3)
        a = pipe(f_t, f_s)
        pipe.reseed(3)
        assert torch.equal(pipe(f_t, f_s), a)
