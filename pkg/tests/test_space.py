import numpy as np
import pytest

from headcount import space as S
from headcount import tensor as T
from headcount.costmodel import CostProfile, reference_profile
from headcount.optim import Sgd
from headcount.tensor import Graph, Tensor


def tiny_space():
    """Two-stage space small enough to enumerate and forward quickly."""
    return S.SearchSpace((
        S.StageSpec((4, 6), (1, 2), (5,), 3),
        S.StageSpec((8, 12), (1, 2), (3, 5), 2),
    ))


class TestDefaultSpace:
    def test_stage_one(self):
        sp = S.default_search_space()
        st = sp.stages[0]
        assert st.channels == (16, 24, 32)
        assert st.kernels == (10,)
        assert st.stride == 5

    def test_stage_eight(self):
        sp = S.default_search_space()
        st = sp.stages[7]
        assert st.kernels == (10, 11, 12)
        assert st.stride == 1

    def test_all_rows(self):
        sp = S.default_search_space()
        assert [st.channels for st in sp.stages] == [
            (16, 24, 32), (32, 48, 64), (64, 96, 128)] + [(128, 192, 256)] * 5
        assert [st.repeats for st in sp.stages] == [(1,), (1,)] + [(1, 2, 3)] * 6
        assert [st.kernels for st in sp.stages] == [
            (10,), (8,), (4,), (1,), (1, 2, 3), (4, 5, 6), (7, 8, 9), (10, 11, 12)]
        assert [st.stride for st in sp.stages] == [5, 4, 2, 1, 1, 1, 1, 1]

    def test_cardinality(self):
        assert S.space_cardinality(S.default_search_space()) == 3 ** 18 == 387420489

    def test_monotone_cardinality(self):
        sp = tiny_space()
        base = S.space_cardinality(sp)
        for si, st in enumerate(sp.stages):
            for field in ("channels", "repeats", "kernels"):
                choices = getattr(st, field)
                if len(choices) < 2:
                    continue
                reduced = {f: getattr(st, f) for f in ("channels", "repeats", "kernels")}
                reduced[field] = choices[:-1]
                stages = list(sp.stages)
                stages[si] = S.StageSpec(reduced["channels"], reduced["repeats"],
                                         reduced["kernels"], st.stride)
                assert S.space_cardinality(S.SearchSpace(tuple(stages))) < base

    def test_roundtrip_dict(self):
        sp = S.default_search_space()
        assert S.SearchSpace.from_dict(sp.to_dict()) == sp


class TestSampling:
    def test_fixed_seed_reproducible(self):
        sp = S.default_search_space()
        a = S.sample_uniform(sp, np.random.default_rng(42))
        b = S.sample_uniform(sp, np.random.default_rng(42))
        assert a == b

    def test_singleton_space(self):
        sp = S.SearchSpace((S.StageSpec((4,), (1,), (3,), 2),))
        cfg = S.sample_uniform(sp, np.random.default_rng(0))
        assert cfg == S.SubnetConfig((4,), (1,), (3,))

    def test_uniform_within_three_sigma(self):
        sp = S.default_search_space()
        rng = np.random.default_rng(123)
        n = 10000
        counts = {}
        for _ in range(n):
            cfg = S.sample_uniform(sp, rng)
            for gi, g in enumerate(cfg.encode(sp)):
                counts[(gi, g)] = counts.get((gi, g), 0) + 1
        for gi, st_field_len in enumerate(
                [len(c) for st in sp.stages
                 for c in (st.channels, st.repeats, st.kernels)]):
            p = 1.0 / st_field_len
            sigma = (n * p * (1 - p)) ** 0.5
            for choice in range(st_field_len):
                got = counts.get((gi, choice), 0)
                assert abs(got - n * p) <= 3 * sigma + 1e-9

    def test_infeasible_constraint_errors(self):
        sp = tiny_space()
        with pytest.raises(RuntimeError, match="constraint infeasible"):
            S.sample_uniform(sp, np.random.default_rng(0), validator=lambda c: False)


class TestValidateConfig:
    def test_minimal_config_passes_default_theta(self):
        sp = S.default_search_space()
        prof = reference_profile()
        assert S.validate_config(S.min_config(sp), sp, prof) is True

    def test_engineered_dominant_op_fails(self):
        # One op holding >50% of analytic latency: a wide, long-kernel,
        # two-repeat final stage over an otherwise minimal config.
        sp = S.default_search_space()
        prof = CostProfile.analytic(2e-6)
        cfg = S.min_config(sp)
        cfg = S.SubnetConfig(cfg.channels[:-1] + (256,),
                             cfg.repeats[:-1] + (2,),
                             cfg.kernels[:-1] + (12,))
        from headcount.costmodel import bottleneck_fraction
        assert bottleneck_fraction(prof, sp, cfg, 80000) > 0.5
        assert S.validate_config(cfg, sp, prof, theta=0.35) is False

    def test_theta_one_always_true(self):
        sp = S.default_search_space()
        prof = CostProfile.analytic(2e-6)
        rng = np.random.default_rng(0)
        for _ in range(5):
            assert S.validate_config(S.sample_uniform(sp, rng), sp, prof, theta=1.0)


class TestLengths:
    def test_single_stage_min_length(self):
        sp = S.SearchSpace((S.StageSpec((4,), (1,), (10,), 5),))
        assert S.min_input_length(sp, S.min_config(sp)) == 10

    def test_two_stage_min_length(self):
        sp = S.SearchSpace((
            S.StageSpec((4,), (1,), (10,), 5),
            S.StageSpec((8,), (1,), (8,), 4),
        ))
        assert S.min_input_length(sp, S.min_config(sp)) == 45

    def test_max_config_fits_one_second_at_8k(self):
        sp = S.default_search_space()
        assert S.min_input_length(sp, S.max_config(sp)) <= 8000

    def test_min_length_is_tight(self):
        sp = tiny_space()
        rng = np.random.default_rng(4)
        for _ in range(10):
            cfg = S.sample_uniform(sp, rng)
            need = S.min_input_length(sp, cfg)
            shapes = S.layer_shapes(sp, cfg)
            assert S.layer_output_lengths(shapes, need)[-1] >= 1
            with pytest.raises(ValueError, match="stage"):
                S.layer_output_lengths(shapes, need - 1)


class TestEncoding:
    def test_roundtrip_all_tiny_configs(self):
        sp = tiny_space()
        for cfg in S.all_configs(sp):
            assert S.SubnetConfig.decode(sp, cfg.encode(sp)) == cfg

    def test_roundtrip_random_default_configs(self):
        sp = S.default_search_space()
        rng = np.random.default_rng(8)
        for _ in range(50):
            cfg = S.sample_uniform(sp, rng)
            assert S.SubnetConfig.decode(sp, cfg.encode(sp)) == cfg

    def test_bad_gene_count(self):
        with pytest.raises(ValueError, match="genes"):
            S.SubnetConfig.decode(tiny_space(), (0, 0))


class TestWeightSharing:
    def test_sliced_equals_extracted(self):
        sp = tiny_space()
        net = S.Supernet(sp, seed=3)
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(1, 64)).astype(np.float32))
        for cfg in S.all_configs(sp):
            shared = S.subnet_forward(net, cfg, x).data
            standalone = S.extract_subnet(net, cfg).forward(x).data
            assert np.max(np.abs(shared - standalone)) < 1e-5

    def test_max_config_uses_full_tensors(self):
        sp = tiny_space()
        net = S.Supernet(sp, seed=1)
        model = S.extract_subnet(net, S.max_config(sp))
        assert model.parameter_count() == net.parameter_count()

    def test_param_count_monotone_and_analytic(self):
        sp = tiny_space()
        net = S.Supernet(sp, seed=1)
        lo = S.extract_subnet(net, S.min_config(sp))
        hi = S.extract_subnet(net, S.max_config(sp))
        assert lo.parameter_count() < hi.parameter_count()
        for cfg in (S.min_config(sp), S.max_config(sp)):
            assert (S.parameter_count(sp, cfg)
                    == S.extract_subnet(net, cfg).parameter_count())

    def test_inactive_repeat_slot_is_unused(self):
        sp = tiny_space()
        net = S.Supernet(sp, seed=7)
        cfg = S.SubnetConfig((4, 8), (1, 1), (5, 3))  # single repeat everywhere
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(1, 64)).astype(np.float32))
        before = S.subnet_forward(net, cfg, x).data.copy()
        net.stages[1][1]["w"].data += 100.0  # second repeat slot: inactive
        after = S.subnet_forward(net, cfg, x).data
        assert np.array_equal(before, after)

    def test_input_too_short_names_stage(self):
        sp = S.default_search_space()
        net = S.Supernet(sp, seed=0)
        # 50 samples survive stages 1-2 (lengths 9, then 1) and die at stage 3
        x = Tensor(np.zeros((1, 50), dtype=np.float32))
        with pytest.raises(ValueError, match="stage 3"):
            S.subnet_forward(net, S.min_config(sp), x)

    def test_training_step_touches_only_active_slices(self):
        sp = tiny_space()
        net = S.Supernet(sp, seed=11)
        cfg = S.SubnetConfig((4, 8), (1, 2), (5, 3))
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(2, 1, 64)).astype(np.float32))
        labels = np.array([1, 4])
        before = {p.name: p.data.copy() for p in net.parameters()}

        # two steps: the zero-initialized head blocks conv gradients on step 1
        opt = Sgd(net.parameters(), lr=0.05)
        for _ in range(2):
            with Graph() as g:
                logits = S.subnet_forward(net, cfg, x)
                loss = T.softmax_cross_entropy(logits, labels)
                g.backward(loss)
            opt.step()
            opt.zero_grad()

        # Active slices moved; everything outside them is bit-identical.
        w0 = net.stages[0][0]["w"]
        assert not np.array_equal(w0.data[:4, :, :], before[w0.name][:4, :, :])
        assert np.array_equal(w0.data[4:, :, :], before[w0.name][4:, :, :])
        w1 = net.stages[1][0]["w"]
        k_max = sp.stages[1].kernels[-1]
        win = slice((k_max - 3) // 2, (k_max - 3) // 2 + 3)
        active = np.zeros_like(w1.data, dtype=bool)
        active[:8, :4, win] = True
        assert np.array_equal(w1.data[~active], before[w1.name][~active])
        unused_slot = net.stages[0][1]["w"]  # repeats[0]=1: slot 1 inactive
        assert np.array_equal(unused_slot.data, before[unused_slot.name])

    def test_kernel_window_bias_left(self):
        assert S._kernel_window(12, 11) == slice(0, 11)
        assert S._kernel_window(12, 10) == slice(1, 11)
        assert S._kernel_window(3, 1) == slice(1, 2)
