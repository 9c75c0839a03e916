import numpy as np
import pytest

from bars import autodiff as ad
from bars.autodiff import Tensor, grad_check
from bars.objectives import (
    CostTable,
    Geometry,
    OpCost,
    complexity_measure,
    complexity_multiplier,
    count_parameters,
    entropy,
    entropy_reg,
    equivalent_ops,
    expected_complexity,
    genotype_cost,
    network_cost,
    op_cost,
    total_cost,
)
from bars.search_space import ArchParams, ArchSample, decode, sample_from_genotype

from .oracles import draw_indices, onehot_costs


class TestEquivalentOps:
    @pytest.mark.parametrize(
        "flops,biops,printed",
        [(2e6, 513e6, 10.02), (2e6, 1048e6, 18.37), (161e6, 1424e6, 183.25)],
        ids=["A", "B", "E"],
    )
    def test_published_rows(self, flops, biops, printed):
        assert abs(equivalent_ops(flops, biops) / 1e6 - printed) <= 0.01

    def test_opcost_sums(self):
        c = OpCost(10, 640) + OpCost(5, 64)
        assert (c.flops, c.biops, c.equivalent_ops) == (15, 704, 26.0)
        assert sum([OpCost(1, 0), OpCost(2, 0)], OpCost()) == OpCost(3, 0)


class TestOpCost:
    def test_none_is_free(self):
        assert op_cost("none", Geometry(8, 8, 4, 4)) == OpCost(0, 0)

    def test_binary_3x3_closed_form(self):
        c = op_cost("bconv", Geometry(48, 48, 32, 32, 3, 1))
        assert c.biops == 2 * 48 * 9 * 48 * 1024 == 42467328

    def test_half_width_quarters_biops(self):
        full = op_cost("bconv", Geometry(48, 48, 32, 32))
        half = op_cost("bconv", Geometry(48, 48, 32, 32), 0.5)
        assert half.biops * 4 == full.biops

    def test_stride_two_output(self):
        c = op_cost("bconv", Geometry(8, 16, 8, 8, 3, 2))
        assert c.biops == 2 * 8 * 9 * 16 * 16

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown op kind"):
            op_cost("maxpool", Geometry(1, 1, 2, 2))


class TestExpectedComplexity:
    def random_genotype(self, space, seed):
        arch = ArchParams(space)
        rng = np.random.default_rng(seed)
        for p in arch.parameters():
            p.data[...] = rng.standard_normal(p.shape)
        return arch.hard_sample(rng)

    @pytest.mark.parametrize("seed", range(12))
    def test_one_hot_is_exact_decoded_cost(self, tiny_space, seed):
        table = CostTable(tiny_space)
        with ad.default_dtype(np.float64):
            smp, g = self.random_genotype(tiny_space, seed)
            exp = expected_complexity(smp, table).data
        closed = total_cost(genotype_cost(g, tiny_space))
        built = total_cost(network_cost(decode(g, tiny_space)))
        assert closed == built
        assert exp[0] == closed.flops and exp[1] == closed.biops
        assert float(exp[0]).is_integer() and float(exp[1]).is_integer()

    def test_sample_from_genotype_roundtrip(self, tiny_space):
        table = CostTable(tiny_space)
        _, g = self.random_genotype(tiny_space, 3)
        with ad.default_dtype(np.float64):
            exp = expected_complexity(sample_from_genotype(g, tiny_space), table).data
        closed = total_cost(genotype_cost(g, tiny_space))
        assert (exp[0], exp[1]) == (closed.flops, closed.biops)

    def test_zero_depth_keeps_only_fixed_parts(self, tiny_space):
        table = CostTable(tiny_space)
        _, g = self.random_genotype(tiny_space, 5)
        for st in g.stages:
            st.depth = 0
        parts = genotype_cost(g, tiny_space)
        assert not any(k.startswith("stage") for k in parts)
        with ad.default_dtype(np.float64):
            exp = expected_complexity(sample_from_genotype(g, tiny_space), table).data
        assert exp[0] == total_cost(parts).flops

    def test_vectorized_oracle_matches_closed_form(self, tiny_space):
        table = CostTable(tiny_space)
        for seed in range(20):
            smp, g = self.random_genotype(tiny_space, seed)
            idx = [np.argmax(t.data, axis=-1)[None] for t in (smp.micro, smp.width, smp.path)]
            c = onehot_costs(table, *idx)[0]
            closed = total_cost(genotype_cost(g, tiny_space))
            assert (c[0], c[1]) == (closed.flops, closed.biops)

    def test_relaxed_matches_monte_carlo(self, tiny_space):
        table = CostTable(tiny_space)
        arch = ArchParams(tiny_space, dtype=np.float64)
        rng = np.random.default_rng(11)
        for p in arch.parameters():
            p.data[...] = rng.standard_normal(p.shape)
        probs = arch.probabilities()
        with ad.default_dtype(np.float64):
            smp = ArchSample(Tensor(probs["micro"]), Tensor(probs["width"]), Tensor(probs["path"]))
            exp = expected_complexity(smp, table).data
        n = 100000
        mc = onehot_costs(
            table,
            draw_indices(probs["micro"], n, rng),
            draw_indices(probs["width"], n, rng),
            draw_indices(probs["path"], n, rng),
        )
        est = equivalent_ops(mc[:, 0], mc[:, 1]).mean()
        assert abs(equivalent_ops(exp[0], exp[1]) - est) / est < 0.01

    def test_gradient_wrt_probabilities(self, micro_space):
        table = CostTable(micro_space)
        arch = ArchParams(micro_space, dtype=np.float64)
        probs = arch.probabilities()
        rng = np.random.default_rng(0)
        width = rng.dirichlet(np.ones(probs["width"].shape[-1]), size=probs["width"].shape[0])

        def fn(t):
            smp = ArchSample(Tensor(probs["micro"]), t, Tensor(probs["path"]))
            return complexity_measure(expected_complexity(smp, table))

        assert grad_check(fn, width) < 1e-4


class TestMultiplier:
    def test_at_budget(self):
        assert complexity_multiplier(Tensor(100.0), 100.0, 0.7, 0.3).item() == 1.0

    def test_over_budget(self):
        assert complexity_multiplier(Tensor(200.0), 100.0).item() == pytest.approx(2**0.2, rel=1e-6)
        assert 2**0.2 == pytest.approx(1.1487, abs=1e-4)

    def test_under_budget_flat(self):
        m = complexity_multiplier(Tensor(50.0), 100.0)
        assert m.item() == 1.0

    def test_infinite_budget(self):
        assert complexity_multiplier(Tensor(1e9), float("inf")).item() == 1.0

    def test_invalid(self):
        with pytest.raises(ValueError, match="budget"):
            complexity_multiplier(Tensor(1.0), 0.0)

    @pytest.mark.parametrize("c", [150.0, 60.0])
    def test_gradient(self, c):
        assert grad_check(lambda t: complexity_multiplier(t, 100.0, 0.2, 0.5), np.array(c)) < 1e-4

    def test_measure_flops_only(self):
        assert complexity_measure(Tensor([10.0, 640.0]), "flops").item() == 10.0
        assert complexity_measure(Tensor([10.0, 640.0])).item() == 20.0


class TestEntropy:
    def test_near_one_hot_has_zero_entropy(self):
        with ad.default_dtype(np.float64):
            assert entropy(Tensor([50.0, -50.0, -50.0])).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_three(self):
        val = entropy_reg(Tensor(np.zeros(3)), -0.01).item()
        assert val == pytest.approx(-0.01 * np.log(3), rel=1e-6)
        assert val == pytest.approx(-0.010986, abs=1e-6)

    def test_zero_coefficient(self, rng):
        assert entropy_reg([Tensor(rng.standard_normal((3, 4)))], 0.0).item() == 0.0

    def test_sums_over_tensors(self):
        val = entropy_reg([Tensor(np.zeros(3)), Tensor(np.zeros((2, 2)))], 1.0).item()
        assert val == pytest.approx(np.log(3) + 2 * np.log(2), rel=1e-6)

    def test_gradient(self, rng):
        a = rng.standard_normal((3, 4))
        assert grad_check(lambda t: entropy_reg([t], -0.01), a) < 1e-4


def test_parameter_count_matches_built_network(tiny_space):
    arch = ArchParams(tiny_space)
    rng = np.random.default_rng(2)
    for p in arch.parameters():
        p.data[...] = rng.standard_normal(p.shape)
    for _ in range(5):
        _, g = arch.hard_sample(rng)
        assert count_parameters(g, tiny_space) == decode(g, tiny_space).num_parameters()
