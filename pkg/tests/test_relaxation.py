import numpy as np
import pytest
from scipy import stats

from bars import autodiff as ad
from bars.autodiff import Tensor, grad_check
from bars.relaxation import (
    ScheduleState,
    advance_schedules,
    depth_aggregate,
    gumbel_max_sample,
    gumbel_softmax_sample,
    width_basis,
    width_mask,
)


def scalar(t, seed=0):
    r = np.random.default_rng(seed).standard_normal(t.shape)
    return ad.sum_(ad.mul(t, Tensor(r)))


class TestGumbelSoftmax:
    def test_zero_noise_is_softmax(self):
        a = np.array([0.3, -1.0, 2.0])
        m = gumbel_softmax_sample(Tensor(a), 1.0, noise=np.zeros(3)).data
        np.testing.assert_allclose(m, np.exp(a) / np.exp(a).sum(), rtol=1e-6)

    @pytest.mark.parametrize("tau", [5.0, 1.0, 0.3, 0.05])
    def test_samples_sum_to_one(self, rng, tau):
        a = Tensor(rng.standard_normal((7, 10, 3)))
        m = gumbel_softmax_sample(a, tau, rng).data
        assert np.all(m >= 0)
        np.testing.assert_allclose(m.sum(axis=-1), 1.0, atol=1e-6)

    def test_low_temperature_is_nearly_one_hot(self, rng):
        a = Tensor(np.tile([5.0, 0.0, 0.0], (1000, 1)))
        m = gumbel_softmax_sample(a, 0.01, rng).data
        assert np.mean(m[:, 0] > 0.999) > 0.98

    def test_rejects_non_positive_tau(self):
        with pytest.raises(ValueError, match="temperature"):
            gumbel_softmax_sample(Tensor([0.0, 0.0]), 0.0)

    def test_gradient_with_fixed_noise(self, rng):
        a = rng.standard_normal((2, 4))
        g = rng.gumbel(size=(2, 4))
        for tau in (1.0, 0.5):
            err = grad_check(lambda t: scalar(gumbel_softmax_sample(t, tau, noise=g).m), a)
            assert err < 1e-4


class TestGumbelMax:
    def test_uniform_frequencies(self, rng):
        _, idx = gumbel_max_sample(np.zeros((100000, 3)), rng)
        np.testing.assert_allclose(np.bincount(idx, minlength=3) / 1e5, 1 / 3, atol=0.01)

    def test_chi_square_against_softmax(self):
        a = np.array([1.0, 0.0, -0.5, 0.7])
        p = np.exp(a) / np.exp(a).sum()
        _, idx = gumbel_max_sample(np.tile(a, (100000, 1)), np.random.default_rng(7))
        observed = np.bincount(idx, minlength=4)
        assert stats.chisquare(observed, p * 1e5).pvalue > 0.01

    def test_one_hot_output(self, rng):
        onehot, idx = gumbel_max_sample(np.zeros((5, 4)), rng)
        np.testing.assert_array_equal(onehot.sum(axis=1), 1)
        np.testing.assert_array_equal(onehot.argmax(axis=1), idx)


class TestWidthMask:
    def test_one_hot_full_width(self):
        np.testing.assert_array_equal(width_mask(Tensor([0, 0, 0, 1.0]), 8, (0.25, 0.5, 0.75, 1.0)).data, 1)

    def test_mixture(self):
        out = width_mask(Tensor([0.1, 0.2, 0.3, 0.4]), 8, (0.25, 0.5, 0.75, 1.0)).data
        np.testing.assert_allclose(out, [1, 1, 0.9, 0.9, 0.7, 0.7, 0.4, 0.4], rtol=1e-6)

    def test_quarter_of_48(self):
        out = width_mask(Tensor([1.0, 0, 0, 0]), 48, (0.25, 0.5, 0.75, 1.0)).data
        assert out[:12].tolist() == [1] * 12 and not out[12:].any()

    def test_masks_are_nested(self):
        b = width_basis(16, (0.25, 0.5, 0.75, 1.0))
        assert np.all(np.diff(b, axis=0) >= 0)

    def test_wrong_length(self):
        with pytest.raises(ValueError, match="expected 4"):
            width_mask(Tensor([1.0, 0.0]), 8, (0.25, 0.5, 0.75, 1.0))

    def test_gradient(self, rng):
        m = rng.dirichlet(np.ones(4))
        assert grad_check(lambda t: scalar(width_mask(t, 8, (0.25, 0.5, 0.75, 1.0))), m) < 1e-4


class TestDepthAggregate:
    def ys(self, rng, n=4):
        return [Tensor(rng.standard_normal((2, 3, 2, 2))) for _ in range(n)]

    @pytest.mark.parametrize("k", [0, 2])
    def test_one_hot_selects(self, rng, k):
        ys = self.ys(rng)
        m = np.eye(4)[k]
        np.testing.assert_array_equal(depth_aggregate(Tensor(m), ys).data, ys[k].data)

    def test_uniform_is_mean(self, rng):
        ys = self.ys(rng)
        out = depth_aggregate(Tensor(np.full(4, 0.25)), ys).data
        np.testing.assert_allclose(out, np.mean([y.data for y in ys], axis=0), rtol=1e-5, atol=1e-6)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError, match="weights"):
            depth_aggregate(Tensor(np.full(3, 1 / 3)), self.ys(rng))

    def test_gradients(self, rng):
        ys = [rng.standard_normal((1, 2, 2, 2)) for _ in range(3)]
        m = rng.dirichlet(np.ones(3))
        assert grad_check(lambda t: scalar(depth_aggregate(t, [Tensor(y) for y in ys])), m) < 1e-4
        assert grad_check(lambda t: scalar(depth_aggregate(Tensor(m), [t, Tensor(ys[1]), Tensor(ys[2])])), ys[0]) < 1e-4


class TestSchedules:
    def test_initial_values(self):
        s = ScheduleState()
        assert s.tau == 1.0 and s.lambda_ent == -0.01

    def test_epoch_ten(self):
        s = ScheduleState()
        for _ in range(10):
            s = advance_schedules(s)
        assert s.epoch == 10
        assert s.lambda_ent == 0.0
        assert s.tau == 0.9**10
        assert s.tau == pytest.approx(0.34868, abs=1e-5)

    @pytest.mark.parametrize("e", range(0, 25))
    def test_tau_is_power_law(self, e):
        assert ScheduleState(e).tau == 0.9**e

    def test_lambda_turns_positive(self):
        assert ScheduleState(20).lambda_ent == pytest.approx(0.01)
