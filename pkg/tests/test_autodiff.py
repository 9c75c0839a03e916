import numpy as np
import pytest

from bars import autodiff as ad
from bars.autodiff import Parameter, Tensor, grad_check

TOL = 1e-4


def scalar(t, seed=0):
    """Contract ``t`` with a fixed random tensor so every output entry matters."""
    r = np.random.default_rng(seed).standard_normal(t.shape)
    return ad.sum_(ad.mul(t, Tensor(r)))


class TestForward:
    def test_add(self):
        np.testing.assert_array_equal(ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])

    def test_softmax_uniform(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_identity_kernel_conv(self, rng):
        x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1
        np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(w), None, 1, 1).data, x)

    def test_conv_matches_direct_loop(self, rng):
        x = rng.standard_normal((1, 2, 5, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        with ad.default_dtype(np.float64):
            out = ad.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for o in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[0, o, i, j] = (xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum()
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_cross_entropy_uniform_logits(self):
        loss = ad.cross_entropy(Tensor(np.zeros((4, 10))), np.arange(4))
        assert loss.item() == pytest.approx(np.log(10), rel=1e-6)

    def test_shape_mismatch_names_op(self):
        with pytest.raises(ValueError, match="add"):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        with pytest.raises(ValueError, match="linear"):
            ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_default_dtype_is_float32(self):
        assert Tensor([1.0]).dtype == np.float32
        with ad.default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64

    def test_batchnorm_updates_running_stats_in_train_mode_only(self, rng):
        x = Tensor(rng.standard_normal((4, 2, 3, 3)))
        rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
        ad.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False)
        assert np.all(rm == 0) and np.all(rv == 1)
        ad.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
        assert not np.all(rm == 0)

    def test_spatial_shift_replicates_edge(self):
        x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
        out = ad.spatial_shift(x, 1, 1).data[0, 0]
        np.testing.assert_array_equal(out, [[4, 5, 5], [7, 8, 8], [7, 8, 8]])


class TestSignSTE:
    def test_forward_sign_of_zero_is_positive(self):
        np.testing.assert_array_equal(ad.sign_ste(Tensor([-2.0, 0.0, 0.3])).data, [-1, 1, 1])

    def test_clipped_gradient(self):
        x = Tensor([-2.0, -0.5, 0.5, 2.0], requires_grad=True)
        ad.sum_(ad.sign_ste(x, clip=True)).backward()
        np.testing.assert_array_equal(x.grad, [0, 1, 1, 0])

    def test_plain_gradient(self):
        x = Tensor([-2.0, 0.5], requires_grad=True)
        ad.sum_(ad.sign_ste(x, clip=False)).backward()
        np.testing.assert_array_equal(x.grad, [1, 1])


class TestBackwardMechanics:
    def test_fanout_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        ad.sum_(ad.add(ad.mul(x, x), x)).backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert not y.requires_grad

    def test_index_gradient_scatters(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = ad.add(ad.sum_(ad.index(x, (0, slice(1, 3)))), ad.sum_(ad.index(x, (slice(None), 2))))
        out.backward()
        np.testing.assert_array_equal(x.grad, [[0, 1, 2], [0, 0, 1]])

    def test_parameter_survives_freezing(self):
        p = Parameter(np.zeros(3))
        p.requires_grad = False
        assert isinstance(p, Tensor) and isinstance(p, Parameter)


class TestGradCheck:
    """Central-difference checks in 64-bit mode."""

    def check(self, fn, x, **kw):
        assert grad_check(fn, x, **kw) < TOL

    def test_elementwise(self, rng):
        x = rng.standard_normal((3, 4))
        self.check(lambda t: scalar(ad.mul(ad.add(t, t), t)), x)
        self.check(lambda t: scalar(ad.sub(ad.scale(t, 2.5), ad.exp(t))), x)
        self.check(lambda t: scalar(ad.log(ad.add(ad.mul(t, t), Tensor(np.ones((3, 4)))))), x)
        self.check(lambda t: scalar(ad.power(ad.abs_(t), 1.5)), x + np.sign(x) * 0.1)

    def test_reductions_and_reshape(self, rng):
        x = rng.standard_normal((2, 3, 4))
        self.check(lambda t: scalar(ad.sum_(t, axis=1)), x)
        self.check(lambda t: scalar(ad.mean(t, axis=(0, 2), keepdims=True)), x)
        self.check(lambda t: scalar(ad.reshape(t, (6, 4))), x)

    def test_softmax_log_softmax_cross_entropy(self, rng):
        x = rng.standard_normal((4, 5))
        self.check(lambda t: scalar(ad.softmax(t, axis=-1)), x)
        self.check(lambda t: scalar(ad.log_softmax(t, axis=1)), x)
        self.check(lambda t: ad.cross_entropy(t, np.array([0, 4, 2, 2])), x)

    def test_matmul_linear(self, rng):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((5, 4))
        b = rng.standard_normal(5)
        self.check(lambda t: scalar(ad.matmul(t, Tensor(w.T))), x)
        self.check(lambda t: scalar(ad.linear(t, Tensor(w), Tensor(b))), x)
        self.check(lambda t: scalar(ad.linear(Tensor(x), t, Tensor(b))), w)
        self.check(lambda t: scalar(ad.linear(Tensor(x), Tensor(w), t)), b)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_conv2d(self, rng, stride, padding):
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        self.check(lambda t: scalar(ad.conv2d(t, Tensor(w), Tensor(b), stride, padding)), x)
        self.check(lambda t: scalar(ad.conv2d(Tensor(x), t, Tensor(b), stride, padding)), w)
        self.check(lambda t: scalar(ad.conv2d(Tensor(x), Tensor(w), t, stride, padding)), b)

    @pytest.mark.parametrize("training", [True, False])
    def test_batchnorm(self, rng, training):
        x = rng.standard_normal((4, 3, 2, 2))
        g = rng.uniform(0.5, 1.5, 3)
        b = rng.standard_normal(3)

        def bn(xt, gt, bt):
            return ad.batchnorm2d(xt, gt, bt, np.full(3, 0.1), np.full(3, 1.3), training)

        self.check(lambda t: scalar(bn(t, Tensor(g), Tensor(b))), x)
        self.check(lambda t: scalar(bn(Tensor(x), t, Tensor(b))), g)
        self.check(lambda t: scalar(bn(Tensor(x), Tensor(g), t)), b)

    def test_pooling_shift_concat_index(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        self.check(lambda t: scalar(ad.avgpool2x2(t)), x)
        self.check(lambda t: scalar(ad.global_avgpool(t)), x)
        self.check(lambda t: scalar(ad.spatial_shift(t, 1, 1)), x)
        self.check(lambda t: scalar(ad.concat([t, ad.scale(t, 2.0)], axis=1)), x)
        self.check(lambda t: scalar(ad.index(t, (slice(None), slice(1, 3)))), x)
        self.check(lambda t: scalar(ad.fit_channels(t, 5)), x)
        self.check(lambda t: scalar(ad.fit_channels(t, 2)), x)
