"""Engine-level tests: op semantics, gradient checks, optimizer, checkpoint."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hocompose import autodiff as ad
from hocompose.autodiff import Tensor, check_gradient, gradients
from hocompose import nn
from hocompose.checkpoint import load_checkpoint, save_checkpoint
from hocompose.optim import Adam, NonFiniteGradient


class TestDense:
    def test_identity(self):
        x = Tensor([[1.0, 0.0]])
        out = ad.dense(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_bias_shift(self):
        out = ad.dense(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([3.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[4.0, 5.0]])

    def test_shape_mismatch_names_operands(self):
        x = Tensor(np.ones((2, 3)), name="query")
        w = Tensor(np.ones((4, 5)), name="weights0")
        with pytest.raises(ad.DimensionError, match="weights0"):
            ad.dense(x, w)

    def test_weight_gradient_matches_finite_differences(self, rng):
        x = rng.normal(size=(5, 4))

        def build(w):
            return ad.tsum(ad.dense(Tensor(x), w, Tensor(np.zeros(3))))

        assert check_gradient(build, rng.normal(size=(4, 3))) < 1e-5


class TestActivations:
    def test_softplus_symmetry_point(self):
        out = ad.softplus_beta(Tensor([0.0]), 100.0)
        assert abs(out.data[0] - np.log(2.0) / 100.0) < 1e-12

    def test_softplus_saturated(self):
        out = ad.softplus_beta(Tensor([1.0]), 100.0)
        assert abs(out.data[0] - 1.0) < 1e-9

    def test_softplus_gradient_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        ad.softplus_beta(x, 100.0).backward()
        assert abs(x.grad[0] - 0.5) < 1e-12

    def test_softplus_rejects_nonpositive_beta(self):
        with pytest.raises(ValueError):
            ad.softplus_beta(Tensor([0.0]), 0.0)

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_leaky_relu_negative(self):
        assert ad.leaky_relu(Tensor([-1.0]), 0.2).data[0] == pytest.approx(-0.2)

    def test_softmax_uniform(self):
        out = ad.softmax_lastaxis(Tensor([[0.0, 0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, 0.25)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=16))
    @settings(max_examples=50, deadline=None)
    def test_softmax_sums_to_one(self, values):
        out = ad.softmax_lastaxis(Tensor(np.asarray(values)))
        assert out.data.min() >= 0.0
        assert abs(out.data.sum() - 1.0) <= 1e-12


GRAD_CASES = [
    ("sum", lambda t: ad.tsum(t)),
    ("mean_axis", lambda t: ad.tsum(ad.tmean(t, axis=0))),
    ("exp", lambda t: ad.tsum(ad.exp(t))),
    ("log_shift", lambda t: ad.tsum(ad.log(ad.add(ad.square(t), Tensor(1.0))))),
    ("sigmoid", lambda t: ad.tsum(ad.sigmoid(t))),
    ("softplus", lambda t: ad.tsum(ad.softplus_beta(t, 100.0))),
    ("leaky", lambda t: ad.tsum(ad.leaky_relu(t, 0.2))),
    ("softmax", lambda t: ad.tsum(ad.square(ad.softmax_lastaxis(t)))),
    ("sqrt_abs", lambda t: ad.tsum(ad.sqrt(ad.add(ad.square(t), Tensor(0.1))))),
    ("norm", lambda t: ad.tsum(ad.safe_l2norm(t))),
    ("mul_bcast", lambda t: ad.tsum(ad.mul(t, ad.tmean(t, axis=-1, keepdims=True)))),
    ("concat", lambda t: ad.tsum(ad.square(ad.concat([t, t], axis=-1)))),
]


@pytest.mark.parametrize("name,build", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
@pytest.mark.parametrize("shape", [(3,), (2, 5), (4, 3, 2)])
def test_gradcheck_elementwise_ops(name, build, shape, rng):
    x0 = rng.normal(size=shape) * 0.7 + 0.05
    assert check_gradient(build, x0) < 1e-4


def test_gradcheck_matmul_and_einsum(rng):
    a0 = rng.normal(size=(4, 3))
    b = Tensor(rng.normal(size=(3, 5)))

    assert check_gradient(lambda t: ad.tsum(ad.square(ad.matmul(t, b))), a0) < 1e-5

    c = Tensor(rng.normal(size=(4, 2, 3)))
    assert (
        check_gradient(lambda t: ad.tsum(ad.square(ad.einsum("nij,jk->nik", c, t))), rng.normal(size=(3, 4)))
        < 1e-5
    )


def test_gradcheck_getitem_gather(rng):
    idx = np.array([0, 2, 2, 1])

    def build(t):
        return ad.tsum(ad.square(ad.gather_rows(t, idx)))

    assert check_gradient(build, rng.normal(size=(3, 4))) < 1e-6


class TestStopGradient:
    def test_value_passthrough(self, rng):
        v = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(ad.stop_gradient(Tensor(v)).data, v)

    def test_x_times_stopgrad_x(self):
        x = Tensor([3.0], requires_grad=True)
        ad.tsum(ad.mul(x, ad.stop_gradient(x))).backward()
        assert x.grad[0] == 3.0  # not 6

    def test_blocked_branch_leaves_grads_bit_identical(self, rng):
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 4)))

        def main_loss():
            return ad.tsum(ad.square(ad.matmul(x, w)))

        (g_ref,) = gradients(main_loss(), [w])
        blocked = ad.tsum(ad.sigmoid(ad.stop_gradient(ad.matmul(x, w))))
        (g_with,) = gradients(ad.add(main_loss(), blocked), [w])
        np.testing.assert_array_equal(g_ref, g_with)


class TestAdam:
    def test_single_step_hand_value(self):
        p = Tensor(np.array([0.0]), requires_grad=True, name="p")
        opt = Adam({"p": p}, lr=0.001)
        opt.step({"p": np.array([1.0])})
        # m_hat = 1, v_hat = 1 -> step = -lr / (1 + eps)
        expected = -0.001 / (1.0 + 1e-8)
        assert abs(p.data[0] - expected) < 1e-15

    def test_zero_gradient_keeps_parameter(self):
        p = Tensor(np.array([1.5]), requires_grad=True, name="p")
        opt = Adam({"p": p}, lr=0.01)
        opt.step({"p": np.array([0.0])})
        assert p.data[0] == 1.5

    def test_two_steps_match_scalar_oracle(self):
        # independent scalar implementation of the update rule
        lr, b1, b2, eps = 0.002, 0.9, 0.999, 1e-8
        theta, m, v = 0.3, 0.0, 0.0
        grads = [0.7, -0.2]
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        p = Tensor(np.array([0.3]), requires_grad=True, name="p")
        opt = Adam({"p": p}, lr=lr, beta1=b1, beta2=b2, eps=eps)
        for g in grads:
            opt.step({"p": np.array([g])})
        assert abs(p.data[0] - theta) < 1e-12

    def test_nonfinite_gradient_names_parameter(self):
        p = Tensor(np.zeros(2), requires_grad=True, name="skin/l0/w")
        opt = Adam({"skin/l0/w": p})
        with pytest.raises(NonFiniteGradient, match="skin/l0/w"):
            opt.step({"skin/l0/w": np.array([np.nan, 0.0])})


class TestConv:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 5)))
        k = np.zeros((2, 2, 3, 3))
        k[0, 0, 1, 1] = 1.0
        k[1, 1, 1, 1] = 1.0
        out = nn.conv3x3(x, Tensor(k))
        np.testing.assert_allclose(out.data, x.data, atol=1e-15)

    def test_ones_kernel_zero_padding(self):
        x = Tensor(np.ones((1, 4, 4)))
        out = nn.conv3x3(x, Tensor(np.ones((1, 1, 3, 3))))
        assert out.data[0, 1, 1] == 9.0
        assert out.data[0, 0, 0] == 4.0

    def test_against_naive_loop(self, rng):
        x = rng.normal(size=(2, 4, 4))
        k = rng.normal(size=(3, 2, 3, 3))
        out = nn.conv3x3(Tensor(x), Tensor(k)).data
        pad = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ref = np.zeros((3, 4, 4))
        for co in range(3):
            for i in range(4):
                for j in range(4):
                    ref[co, i, j] = (pad[:, i : i + 3, j : j + 3] * k[co]).sum()
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ad.DimensionError):
            nn.conv3x3(Tensor(rng.normal(size=(2, 4, 4))), Tensor(rng.normal(size=(3, 5, 3, 3))))

    def test_gradients(self, rng):
        x = rng.normal(size=(2, 3, 3))
        k0 = rng.normal(size=(2, 2, 3, 3))
        xt = Tensor(x)
        assert check_gradient(lambda t: ad.tsum(ad.square(nn.conv3x3(xt, t))), k0) < 1e-5
        kt = Tensor(k0)
        assert check_gradient(lambda t: ad.tsum(ad.square(nn.conv3x3(t, kt))), x) < 1e-5


class TestUpsample:
    def test_constant_grid(self):
        out = nn.bilinear_upsample2x(Tensor(np.full((1, 3, 3), 5.0)))
        np.testing.assert_allclose(out.data, 5.0)

    def test_degenerate_1x1(self):
        out = nn.bilinear_upsample2x(Tensor(np.full((1, 1, 1), 2.5)))
        assert out.data.shape == (1, 2, 2)
        np.testing.assert_allclose(out.data, 2.5)

    def test_2x2_ramp_closed_form(self):
        # align_corners=False: inner samples mix 0.75/0.25
        x = np.array([[[0.0, 1.0], [2.0, 3.0]]])
        out = nn.bilinear_upsample2x(Tensor(x)).data[0]
        expected = np.array(
            [
                [0.0, 0.25, 0.75, 1.0],
                [0.5, 0.75, 1.25, 1.5],
                [1.5, 1.75, 2.25, 2.5],
                [2.0, 2.25, 2.75, 3.0],
            ]
        )
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_gradient(self, rng):
        x0 = rng.normal(size=(2, 3, 4))
        assert check_gradient(lambda t: ad.tsum(ad.square(nn.bilinear_upsample2x(t))), x0) < 1e-5


class TestAdain:
    def _affine(self, c, scale=1.0, bias=0.0):
        w = Tensor(np.zeros((4, 2 * c)))
        b = Tensor(np.concatenate([np.full(c, scale), np.full(c, bias)]))
        return w, b

    def test_normalizes_to_unit_stats(self, rng):
        x = Tensor(rng.normal(size=(3, 8, 8)) * 4 + 2)
        w, b = self._affine(3)
        out = nn.adain(x, Tensor(np.zeros(4)), w, b).data
        assert np.allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-10)
        assert np.allclose(out.std(axis=(1, 2)), 1.0, atol=1e-2)

    def test_constant_channel_returns_bias(self):
        x = Tensor(np.full((2, 4, 4), 7.0))
        w, b = self._affine(2, scale=3.0, bias=1.25)
        out = nn.adain(x, Tensor(np.zeros(4)), w, b).data
        np.testing.assert_allclose(out, 1.25, atol=1e-12)

    def test_gradient_wrt_latent(self, rng):
        x = Tensor(rng.normal(size=(2, 4, 4)))
        w = Tensor(rng.normal(size=(4, 4)) * 0.3)
        b = Tensor(np.concatenate([np.ones(2), np.zeros(2)]))

        def build(z):
            return ad.tsum(ad.square(nn.adain(x, z, w, b)))

        assert check_gradient(build, rng.normal(size=4)) < 1e-4


class TestPositionalEncoding:
    def test_at_origin(self):
        enc = nn.positional_encoding(np.zeros((1, 3)))[0]
        assert enc.shape == (27,)
        np.testing.assert_array_equal(enc[:3], 0.0)
        sin_cols = np.concatenate([np.arange(3 + 6 * k, 6 + 6 * k) for k in range(4)])
        cos_cols = sin_cols + 3
        np.testing.assert_array_equal(enc[sin_cols], 0.0)
        np.testing.assert_array_equal(enc[cos_cols], 1.0)

    def test_half_period_point(self):
        enc = nn.positional_encoding(np.array([[0.5, 0.0, 0.0]]))[0]
        assert enc[3] == pytest.approx(1.0)  # sin(pi/2) for k=0, x axis
        assert enc[6] == pytest.approx(0.0, abs=1e-15)  # cos(pi/2)

    def test_length_27(self, rng):
        assert nn.positional_encoding(rng.normal(size=(5, 3))).shape == (5, 27)

    def test_jacobian_matches_fd(self, rng):
        x = rng.normal(size=(4, 3)) * 0.5
        jac = nn.positional_encoding_jacobian(x)
        h = 1e-6
        for axis in range(3):
            dx = np.zeros(3)
            dx[axis] = h
            fd = (nn.positional_encoding(x + dx) - nn.positional_encoding(x - dx)) / (2 * h)
            np.testing.assert_allclose(jac[:, axis, :], fd, atol=1e-6)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path, rng):
        arrays = {
            "gen/conv0": rng.normal(size=(4, 3, 3, 3)),
            "codes/z": rng.normal(size=(5, 64)),
            "scalar/step": np.array([3.0]),
        }
        p = tmp_path / "model.ncho"
        save_checkpoint(p, arrays)
        first = p.read_bytes()
        loaded = load_checkpoint(p)
        assert set(loaded) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])
        save_checkpoint(p, loaded)
        assert p.read_bytes() == first

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ncho"
        p.write_bytes(b"XXXX" + b"\x00" * 16)
        from hocompose.checkpoint import CheckpointError

        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)


def test_forward_deterministic(rng):
    bag = nn.ParamBag()
    mlp = nn.MLP(bag, "m", 7, (16, 16, 3), np.random.default_rng(5), skip_at=2)
    x = rng.normal(size=(11, 7))
    a = mlp(Tensor(x)).data
    b = mlp(Tensor(x)).data
    np.testing.assert_array_equal(a, b)


def test_mlp_value_path_matches_graph(rng):
    bag = nn.ParamBag()
    mlp = nn.MLP(bag, "m", 7, (16, 16, 3), np.random.default_rng(5), skip_at=2)
    x = rng.normal(size=(11, 7))
    graph = mlp(Tensor(x)).data
    value, _ = nn.mlp_value(mlp.layers, 2, x, "linear")
    np.testing.assert_array_equal(graph, value)


def test_mlp_jacobian_carry_matches_fd(rng):
    bag = nn.ParamBag()
    mlp = nn.MLP(bag, "m", 3, (16, 16, 1), np.random.default_rng(7))
    x = rng.normal(size=(6, 3)) * 0.5
    jac_in = np.broadcast_to(np.eye(3), (6, 3, 3)).copy()
    _, jac = nn.mlp_value_and_input_jac(mlp.layers, None, x, jac_in, "linear")
    h = 1e-5
    for axis in range(3):
        dx = np.zeros(3)
        dx[axis] = h
        fp, _ = nn.mlp_value(mlp.layers, None, x + dx, "linear")
        fm, _ = nn.mlp_value(mlp.layers, None, x - dx, "linear")
        np.testing.assert_allclose(jac[:, axis, 0], ((fp - fm) / (2 * h))[:, 0], atol=1e-7)
