import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import GRAD_TOL, away_from, far_from_relu6_kinks, gradient_errors, ir_params
from mobile_iris import tensor_nn as nn
from mobile_iris.errors import DimensionError, StateError
from mobile_iris.tensor_nn import LayerSpec, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_identity_scalar(self):
        out = nn.conv2d(np.array([[[5.0]]]), np.ones((1, 1, 1, 1)), np.zeros(1))
        assert out.data.tolist() == [[[5.0]]]

    def test_all_ones_sum(self):
        out = nn.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1) and out.data[0, 0, 0] == 9

    def test_stem_shape(self):
        out = nn.conv2d(np.zeros((3, 224, 224), np.float32), np.zeros((32, 3, 3, 3), np.float32), stride=2, padding=1)
        assert out.shape == (32, 112, 112)

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(4, 2, 3, 3\)"):
            nn.conv2d(np.zeros((3, 5, 5)), np.zeros((4, 2, 3, 3)))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(DimensionError):
            nn.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 5, 5)))

    def test_matches_direct_loops(self, rng):
        x = rng.standard_normal((2, 6, 7))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = nn.conv2d(x, w, b, stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    ref = np.sum(xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[o]
                    assert out[o, i, j] == pytest.approx(ref, abs=1e-12)

    def test_batched_equals_single(self, rng):
        x = rng.standard_normal((3, 2, 5, 5))
        w = rng.standard_normal((4, 2, 3, 3))
        batched = nn.conv2d(x, w, padding=1).data
        for n in range(3):
            np.testing.assert_array_equal(batched[n], nn.conv2d(x[n], w, padding=1).data)

    @settings(max_examples=40, deadline=None)
    @given(
        h=st.integers(1, 12),
        w=st.integers(1, 12),
        k=st.integers(1, 4),
        s=st.integers(1, 3),
        p=st.integers(0, 2),
    )
    def test_output_shape_formula(self, h, w, k, s, p):
        if k > h + 2 * p or k > w + 2 * p:
            return
        out = nn.conv2d(np.zeros((1, h, w)), np.zeros((2, 1, k, k)), stride=s, padding=p)
        assert out.shape == (2, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


class TestDepthwise:
    def test_per_channel_scalar(self):
        x = np.stack([np.ones((2, 2)), 2 * np.ones((2, 2))])
        w = np.array([2.0, 3.0]).reshape(2, 1, 1, 1)
        out = nn.depthwise_conv2d(x, w).data
        assert (out[0] == 2).all() and (out[1] == 6).all()

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((3, 5, 5))
        w = np.zeros((3, 1, 3, 3))
        w[:, 0, 1, 1] = 1
        np.testing.assert_array_equal(nn.depthwise_conv2d(x, w, padding=1).data, x)

    def test_shape(self):
        assert nn.depthwise_conv2d(np.zeros((3, 8, 8)), np.zeros((3, 1, 3, 3)), stride=2, padding=1).shape == (3, 4, 4)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            nn.depthwise_conv2d(np.zeros((3, 4, 4)), np.zeros((2, 1, 3, 3)))

    def test_matches_grouped_dense_conv(self, rng):
        x = rng.standard_normal((3, 6, 6))
        w = rng.standard_normal((3, 1, 3, 3))
        out = nn.depthwise_conv2d(x, w, stride=2, padding=1).data
        for c in range(3):
            ref = nn.conv2d(x[c : c + 1], w[c : c + 1], stride=2, padding=1).data[0]
            np.testing.assert_allclose(out[c], ref, atol=1e-12)


class TestConvTranspose:
    def test_scalar(self):
        out = nn.conv_transpose2d(np.array([[[3.0]]]), np.array([[[[2.0]]]]))
        assert out.data.tolist() == [[[6.0]]]

    def test_decoder_upsample_shape(self):
        out = nn.conv_transpose2d(np.zeros((16, 112, 112), np.float32), np.zeros((16, 8, 4, 4), np.float32), stride=2, padding=1)
        assert out.shape == (8, 224, 224)

    def test_negative_size(self):
        with pytest.raises(DimensionError):
            nn.conv_transpose2d(np.zeros((1, 1, 1)), np.zeros((1, 1, 1, 1)), padding=2)

    def test_adjoint_example(self, rng):
        u = rng.standard_normal((1, 4, 4)).astype(np.float32)
        w = rng.standard_normal((1, 1, 3, 3)).astype(np.float32)
        v = rng.standard_normal(nn.conv2d(u, w).shape).astype(np.float32)
        lhs = float(np.sum(nn.conv2d(u, w).data * v))
        rhs = float(np.sum(u * nn.conv_transpose2d(v, w).data))
        assert abs(lhs - rhs) < 1e-6 * max(1.0, abs(lhs))

    @settings(max_examples=30, deadline=None)
    @given(
        size=st.integers(3, 9),
        k=st.integers(1, 4),
        s=st.integers(1, 3),
        p=st.integers(0, 1),
        seed=st.integers(0, 10_000),
    )
    def test_adjoint_property(self, size, k, s, p, seed):
        if k > size + 2 * p:
            return
        r = np.random.default_rng(seed)
        u = r.standard_normal((2, size, size)).astype(np.float32)
        w = r.standard_normal((3, 2, k, k)).astype(np.float32)
        y = nn.conv2d(u, w, stride=s, padding=p)
        v = r.standard_normal(y.shape).astype(np.float32)
        # output_padding recovers sizes that the floor in conv2d dropped
        op = size - nn.conv_transpose_output_size(y.shape[1], k, s, p)
        back = nn.conv_transpose2d(v, w, stride=s, padding=p, output_padding=op)
        lhs = float(np.sum(y.data.astype(np.float64) * v))
        rhs = float(np.sum(u.astype(np.float64) * back.data))
        scale = float(np.sum(np.abs(y.data * v))) + 1.0
        assert abs(lhs - rhs) <= 1e-6 * scale

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(1, 10), k=st.integers(1, 5), s=st.integers(1, 3), p=st.integers(0, 2), op=st.integers(0, 1))
    def test_output_shape_formula(self, h, k, s, p, op):
        expected = (h - 1) * s - 2 * p + k + op
        if expected < 1 or op >= s:
            return
        out = nn.conv_transpose2d(np.zeros((1, h, h)), np.zeros((1, 1, k, k)), stride=s, padding=p, output_padding=op)
        assert out.shape == (1, expected, expected)


class TestActivations:
    def test_relu6_examples(self):
        assert nn.relu6(np.array([-1.0, 3.0, 7.0])).data.tolist() == [0, 3, 6]

    def test_relu6_idempotent(self, rng):
        x = rng.standard_normal(1000) * 10
        once = nn.relu6(x).data
        np.testing.assert_array_equal(nn.relu6(once).data, once)

    def test_sigmoid_half_at_zero(self):
        assert nn.sigmoid(np.zeros(3)).data.tolist() == [0.5, 0.5, 0.5]

    def test_sigmoid_finite_at_extremes(self):
        y = nn.sigmoid(np.array([-1e4, 1e4])).data
        assert np.isfinite(y).all() and y[0] == 0 and y[1] == 1


class TestBatchnorm:
    def test_identity_infer(self, rng):
        x = rng.standard_normal((2, 3, 3))
        out = nn.batchnorm(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), mode="infer").data
        np.testing.assert_allclose(out, x / np.sqrt(1 + nn.BN_EPS), atol=1e-12)

    def test_affine_infer(self):
        out = nn.batchnorm(np.full((1, 1, 1), 0.5), 2 * np.ones(1), np.ones(1), np.zeros(1), np.ones(1) - nn.BN_EPS)
        assert out.data[0, 0, 0] == pytest.approx(2.0)

    def test_constant_channel_train(self):
        rm, rv = np.zeros(2), np.ones(2)
        out = nn.batchnorm(np.full((2, 4, 4), 3.0), np.ones(2), np.array([0.5, -1.0]), rm, rv, mode="train").data
        np.testing.assert_allclose(out[0], 0.5)
        np.testing.assert_allclose(out[1], -1.0)

    def test_running_stats_update(self):
        x = np.arange(8.0).reshape(1, 2, 4)
        rm, rv = np.zeros(1), np.ones(1)
        nn.batchnorm(x, np.ones(1), np.zeros(1), rm, rv, mode="train")
        assert rm[0] == pytest.approx(0.1 * 3.5)
        assert rv[0] == pytest.approx(0.9 + 0.1 * np.var(np.arange(8.0), ddof=1))

    def test_infer_does_not_touch_buffers(self):
        rm, rv = np.zeros(1), np.ones(1)
        nn.batchnorm(np.ones((1, 2, 2)), np.ones(1), np.zeros(1), rm, rv)
        assert rm[0] == 0 and rv[0] == 1

    def test_zero_spatial(self):
        with pytest.raises(DimensionError):
            nn.batchnorm(np.zeros((1, 0, 3)), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1))

    def test_param_length(self):
        with pytest.raises(DimensionError):
            nn.batchnorm(np.zeros((2, 2, 2)), np.ones(3), np.zeros(2), np.zeros(2), np.ones(2))


class TestInvertedResidual:
    def test_zero_weights_residual_only(self, rng):
        spec = LayerSpec("inverted_residual", 4, 4, k=3, s=1, t=6)
        x = rng.standard_normal((4, 5, 5))
        np.testing.assert_array_equal(nn.inverted_residual(x, spec, ir_params(spec, rng, zero=True)).data, x)

    def test_expanded_width(self):
        spec = LayerSpec("inverted_residual", 16, 16, k=3, t=6)
        assert spec.hidden_channels == 96
        assert nn.inverted_residual_param_shapes(spec)["expand.weight"] == (96, 16, 1, 1)

    def test_stride_two_no_residual(self, rng):
        spec = LayerSpec("inverted_residual", 4, 4, k=3, s=2, t=2)
        assert not spec.has_residual
        x = rng.standard_normal((4, 8, 8))
        assert nn.inverted_residual(x, spec, ir_params(spec, rng, zero=True)).shape == (4, 4, 4)
        assert (nn.inverted_residual(x, spec, ir_params(spec, rng, zero=True)).data == 0).all()

    def test_residual_rule(self):
        assert LayerSpec("inverted_residual", 8, 8, k=3, s=1, t=6).has_residual
        assert not LayerSpec("inverted_residual", 8, 16, k=3, s=1, t=6).has_residual

    def test_t1_has_no_expansion(self):
        assert "expand.weight" not in nn.inverted_residual_param_shapes(LayerSpec("inverted_residual", 8, 8, k=3, t=1))

    def test_with_batchnorm_buffers(self, rng):
        spec = LayerSpec("inverted_residual", 3, 5, k=3, t=2)
        params = ir_params(spec, rng, bn=True)
        buffers = {}
        for name in params:
            if name.endswith(".gamma"):
                prefix = name[: -len(".gamma")]
                buffers[f"{prefix}.running_mean"] = np.zeros(params[name].shape)
                buffers[f"{prefix}.running_var"] = np.ones(params[name].shape)
        out = nn.inverted_residual(rng.standard_normal((2, 3, 6, 6)), spec, params, buffers, mode="train")
        assert out.shape == (2, 5, 6, 6)
        assert any(not (v == 0).all() for k, v in buffers.items() if k.endswith("running_mean"))

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            LayerSpec("inverted_residual", 4, 4, k=0)
        with pytest.raises(ValueError):
            LayerSpec("inverted_residual", 4, 4, t=0)


class TestGradients:
    """Analytic vs central differences, double precision, step 1e-3, five instances per op."""

    INSTANCES = 5

    def _check(self, fn, arrays, rng):
        errs = gradient_errors(fn, arrays, rng)
        assert max(errs.values()) < GRAD_TOL, errs

    def test_conv2d(self, rng):
        for i in range(self.INSTANCES):
            s, p = (1, 0) if i % 2 else (2, 1)
            arrays = {"x": rng.standard_normal((2, 5, 5)), "w": rng.standard_normal((3, 2, 3, 3)), "b": rng.standard_normal(3)}
            self._check(lambda t, s=s, p=p: nn.conv2d(t["x"], t["w"], t["b"], stride=s, padding=p), arrays, rng)

    def test_depthwise(self, rng):
        for i in range(self.INSTANCES):
            s = 1 + i % 2
            arrays = {"x": rng.standard_normal((3, 5, 5)), "w": rng.standard_normal((3, 1, 3, 3))}
            self._check(lambda t, s=s: nn.depthwise_conv2d(t["x"], t["w"], stride=s, padding=1), arrays, rng)

    def test_conv_transpose(self, rng):
        for i in range(self.INSTANCES):
            arrays = {"x": rng.standard_normal((2, 3, 3)), "w": rng.standard_normal((2, 3, 4, 4)), "b": rng.standard_normal(3)}
            self._check(lambda t: nn.conv_transpose2d(t["x"], t["w"], t["b"], stride=2, padding=1), arrays, rng)

    def test_batchnorm_train(self, rng):
        for _ in range(self.INSTANCES):
            arrays = {"x": rng.standard_normal((2, 3, 3, 3)), "g": rng.standard_normal(3), "b": rng.standard_normal(3)}
            self._check(
                lambda t: nn.batchnorm(t["x"], t["g"], t["b"], np.zeros(3), np.ones(3), mode="train"), arrays, rng
            )

    def test_batchnorm_infer(self, rng):
        for _ in range(self.INSTANCES):
            rm, rv = rng.standard_normal(2), rng.random(2) + 0.5
            arrays = {"x": rng.standard_normal((2, 3, 3)), "g": rng.standard_normal(2), "b": rng.standard_normal(2)}
            self._check(lambda t, rm=rm, rv=rv: nn.batchnorm(t["x"], t["g"], t["b"], rm, rv), arrays, rng)

    def test_relu6(self, rng):
        for _ in range(self.INSTANCES):
            x = away_from(rng.uniform(-3, 9, size=(4, 4)), (0.0, 6.0), 0.05, rng)
            self._check(lambda t: nn.relu6(t["x"]), {"x": x}, rng)

    def test_sigmoid(self, rng):
        for _ in range(self.INSTANCES):
            self._check(lambda t: nn.sigmoid(t["x"]), {"x": rng.standard_normal((3, 4)) * 3}, rng)

    def test_inverted_residual(self, rng):
        spec = LayerSpec("inverted_residual", 2, 2, k=3, s=1, t=2)
        done = 0
        while done < self.INSTANCES:
            params = {k: v.data for k, v in ir_params(spec, rng).items()}
            x = rng.standard_normal((2, 4, 4))
            if not far_from_relu6_kinks(spec, params, x, margin=0.02):
                continue
            arrays = {"x": x, **params}
            self._check(lambda t: nn.inverted_residual(t["x"], spec, {k: v for k, v in t.items() if k != "x"}), arrays, rng)
            done += 1

    def test_two_layer_net(self, rng):
        done = 0
        while done < self.INSTANCES:
            x = rng.standard_normal((2, 5, 5))
            w1, w2 = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
            pre = nn.conv2d(x, w1, padding=1).data
            if np.min(np.minimum(np.abs(pre), np.abs(pre - 6))) < 0.05:
                continue
            self._check(
                lambda t: nn.sigmoid(nn.conv2d(nn.relu6(nn.conv2d(t["x"], t["w1"], padding=1)), t["w2"])),
                {"x": x, "w1": w1, "w2": w2},
                rng,
            )
            done += 1


class TestBackward:
    def test_linear(self, rng):
        x = rng.standard_normal(5)
        w = Tensor(rng.standard_normal(5), requires_grad=True)
        (g,) = nn.backward(nn.tsum(nn.mul(w, x)), [w])
        np.testing.assert_array_equal(g, x)

    def test_constant_loss(self):
        w = Tensor(np.ones(3), requires_grad=True)
        (g,) = nn.backward(nn.tsum(nn.mul(w, np.zeros(3))), [w])
        assert (g == 0).all()

    def test_unused_param_gets_zeros(self):
        w = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        _, g = nn.backward(nn.tsum(w), [w, unused])
        assert g.shape == (2, 2) and (g == 0).all()

    def test_without_forward(self):
        with pytest.raises(StateError):
            nn.backward(Tensor(np.array(1.0), requires_grad=True))

    def test_shared_input_accumulates(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        (g,) = nn.backward(nn.tsum(nn.mul(w, w)), [w])
        assert g[0] == 4.0

    def test_no_grad_records_nothing(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with nn.no_grad():
            out = nn.tsum(nn.mul(w, 3.0))
        with pytest.raises(StateError):
            nn.backward(out)

    def test_finite_everywhere(self, rng):
        x = Tensor(rng.standard_normal((2, 6, 6)) * 50, requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        out = nn.sigmoid(nn.relu6(nn.conv2d(x, w, padding=1)))
        grads = nn.backward(nn.tsum(out), [x, w])
        assert np.isfinite(out.data).all() and all(np.isfinite(g).all() for g in grads)

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        a = nn.conv2d(x, w, padding=1).data
        b = nn.conv2d(x.copy(), w.copy(), padding=1).data
        assert a.tobytes() == b.tobytes()


class TestAdam:
    def test_zero_gradient(self):
        p = Tensor(np.arange(3.0))
        state = nn.AdamState.for_params([p])
        nn.adam_step([p], [np.zeros(3)], state)
        assert p.data.tolist() == [0, 1, 2] and state.step_count == 1

    def test_first_step_moves_lr_sign(self, rng):
        g = rng.standard_normal(10)
        p = Tensor(np.zeros(10))
        state = nn.AdamState.for_params([p])
        nn.adam_step([p], [g], state, lr=0.01)
        np.testing.assert_allclose(p.data, -0.01 * np.sign(g), atol=1e-6)

    def test_default_lr(self):
        import inspect

        assert inspect.signature(nn.adam_step).parameters["lr"].default == 1e-4

    def test_defaults(self):
        s = nn.AdamState()
        assert (s.beta1, s.beta2, s.epsilon) == (0.9, 0.999, 1e-8)

    def test_step_count_increments(self):
        p = Tensor(np.zeros(2))
        state = nn.AdamState.for_params([p])
        for i in range(1, 4):
            nn.adam_step([p], [np.ones(2)], state)
            assert state.step_count == i
            assert state.first_moment[0].shape == p.shape

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(2))
        with pytest.raises(DimensionError):
            nn.adam_step([p], [np.zeros(3)], nn.AdamState.for_params([p]))

    def test_nonpositive_lr(self):
        p = Tensor(np.zeros(2))
        with pytest.raises(ValueError):
            nn.adam_step([p], [np.zeros(2)], nn.AdamState.for_params([p]), lr=0)
