"""Engine contract: tensor type, graph building, evaluation, backward."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s4t.tensor_core import (GraphBuilder, ShapeError, Tensor, backward,
                             finite_diff_check, forward_eval, forward_named,
                             resolve_dtype)


class TestTensor:
    def test_copies_and_freezes(self):
        a = np.ones((2, 3))
        t = Tensor(a)
        a[0, 0] = 5.0
        assert t.data[0, 0] == 1.0
        with pytest.raises(ValueError):
            t.data[0, 0] = 2.0

    def test_dtype_rules(self):
        assert Tensor(np.ones(3, dtype=np.float32)).dtype == np.float32
        assert Tensor([1, 2, 3]).dtype == np.float64
        assert Tensor([1.0], dtype="f32").dtype == np.float32
        with pytest.raises(ValueError):
            resolve_dtype("f16")

    def test_finite_flag(self):
        assert Tensor([1.0, 2.0]).all_finite
        assert not Tensor([1.0, np.inf]).all_finite


class TestForward:
    def test_identity_linear_layer(self):
        b = GraphBuilder()
        x = b.input("x", (1, 2))
        w = b.param("w", (2, 2))
        bias = b.param("b", (2,))
        b.output("y", x @ w + bias)
        g = b.finalize()
        out = forward_named(g, {"x": np.array([[1.0, 2.0]]),
                                "w": np.eye(2), "b": np.zeros(2)})
        np.testing.assert_array_equal(out["y"], [[1.0, 2.0]])

    def test_softmax_of_zeros_is_uniform(self):
        b = GraphBuilder()
        x = b.input("x", (2,))
        y = b.softmax(x)
        g = b.finalize()
        vals = forward_eval(g, {"x": np.zeros(2)})
        np.testing.assert_allclose(vals[y.idx], [0.5, 0.5], rtol=0, atol=0)

    def test_matmul_identity(self):
        b = GraphBuilder()
        a = b.input("a", (2, 2))
        i = b.input("i", (2, 2))
        y = a @ i
        g = b.finalize()
        vals = forward_eval(g, {"a": np.array([[1.0, 2.0], [3.0, 4.0]]),
                                "i": np.eye(2)})
        np.testing.assert_array_equal(vals[y.idx], [[1.0, 2.0], [3.0, 4.0]])

    def test_shape_mismatch_names_node_at_build_time(self):
        b = GraphBuilder()
        x = b.param("weights", (2, 3))
        y = b.param("other", (4, 5))
        with pytest.raises(ShapeError, match="weights"):
            _ = x @ y

    def test_binding_shape_mismatch_names_leaf(self):
        b = GraphBuilder()
        b.input("x", (2, 3))
        g = b.finalize()
        with pytest.raises(ShapeError, match="x"):
            forward_eval(g, {"x": np.zeros((3, 2))})

    def test_missing_binding_raises(self):
        b = GraphBuilder()
        b.input("needed", (1,))
        g = b.finalize()
        with pytest.raises(KeyError, match="needed"):
            forward_eval(g, {})

    def test_non_finite_intermediate_names_node(self):
        b = GraphBuilder()
        x = b.input("x", (2,))
        y = b.log(x)
        g = b.finalize()
        with pytest.raises(FloatingPointError):
            forward_eval(g, {"x": np.array([0.0, 1.0])})
        # same bindings pass with the check off
        vals = forward_eval(g, {"x": np.array([0.0, 1.0])}, check_finite=False)
        assert np.isneginf(vals[y.idx][0])

    def test_purity_bit_identical_and_no_mutation(self):
        rng = np.random.default_rng(3)
        b = GraphBuilder()
        x = b.input("x", (3, 4))
        w = b.param("w", (4, 4))
        y = b.layer_norm(b.softmax(x @ w))
        g = b.finalize()
        bind = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 4))}
        saved = {k: v.copy() for k, v in bind.items()}
        v1 = forward_eval(g, bind)
        v2 = forward_eval(g, bind)
        assert v1[y.idx].tobytes() == v2[y.idx].tobytes()
        for k in bind:
            assert bind[k].tobytes() == saved[k].tobytes()

    def test_inputs_params_call_style(self):
        b = GraphBuilder()
        x = b.input("x", (2,))
        w = b.param("w", (2,))
        y = x * w
        g = b.finalize()
        vals = forward_eval(g, inputs={"x": np.array([1.0, 2.0])},
                            params={"w": np.array([3.0, 4.0])})
        np.testing.assert_array_equal(vals[y.idx], [3.0, 8.0])

    def test_duplicate_leaf_name_rejected(self):
        b = GraphBuilder()
        b.param("w", (2,))
        with pytest.raises(ValueError, match="w"):
            b.input("w", (3,))


class TestBackward:
    def test_square_at_three_gives_six(self):
        b = GraphBuilder()
        x = b.param("x", ())
        loss = b.square(x)
        g = b.finalize()
        gs = backward(g, forward_eval(g, {"x": np.array(3.0)}), loss)
        assert gs["x"] == pytest.approx(6.0)

    def test_rectifier_blocks_negative_preactivation(self):
        b = GraphBuilder()
        x = b.param("x", ())
        loss = b.relu(x)
        g = b.finalize()
        gs = backward(g, forward_eval(g, {"x": np.array(-2.0)}), loss)
        assert gs["x"] == 0.0

    def test_non_scalar_loss_rejected(self):
        b = GraphBuilder()
        x = b.param("x", (3,))
        y = b.square(x)
        g = b.finalize()
        with pytest.raises(ValueError, match="scalar"):
            backward(g, forward_eval(g, {"x": np.ones(3)}), y)

    def test_unreachable_parameter_zero_and_flagged(self):
        b = GraphBuilder()
        a = b.param("a", (2,))
        b.param("spare", (3,))
        loss = b.square(a).sum()
        g = b.finalize()
        gs = backward(g, forward_eval(g, {"a": np.ones(2), "spare": np.ones(3)}),
                      loss)
        np.testing.assert_array_equal(gs["spare"], np.zeros(3))
        assert gs.unreachable() == ["spare"]
        assert gs.reached["a"]

    def test_accepts_bindings_dict(self):
        b = GraphBuilder()
        x = b.param("x", ())
        loss = b.square(x)
        g = b.finalize()
        gs = backward(g, {"x": np.array(3.0)}, loss)
        assert gs["x"] == pytest.approx(6.0)

    def test_wrt_inputs(self):
        b = GraphBuilder()
        x = b.input("x", (2,))
        loss = b.square(x).sum()
        g = b.finalize()
        gs = backward(g, forward_eval(g, {"x": np.array([1.0, 2.0])}), loss,
                      wrt=["x"])
        np.testing.assert_allclose(gs["x"], [2.0, 4.0])


class TestFiniteDiffCheck:
    def test_no_parameters_gives_zero(self):
        b = GraphBuilder()
        x = b.input("x", (3,))
        _ = b.square(x).mean()
        g = b.finalize()
        assert finite_diff_check(g, {"x": np.ones(3)},
                                 _, step=1e-5) == 0.0

    def test_linear_graph_error_at_noise_level(self):
        rng = np.random.default_rng(5)
        b = GraphBuilder()
        w = b.param("w", (4, 3))
        x = b.input("x", (2, 4))
        loss = (x @ w).sum()
        g = b.finalize()
        err = finite_diff_check(g, {"w": rng.normal(size=(4, 3)),
                                    "x": rng.normal(size=(2, 4))}, loss)
        assert err < 1e-9

    def test_step_outside_range_rejected(self):
        b = GraphBuilder()
        x = b.param("x", ())
        loss = b.square(x)
        g = b.finalize()
        for bad in (0.0, -1e-5, 0.02):
            with pytest.raises(ValueError):
                finite_diff_check(g, {"x": np.array(1.0)}, loss, step=bad)

    def test_non_finite_loss_at_perturbed_point_raises(self):
        b = GraphBuilder()
        x = b.param("x", ())
        loss = b.log(x)
        g = b.finalize()
        # x sits closer to 0 than the step, so x - step goes negative
        with pytest.raises(FloatingPointError):
            finite_diff_check(g, {"x": np.array(5e-6)}, loss, step=1e-5)


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_softmax_rows_normalized(self, n, rows, seed):
        rng = np.random.default_rng(seed)
        b = GraphBuilder()
        x = b.input("x", (rows, n))
        y = b.softmax(x)
        g = b.finalize()
        vals = forward_eval(g, {"x": 3.0 * rng.normal(size=(rows, n))})
        np.testing.assert_allclose(vals[y.idx].sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(vals[y.idx] >= 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.sampled_from([1, 2, 4]),
           st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_patchify_roundtrip(self, batch, p, c, seed):
        rng = np.random.default_rng(seed)
        h = p * int(rng.integers(1, 4))
        w = p * int(rng.integers(1, 4))
        b = GraphBuilder()
        x = b.input("x", (batch, h, w, c))
        y = b.unpatchify(b.patchify(x, p), p)
        g = b.finalize()
        arr = rng.normal(size=(batch, h, w, c))
        vals = forward_eval(g, {"x": arr})
        np.testing.assert_array_equal(vals[y.idx], arr)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**31 - 1))
    def test_concat_of_slices_restores(self, n, seed):
        rng = np.random.default_rng(seed)
        cut = int(rng.integers(1, n))
        b = GraphBuilder()
        x = b.input("x", (2, n))
        left = b.slice_axis(x, 1, 0, cut)
        right = b.slice_axis(x, 1, cut, n)
        y = b.concat([left, right], axis=1)
        g = b.finalize()
        arr = rng.normal(size=(2, n))
        vals = forward_eval(g, {"x": arr})
        np.testing.assert_array_equal(vals[y.idx], arr)
