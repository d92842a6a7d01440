import math

import numpy as np
import pytest

from advalign.autodiff import (
    FiniteDifferenceReport,
    Graph,
    GraphError,
    NonFiniteError,
    NonScalarOutputError,
    ShapeError,
    Tensor,
    UnboundInputError,
    UnknownLeafError,
    evaluate,
    finite_difference_check,
    finite_difference_report,
    gradients,
)


def conv2d_loops(x, k, stride=1):
    """Direct nested-loop 'same' convolution, the oracle for the conv2d op."""
    h, w, ci = x.shape
    kh, kw, _, co = k.shape
    oh = -(-h // stride)
    ow = -(-w // stride)
    pad_h = max((oh - 1) * stride + kh - h, 0)
    pad_w = max((ow - 1) * stride + kw - w, 0)
    top, left = pad_h // 2, pad_w // 2
    out = np.zeros((oh, ow, co))
    for i in range(oh):
        for j in range(ow):
            for o in range(co):
                acc = 0.0
                for u in range(kh):
                    for v in range(kw):
                        for c in range(ci):
                            ii = i * stride + u - top
                            jj = j * stride + v - left
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += x[ii, jj, c] * k[u, v, c, o]
                out[i, j, o] = acc
    return out


class TestTensor:
    def test_flat_row_major_payload(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.data.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Tensor([1.0, float("nan")])
        with pytest.raises(ValueError):
            Tensor([1.0, float("inf")])

    def test_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.array[0] = 5.0

    def test_does_not_freeze_caller_array(self):
        arr = np.ones(3)
        Tensor(arr)
        arr[0] = 2.0  # still writable


class TestEvaluate:
    def test_identity_graph(self):
        g = Graph()
        g.input("x", (3,))
        out = evaluate(g, {"x": [1.0, 2.0, 3.0]})
        assert out["x"].tolist() == [1.0, 2.0, 3.0]

    def test_uniform_logits_cross_entropy_is_ln4(self):
        g = Graph()
        g.input("z", (4,))
        g.input("y", (1,))
        loss = g.softmax_cross_entropy("z", "y", name="loss")
        for label in range(4):
            out = evaluate(g, {"z": [0.3, 0.3, 0.3, 0.3], "y": [float(label)]})
            assert out[loss].data[0] == pytest.approx(math.log(4.0), abs=1e-12)

    def test_conv2d_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 5, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        g = Graph()
        g.input("x", (5, 5, 2))
        g.constant(k, name="k")
        c = g.conv2d("x", "k", name="c")
        out = evaluate(g, {"x": x})[c].array
        np.testing.assert_allclose(out, conv2d_loops(x, k), rtol=0, atol=1e-12)

    def test_conv2d_stride_matches_loop_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(6, 6, 1))
        k = rng.normal(size=(3, 3, 1, 2))
        g = Graph()
        g.input("x", (6, 6, 1))
        g.constant(k, name="k")
        c = g.conv2d("x", "k", stride=2, name="c")
        out = evaluate(g, {"x": x})[c].array
        np.testing.assert_allclose(out, conv2d_loops(x, k, stride=2), atol=1e-12)

    def test_unbound_input(self):
        g = Graph()
        g.input("x", (2,))
        with pytest.raises(UnboundInputError):
            evaluate(g, {})

    def test_binding_shape_mismatch(self):
        g = Graph()
        g.input("x", (2,))
        with pytest.raises(ShapeError):
            evaluate(g, {"x": [1.0, 2.0, 3.0]})

    def test_non_finite_intermediate_names_node(self):
        g = Graph()
        g.input("x", (2,))
        g.input("y", (2,))
        bad = g.div("x", "y", name="ratio")
        with pytest.raises(NonFiniteError, match="ratio"):
            evaluate(g, {"x": [1.0, 1.0], "y": [1.0, 0.0]})

    def test_pure_and_bit_identical(self):
        rng = np.random.default_rng(3)
        g = Graph()
        g.input("x", (4, 4, 1))
        g.constant(rng.normal(size=(3, 3, 1, 2)), name="k")
        c = g.conv2d("x", "k")
        r = g.relu(c)
        g.reduce_mean(r, name="m")
        x = rng.normal(size=(4, 4, 1))
        a = evaluate(g, {"x": x})["m"].data[0]
        b = evaluate(g, {"x": x})["m"].data[0]
        assert a == b  # exact, not approx


class TestGradients:
    def test_sum_gradient_is_ones(self):
        g = Graph()
        g.input("x", (2, 3))
        s = g.reduce_sum("x", name="s")
        grads = gradients(g, {"x": np.arange(6.0).reshape(2, 3)}, s, {"x"})
        assert grads["x"].array.tolist() == [[1.0] * 3] * 2

    def test_half_square_norm_gradient_is_x(self):
        g = Graph()
        g.input("x", (5,))
        sq = g.mul("x", "x")
        s = g.reduce_sum(sq)
        g.constant(0.5, name="half")
        out = g.mul(s, "half", name="loss")
        x = np.array([0.5, -1.5, 2.0, 0.0, 3.0])
        grads = gradients(g, {"x": x}, out, {"x"})
        np.testing.assert_allclose(grads["x"].array, x, atol=1e-15)

    def test_two_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        g = Graph()
        g.input("x", (6,))
        g.parameter("w1", (6, 5))
        g.parameter("b1", (5,))
        g.parameter("w2", (5, 3))
        g.parameter("b2", (3,))
        h = g.relu(g.add(g.matmul("x", "w1"), "b1"))
        z = g.add(g.matmul(h, "w2"), "b2")
        g.input("y", (1,))
        loss = g.softmax_cross_entropy(z, "y", name="loss")
        bindings = {
            "x": rng.normal(size=6), "y": [1.0],
            "w1": rng.normal(size=(6, 5)), "b1": rng.normal(size=5),
            "w2": rng.normal(size=(5, 3)), "b2": rng.normal(size=3),
        }
        err = finite_difference_check(
            g, bindings, loss, {"x", "w1", "b1", "w2", "b2"}, step=1e-5)
        assert err < 1e-4

    def test_non_scalar_output_rejected(self):
        g = Graph()
        g.input("x", (3,))
        y = g.relu("x")
        with pytest.raises(NonScalarOutputError):
            gradients(g, {"x": [1.0, 2.0, 3.0]}, y, {"x"})

    def test_unknown_leaf_rejected(self):
        g = Graph()
        g.input("x", (3,))
        s = g.reduce_sum("x")
        with pytest.raises(UnknownLeafError):
            gradients(g, {"x": [1.0, 2.0, 3.0]}, s, {"w"})
        with pytest.raises(UnknownLeafError):
            gradients(g, {"x": [1.0, 2.0, 3.0]}, s, {s})

    def test_gradients_bit_identical_across_runs(self):
        rng = np.random.default_rng(5)
        g = Graph()
        g.input("x", (4, 4, 1))
        g.parameter("k", (3, 3, 1, 2))
        c = g.conv2d("x", "k")
        p = g.avg_pool(c, 2)
        f = g.reshape(p, (8,))
        g.parameter("w", (8, 2))
        z = g.matmul(f, "w")
        g.input("y", (1,))
        loss = g.softmax_cross_entropy(z, "y", name="loss")
        b = {"x": rng.normal(size=(4, 4, 1)), "y": [0.0],
             "k": rng.normal(size=(3, 3, 1, 2)), "w": rng.normal(size=(8, 2))}
        g1 = gradients(g, b, loss, {"k", "w"})
        g2 = gradients(g, b, loss, {"k", "w"})
        assert np.array_equal(g1["k"].array, g2["k"].array)
        assert np.array_equal(g1["w"].array, g2["w"].array)

    def test_linearity_of_gradients(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=4)
        a, b = 1.7, -0.6

        def build(ca, cb):
            g = Graph()
            g.input("x", (4,))
            f = g.reduce_sum(g.mul("x", "x"))       # f = sum(x^2)
            h = g.reduce_sum(g.exp("x"))            # g = sum(exp(x))
            g.constant(ca, name="ca")
            g.constant(cb, name="cb")
            out = g.add(g.mul(f, "ca"), g.mul(h, "cb"), name="out")
            return g, out

        ga, oa = build(a, 0.0)
        gb, ob = build(0.0, b)
        gc, oc = build(a, b)
        da = gradients(ga, {"x": x}, oa, {"x"})["x"].array
        db = gradients(gb, {"x": x}, ob, {"x"})["x"].array
        dc = gradients(gc, {"x": x}, oc, {"x"})["x"].array
        np.testing.assert_allclose(dc, da + db, rtol=1e-12)


class TestOpGradients:
    """Finite-difference sweeps over each primitive, away from kinks."""

    CASES = [
        ("matmul_2d", lambda g: g.matmul("a", "b"), {"a": (3, 4), "b": (4, 2)}),
        ("matmul_vec", lambda g: g.matmul("a", "b"), {"a": (4,), "b": (4, 3)}),
        ("matmul_batched", lambda g: g.matmul("a", "b"), {"a": (2, 3, 4), "b": (4, 2)}),
        ("matmul_left", lambda g: g.matmul("a", "b"), {"a": (3, 3), "b": (2, 3, 4)}),
        ("div", lambda g: g.div("a", "b"), {"a": (3, 2), "b": (3, 2)}),
        ("tanh", lambda g: g.tanh("a"), {"a": (5,)}),
        ("exp", lambda g: g.exp("a"), {"a": (5,)}),
        ("transpose", lambda g: g.transpose("a"), {"a": (3, 4)}),
        ("max_pool", lambda g: g.max_pool("a", 2), {"a": (4, 4, 2)}),
        ("avg_pool", lambda g: g.avg_pool("a", 2), {"a": (4, 4, 2)}),
        ("reduce_max_axis", lambda g: g.reduce_max("a", axis=1), {"a": (3, 5)}),
        ("reduce_mean_axis", lambda g: g.reduce_mean("a", axis=0), {"a": (3, 5)}),
        ("abs", lambda g: g.abs("a"), {"a": (6,)}),
        ("sqrt", lambda g: g.sqrt("a"), {"a": (4,)}),
        ("conv2d", lambda g: g.conv2d("a", "b"), {"a": (5, 5, 2), "b": (3, 3, 2, 2)}),
        ("conv2d_batched", lambda g: g.conv2d("a", "b", stride=2),
         {"a": (2, 4, 4, 1), "b": (3, 3, 1, 2)}),
    ]

    @pytest.mark.parametrize("label,build,shapes", CASES, ids=[c[0] for c in CASES])
    def test_against_central_differences(self, label, build, shapes):
        rng = np.random.default_rng(hash(label) % (2 ** 32))
        g = Graph()
        bindings = {}
        for name, shape in shapes.items():
            g.input(name, shape)
            vals = rng.normal(size=shape)
            if label == "sqrt":
                vals = np.abs(vals) + 0.5  # keep away from the zero kink
            vals[np.abs(vals) < 1e-2] += 0.05  # keep away from relu/abs kinks
            bindings[name] = vals
        out = build(g)
        # weight the output so the scalar reduction mixes all coordinates
        w = rng.normal(size=g.shape_of(out))
        g.constant(w, name="wgt")
        loss = g.reduce_sum(g.mul(out, "wgt"), name="fd_loss")
        err = finite_difference_check(g, bindings, loss, set(shapes), step=1e-6)
        assert err < 1e-4, f"{label}: {err}"


class TestSecondOrder:
    def test_grad_of_grad_norm_linear_net(self):
        # loss2 = || d(sum(w*x))/dx ||^2 = ||w||^2, so d loss2 / dw = 2w.
        from advalign.autodiff import Var, v_mul, v_reduce_sum, vgrad

        rng = np.random.default_rng(21)
        w = Var(rng.normal(size=5), requires=True)
        x = Var(rng.normal(size=5), requires=True)
        y = v_reduce_sum(v_mul(w, x))
        (gx,) = vgrad(y, [x])
        loss2 = v_reduce_sum(v_mul(gx, gx))
        (gw,) = vgrad(loss2, [w])
        np.testing.assert_allclose(gw.data, 2.0 * w.data, rtol=1e-12)

    def test_grad_of_grad_through_relu_mlp_matches_fd(self):
        # J(theta) = sum over the input gradient of a relu net, differentiated
        # w.r.t. the weights and checked by central differences on J.
        from advalign.autodiff import (Var, v_add, v_matmul, v_reduce_sum,
                                       v_relu, vgrad)

        rng = np.random.default_rng(22)
        w1v = rng.normal(size=(4, 6))
        w2v = rng.normal(size=(6, 1))
        xv = rng.normal(size=4)

        def input_grad_sum(w1_arr, w2_arr):
            w1 = Var(w1_arr, requires=True)
            w2 = Var(w2_arr, requires=True)
            x = Var(xv.copy(), requires=True)
            out = v_reduce_sum(v_matmul(v_relu(v_matmul(x, w1)), w2))
            (gx,) = vgrad(out, [x])
            return v_reduce_sum(gx), w1, w2

        j, w1, w2 = input_grad_sum(w1v, w2v)
        gw1, gw2 = vgrad(j, [w1, w2])

        step = 1e-6
        for arr, grad in ((w1v, gw1.data), (w2v, gw2.data)):
            for i in range(arr.size):
                p, m = arr.copy(), arr.copy()
                p.flat[i] += step
                m.flat[i] -= step
                jp = input_grad_sum(p if arr is w1v else w1v,
                                    p if arr is w2v else w2v)[0].data[0]
                jm = input_grad_sum(m if arr is w1v else w1v,
                                    m if arr is w2v else w2v)[0].data[0]
                numeric = (jp - jm) / (2 * step)
                assert abs(grad.flat[i] - numeric) <= 1e-5 * max(1.0, abs(numeric))


class TestFiniteDifferenceCheck:
    def test_linear_graph_is_exact(self):
        g = Graph()
        g.input("x", (4,))
        g.constant([2.0, -1.0, 0.5, 3.0], name="c")
        out = g.reduce_sum(g.mul("x", "c"), name="out")
        err = finite_difference_check(g, {"x": [1.0, 2.0, 3.0, 4.0]}, out, {"x"},
                                      step=1e-5)
        assert err < 1e-9

    def test_relu_net_away_from_kinks(self):
        rng = np.random.default_rng(31)
        g = Graph()
        g.input("x", (5,))
        g.parameter("w", (5, 4))
        h = g.relu(g.matmul("x", "w"))
        out = g.reduce_sum(h, name="out")
        x = rng.normal(size=5) + np.where(rng.normal(size=5) > 0, 0.2, -0.2)
        w = rng.normal(size=(5, 4))
        err = finite_difference_check(g, {"x": x, "w": w}, out, {"x", "w"}, step=1e-5)
        assert err < 1e-4

    def test_kink_coordinate_is_skipped_not_failed(self):
        g = Graph()
        g.input("x", (2,))
        out = g.reduce_sum(g.relu("x"), name="out")
        report = finite_difference_report(g, {"x": [0.0, 1.0]}, out, {"x"}, step=1e-5)
        assert isinstance(report, FiniteDifferenceReport)
        assert ("x", 0) in report.skipped
        assert report.max_rel_error < 1e-9  # the smooth coordinate still checks

    def test_subsampling_is_seeded(self):
        rng = np.random.default_rng(41)
        g = Graph()
        g.input("x", (40,))
        out = g.reduce_sum(g.mul("x", "x"), name="out")
        b = {"x": rng.normal(size=40) + 1.0}
        r1 = finite_difference_report(g, b, out, {"x"}, step=1e-5, sample=7, seed=3)
        r2 = finite_difference_report(g, b, out, {"x"}, step=1e-5, sample=7, seed=3)
        assert r1.checked == r2.checked == 7
        assert r1.max_rel_error == r2.max_rel_error

    def test_rejects_nonpositive_step(self):
        g = Graph()
        g.input("x", (2,))
        out = g.reduce_sum("x", name="out")
        with pytest.raises(GraphError):
            finite_difference_check(g, {"x": [1.0, 2.0]}, out, {"x"}, step=0.0)


class TestGraphConstruction:
    def test_shape_rule_violations(self):
        g = Graph()
        g.input("a", (3,))
        g.input("b", (4,))
        with pytest.raises(ShapeError):
            g.add("a", "b")
        with pytest.raises(ShapeError):
            g.matmul("a", "b")
        with pytest.raises(ShapeError):
            g.reshape("a", (5,))
        g.input("img", (5, 5, 1))
        with pytest.raises(ShapeError):
            g.max_pool("img", 2)  # 5 not divisible by 2
        with pytest.raises(GraphError):
            g.input("a", (3,))  # duplicate name
        with pytest.raises(GraphError):
            g.relu("missing")

    def test_copy_is_independent(self):
        g = Graph()
        g.input("x", (2,))
        h = g.copy()
        h.relu("x", name="r")
        assert "r" in h
        assert "r" not in g
