import numpy as np
import pytest

from latentview import autodiff as ad


def t64(arr, requires_grad=False):
    t = ad.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)
    if requires_grad:
        t.grad = np.zeros_like(t.data)
    return t


def rand64(rng, *shape):
    return t64(rng.standard_normal(shape), requires_grad=True)


class TestForward:
    def test_softmax_symmetry(self):
        out = ad.softmax(t64([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_layernorm_constant_vector_is_zero_before_affine(self):
        x = t64(np.full((3, 8), 2.5))
        gain = t64(np.ones(8))
        bias = t64(np.zeros(8))
        out = ad.layernorm(x, gain, bias)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_matmul_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((3, 4))
        ref = np.zeros((2, 4))
        for i in range(2):
            for j in range(4):
                for k in range(3):
                    ref[i, j] += a[i, k] * b[k, j]
        out = ad.matmul(t64(a), t64(b))
        np.testing.assert_allclose(out.data, ref, atol=1e-6)

    def test_float32_matches_float64_reference(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 16))
        w = rng.standard_normal((16, 16))
        ops = {
            "matmul": lambda t: ad.matmul(t, ad.const(w.astype(t.dtype))),
            "softmax": ad.softmax,
            "gelu": ad.gelu,
            "sigmoid": ad.sigmoid,
            "l2norm": ad.l2norm,
        }
        for name, op in ops.items():
            lo = op(ad.Tensor(x.astype(np.float32))).data.astype(np.float64)
            hi = op(t64(x)).data
            rel = np.abs(lo - hi) / np.maximum(np.abs(hi), 1e-6)
            assert rel.max() < 1e-4, f"{name}: rel err {rel.max()}"

    def test_sigmoid_extreme_inputs_stay_finite(self):
        out = ad.sigmoid(t64([-500.0, 0.0, 500.0]))
        np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0], atol=1e-12)


class TestErrors:
    def test_shape_mismatch_names_primitive_and_shapes(self):
        with pytest.raises(ad.PrimitiveError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
            ad.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))
        with pytest.raises(ad.PrimitiveError, match="mse"):
            ad.mse(t64(np.zeros(3)), t64(np.zeros(4)))

    def test_nonfinite_output_names_primitive(self):
        big = t64(np.array([1e308]))
        with pytest.raises(ad.PrimitiveError, match="mul"):
            ad.mul(big, big)

    def test_nonscalar_loss_rejected(self):
        with pytest.raises(ad.PrimitiveError, match="scalar"):
            ad.backward(t64(np.zeros(3)))

    def test_overflowing_variance_caught_not_silently_zeroed(self):
        # float32 variance of 1e30-scale rows overflows to inf; the output
        # would still be finite (bias), which must not pass silently.
        x = ad.Tensor(np.full((2, 8), 1e30, dtype=np.float32))
        x.data[0, 0] = 0.0
        g = ad.Tensor(np.ones(8, dtype=np.float32))
        b = ad.Tensor(np.zeros(8, dtype=np.float32))
        with pytest.raises(ad.PrimitiveError, match="layernorm"):
            ad.layernorm(x, g, b)
        with pytest.raises(ad.PrimitiveError, match="l2norm"):
            ad.l2norm(ad.Tensor(np.full((2, 8), 1e30, dtype=np.float32)))


class TestBackward:
    def test_sum_grad_is_ones(self):
        p = rand64(np.random.default_rng(0), 4, 3)
        ad.backward(ad.sum_(p))
        np.testing.assert_array_equal(p.grad, np.ones((4, 3)))

    def test_mse_self_grad_is_zero(self):
        p = rand64(np.random.default_rng(0), 5)
        ad.backward(ad.mse(p, p))
        np.testing.assert_array_equal(p.grad, np.zeros(5))

    def test_unused_param_grad_exactly_zero(self):
        rng = np.random.default_rng(0)
        used, unused = rand64(rng, 3), rand64(rng, 3)
        ad.backward(ad.sum_(ad.mul(used, used)))
        assert np.all(unused.grad == 0.0)

    def test_three_layer_composition_gradcheck(self):
        rng = np.random.default_rng(2)
        store = {
            "w1": rand64(rng, 6, 8),
            "w2": rand64(rng, 8, 8),
            "w3": rand64(rng, 8, 4),
        }
        x = rng.standard_normal((5, 6))

        def f():
            h = ad.gelu(ad.matmul(ad.const(x), store["w1"]))
            h = ad.sigmoid(ad.matmul(h, store["w2"]))
            return ad.mean(ad.matmul(h, store["w3"]))

        rep = ad.gradcheck(f, store)
        assert rep.max_rel_err < 1e-3

    def test_grads_deterministic(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 4))

        def run():
            p = t64(x, requires_grad=True)
            ad.backward(ad.mean(ad.softmax(ad.matmul(p, p))))
            return p.grad.copy()

        np.testing.assert_array_equal(run(), run())


class TestGradcheckAllPrimitives:
    """Every registered primitive, 64-bit, rel err < 1e-6 on random shapes."""

    def test_each_primitive(self):
        rng = np.random.default_rng(7)
        checks = {}

        a = rand64(rng, 3, 5)
        b = rand64(rng, 5, 4)
        checks["matmul"] = ({"a": a, "b": b}, lambda: ad.mean(ad.matmul(a, b)))

        a2 = rand64(rng, 4, 6)
        b2 = rand64(rng, 6)  # broadcast add
        checks["add"] = ({"a": a2, "b": b2}, lambda: ad.mean(ad.mul(ad.add(a2, b2), ad.add(a2, b2))))

        m1 = rand64(rng, 4, 3)
        m2 = rand64(rng, 1, 3)  # broadcast mul
        checks["mul"] = ({"a": m1, "b": m2}, lambda: ad.mean(ad.mul(m1, m2)))

        s = rand64(rng, 5)
        checks["scale"] = ({"s": s}, lambda: ad.mean(ad.mul(ad.scale(s, -2.5), s)))

        c1 = rand64(rng, 2, 3)
        c2 = rand64(rng, 4, 3)
        checks["concat"] = (
            {"a": c1, "b": c2},
            lambda: ad.mean(ad.mul(ad.concat([c1, c2], axis=0), ad.concat([c1, c2], axis=0))),
        )

        sl = rand64(rng, 6, 4)
        checks["slice"] = ({"x": sl}, lambda: ad.mean(ad.mul(ad.slice_(sl, 0, 1, 4), ad.slice_(sl, 0, 1, 4))))

        rs = rand64(rng, 6, 4)
        checks["reshape"] = ({"x": rs}, lambda: ad.mean(ad.mul(ad.reshape(rs, (3, 8)), ad.reshape(rs, (3, 8)))))

        tp = rand64(rng, 2, 3, 4)
        checks["transpose"] = (
            {"x": tp},
            lambda: ad.mean(ad.mul(ad.transpose(tp, (2, 0, 1)), ad.transpose(tp, (2, 0, 1)))),
        )

        sm = rand64(rng, 3, 7)
        tgt = rng.standard_normal((3, 7))
        checks["softmax"] = ({"x": sm}, lambda: ad.mse(ad.softmax(sm), ad.const(tgt)))

        ln_x = rand64(rng, 4, 6)
        ln_g = rand64(rng, 6)
        ln_b = rand64(rng, 6)
        checks["layernorm"] = (
            {"x": ln_x, "g": ln_g, "b": ln_b},
            lambda: ad.mean(ad.mul(ad.layernorm(ln_x, ln_g, ln_b), ad.layernorm(ln_x, ln_g, ln_b))),
        )

        ge = rand64(rng, 5, 5)
        checks["gelu"] = ({"x": ge}, lambda: ad.mean(ad.mul(ad.gelu(ge), ge)))

        sg = rand64(rng, 5, 5)
        checks["sigmoid"] = ({"x": sg}, lambda: ad.mean(ad.mul(ad.sigmoid(sg), sg)))

        l2 = rand64(rng, 4, 5)
        checks["l2norm"] = ({"x": l2}, lambda: ad.mean(ad.mul(ad.l2norm(l2), l2)))

        me = rand64(rng, 3, 3)
        checks["mean"] = ({"x": me}, lambda: ad.mean(ad.mul(me, me)))

        su = rand64(rng, 3, 3)
        checks["sum"] = ({"x": su}, lambda: ad.sum_(ad.mul(su, su)))

        ms_a = rand64(rng, 4, 4)
        ms_b = rand64(rng, 4, 4)
        checks["mse"] = ({"a": ms_a, "b": ms_b}, lambda: ad.mse(ms_a, ms_b))

        assert set(checks) == ad.PRIMITIVES
        for name, (params, f) in checks.items():
            rep = ad.gradcheck(f, params)
            assert rep.max_rel_err < 1e-6, f"{name}: {rep.per_param}"


class TestGradcheck:
    def test_quadratic_matches_analytic(self):
        theta = t64(np.array([3.0]), requires_grad=True)
        rep = ad.gradcheck(lambda: ad.sum_(ad.mul(theta, theta)), {"theta": theta}, eps=1e-5)
        # analytic 6 vs numeric 6
        assert rep.max_rel_err < 1e-9

    def test_softmax_composition_eight_params(self):
        rng = np.random.default_rng(11)
        params = {f"p{i}": rand64(rng, 2, 4) for i in range(8)}

        def f():
            h = params["p0"]
            for i in range(1, 8):
                w = ad.matmul(ad.transpose(params[f"p{i}"]), params[f"p{i}"])
                h = ad.add(h, ad.softmax(ad.add(ad.matmul(h, w), params[f"p{i}"])))
            return ad.mean(ad.mul(h, h))

        rep = ad.gradcheck(f, params)
        assert rep.max_rel_err < 1e-6


class TestAdam:
    def test_zero_gradient_keeps_params_and_bumps_counter(self):
        store = ad.ParamStore()
        p = store.add("p", np.array([1.0, 2.0], dtype=np.float32))
        before = p.data.copy()
        store.adam_step(lr=0.1)
        np.testing.assert_array_equal(p.data, before)
        assert store.step == 1

    def test_first_step_moves_by_lr_times_sign(self):
        store = ad.ParamStore()
        p = store.add("p", np.zeros(3, dtype=np.float32))
        p.grad = np.array([0.5, -2.0, 3.0], dtype=np.float32)
        store.adam_step(lr=0.1)
        np.testing.assert_allclose(p.data, [-0.1, 0.1, -0.1], rtol=1e-4)

    def test_converges_on_quadratic(self):
        store = ad.ParamStore()
        theta = store.add("theta", np.array([0.0], dtype=np.float32))
        for _ in range(200):
            store.zero_grads()
            loss = ad.mse(theta, ad.const(np.array([5.0], dtype=np.float32)))
            ad.backward(loss)
            store.adam_step(lr=0.1)
        assert abs(float(theta.data[0]) - 5.0) < 0.1

    def test_shape_mismatch_rejected(self):
        store = ad.ParamStore()
        store.add("p", np.zeros(3, dtype=np.float32))
        with pytest.raises(ad.PrimitiveError, match="adam_step"):
            ad.adam_step(store, {"p": np.zeros(4, dtype=np.float32)}, lr=0.1)

    def test_clip_global_norm(self):
        store = ad.ParamStore()
        p = store.add("p", np.zeros(4, dtype=np.float32))
        p.grad = np.full(4, 10.0, dtype=np.float32)
        norm = store.clip_global_norm(1.0)
        assert norm == pytest.approx(20.0)
        assert store.global_grad_norm() == pytest.approx(1.0, rel=1e-5)
