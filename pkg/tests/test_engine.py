import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinaema.engine import tensor as T
from kinaema.engine.gradcheck import grad_check, module_params
from kinaema.engine.nn import (
    GRUCell, LayerNorm, Linear, MLP, MultiHeadAttention, Parameter, SelfAttentionBlock, attention,
)
from kinaema.engine.tensor import Tensor, precision
from kinaema.errors import ConfigError, DimensionError, NumericError


def rng(seed=0):
    return np.random.default_rng(seed)


def central_diff(f, x, eps=1e-5):
    """Plain numpy finite differences, independent of the engine."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        plus = f(x)
        x[i] = orig - eps
        minus = f(x)
        x[i] = orig
        g[i] = (plus - minus) / (2 * eps)
    return g


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_times_column(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_of_sum(self):
        r = rng(1)
        a0, b0 = r.normal(size=(4, 5)), r.normal(size=(5, 3))
        with precision(np.float64):
            a, b = Tensor(a0.copy(), requires_grad=True), Tensor(b0.copy(), requires_grad=True)
            T.matmul(a, b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((4, 3)) @ b0.T, rtol=1e-12)
        fd_a = central_diff(lambda x: (x @ b0).sum(), a0.copy())
        fd_b = central_diff(lambda x: (a0 @ x).sum(), b0.copy())
        np.testing.assert_allclose(a.grad, fd_a, rtol=1e-7, atol=1e-9)
        np.testing.assert_allclose(b.grad, fd_b, rtol=1e-7, atol=1e-9)

    def test_broadcast_batch_gradient(self):
        r = rng(2)
        a0, b0 = r.normal(size=(3, 2, 4, 5)), r.normal(size=(3, 1, 5, 2))
        with precision(np.float64):
            a, b = Tensor(a0.copy(), requires_grad=True), Tensor(b0.copy(), requires_grad=True)
            (T.matmul(a, b) ** 2).sum().backward()
        fd_b = central_diff(lambda x: ((a0 @ x) ** 2).sum(), b0.copy())
        np.testing.assert_allclose(b.grad, fd_b, rtol=1e-6, atol=1e-8)


def brute_attention(q, k, v):
    d = q.shape[-1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        scores = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in range(k.shape[0])]
        m = max(scores)
        w = [math.exp(s - m) for s in scores]
        z = sum(w)
        for j in range(k.shape[0]):
            out[i] += w[j] / z * v[j]
    return out


class TestAttention:
    def _identity_mha(self, d):
        mha = MultiHeadAttention(d, 1, rng())
        for lin in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
            lin.weight.data = np.eye(d, dtype=np.float32)
            lin.bias.data = np.zeros(d, dtype=np.float32)
        return mha

    def test_single_key_returns_projected_value(self):
        mha = MultiHeadAttention(8, 2, rng(3))
        r = rng(4)
        q = Tensor(r.normal(size=(5, 8)).astype(np.float32))
        kv = Tensor(r.normal(size=(1, 8)).astype(np.float32))
        out = attention(q, kv, kv, 2, mha).data
        expected = mha.out_proj(mha.v_proj(kv)).data
        np.testing.assert_allclose(out, np.repeat(expected, 5, axis=0), atol=1e-6)

    def test_two_by_two_matches_closed_form(self):
        mha = self._identity_mha(2)
        q0 = np.array([[0.3, -1.2], [2.0, 0.5]])
        k0 = np.array([[1.0, 0.1], [-0.4, 0.7]])
        v0 = np.array([[0.5, 1.5], [-2.0, 3.0]])
        with precision(np.float64):
            mha.astype(np.float64)
            out = attention(Tensor(q0), Tensor(k0), Tensor(v0), 1, mha).data
        np.testing.assert_allclose(out, brute_attention(q0, k0, v0), rtol=1e-12)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            MultiHeadAttention(10, 3, rng())
        mha = MultiHeadAttention(8, 2, rng())
        with pytest.raises(ConfigError):
            attention(Tensor(np.ones((2, 8))), Tensor(np.ones((2, 8))), Tensor(np.ones((2, 8))), 3, mha)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), lk=st.integers(1, 9))
    def test_joint_key_value_permutation_invariance(self, seed, lk):
        r = rng(seed)
        mha = MultiHeadAttention(8, 2, r)
        q = r.normal(size=(3, 8)).astype(np.float32)
        kv = r.normal(size=(lk, 8)).astype(np.float32)
        perm = r.permutation(lk)
        a = attention(Tensor(q), Tensor(kv), Tensor(kv), 2, mha).data
        b = attention(Tensor(q), Tensor(kv[perm]), Tensor(kv[perm]), 2, mha).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_gradient(self):
        r = rng(5)
        mha = MultiHeadAttention(8, 2, r)
        q = Tensor(r.normal(size=(3, 8)))
        kv = Tensor(r.normal(size=(4, 8)))
        params = {"q": q, "kv": kv, **module_params(mha)}
        report = grad_check(lambda: (mha(q, kv) ** 2).sum(), params)
        assert report.max_error < 1e-4, report.errors


class TestGRUCell:
    def test_update_gate_closed_keeps_state(self):
        r = rng(6)
        cell = GRUCell(3, 4, r)
        cell.b_z.data[:] = -40.0
        h = r.normal(size=(2, 4)).astype(np.float32)
        x = r.normal(size=(2, 3)).astype(np.float32)
        out = cell(Tensor(h), Tensor(x)).data
        np.testing.assert_array_equal(out, h)

    def test_full_update_is_candidate(self):
        r = rng(7)
        cell = GRUCell(3, 4, r)
        cell.b_z.data[:] = 40.0
        cell.b_r.data[:] = 40.0
        h = r.normal(size=(2, 4))
        x = r.normal(size=(2, 3))
        out = cell(Tensor(h), Tensor(x)).data
        pre = x @ cell.w_c.data + cell.b_c.data + h @ cell.u_c.data + cell.b_hc.data
        np.testing.assert_allclose(out, np.tanh(pre), atol=1e-6)

    def test_gradient(self):
        r = rng(8)
        cell = GRUCell(3, 3, r)
        h, x = Tensor(r.normal(size=(2, 3))), Tensor(r.normal(size=(2, 3)))
        params = {"h": h, "x": x, **module_params(cell)}
        report = grad_check(lambda: cell(h, x).sum(), params, max_entries=None)
        assert report.max_error < 1e-4, report.errors

    def test_shape_error(self):
        cell = GRUCell(3, 4, rng())
        with pytest.raises(DimensionError):
            cell(Tensor(np.ones((2, 5))), Tensor(np.ones((2, 3))))


class TestLayerOps:
    def test_reshape_full_scale_memory(self):
        m = Tensor(np.zeros((20, 3072), dtype=np.float32))
        assert m.reshape(160, 384).shape == (160, 384)
        with pytest.raises(DimensionError):
            m.reshape(100, 384)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([(2, 12), (3, 4, 5), (60,), (6, 10)]), st.integers(0, 1000))
    def test_reshape_roundtrip(self, shape, seed):
        x = rng(seed).normal(size=shape).astype(np.float32)
        t = Tensor(x).reshape(-1).reshape(shape)
        np.testing.assert_array_equal(t.data, x)

    def test_layer_norm_standardizes_rows(self):
        x = rng(9).normal(3.0, 5.0, size=(6, 32))
        with precision(np.float64):
            out = T.layer_norm(Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-5)

    def test_softmax_rows_sum_to_one(self):
        out = T.softmax(Tensor(rng(10).normal(size=(4, 7)))).data
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)

    def test_concat_and_getitem_gradients(self):
        r = rng(11)
        a, b = Tensor(r.normal(size=(2, 3))), Tensor(r.normal(size=(2, 4)))
        report = grad_check(lambda: (T.concat([a, b], -1)[:, 1:5] ** 2).sum(), {"a": a, "b": b},
                            max_entries=None)
        assert report.max_error < 1e-8

    def test_self_attention_block_gradient(self):
        r = rng(12)
        block = SelfAttentionBlock(8, 2, 4, r)
        x = Tensor(r.normal(size=(3, 8)))
        weights = Tensor(r.normal(size=(3, 8)))
        params = {"x": x, **module_params(block)}
        report = grad_check(lambda: (block(x) * weights).sum(), params)
        assert report.max_error < 1e-4, report.errors

    def test_layer_norm_and_mlp_gradients(self):
        r = rng(13)
        norm, mlp = LayerNorm(6), MLP([6, 12, 4], r)
        norm.weight.data = r.normal(size=6).astype(np.float32)
        x = Tensor(r.normal(size=(5, 6)))
        params = {"x": x, **module_params(norm, "norm."), **module_params(mlp, "mlp.")}
        report = grad_check(lambda: (mlp(norm(x)) ** 2).sum(), params)
        assert report.max_error < 1e-4, report.errors

    @pytest.mark.parametrize("op", [T.tanh, T.sigmoid, T.gelu, T.exp, T.sqrt])
    def test_unary_gradients(self, op):
        x = Tensor(rng(14).uniform(0.2, 2.0, size=(4, 3)))
        assert grad_check(lambda: op(x).sum(), {"x": x}, max_entries=None).max_error < 1e-6

    def test_sigmoid_is_stable_at_extremes(self):
        out = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_broadcast_ops_gradients(self):
        r = rng(15)
        a, b = Tensor(r.normal(size=(3, 1, 4))), Tensor(r.uniform(1, 2, size=(5, 1)))
        f = lambda: ((a * b + a - b) / b).sum() + T.broadcast_to(b, (2, 5, 4)).mean()
        assert grad_check(f, {"a": a, "b": b}, max_entries=None).max_error < 1e-8


class TestGradCheck:
    def test_linear_layer_is_nearly_exact(self):
        lin = Linear(5, 3, rng(16))
        x = Tensor(rng(17).normal(size=(4, 5)))
        report = grad_check(lambda: lin(x).sum(), module_params(lin), max_entries=None)
        assert report.max_error < 1e-8

    def test_restores_dtype_and_data(self):
        lin = Linear(2, 2, rng(18))
        before = lin.weight.data.copy()
        grad_check(lambda: lin(Tensor(np.ones((1, 2)))).sum(), module_params(lin))
        assert lin.weight.data.dtype == np.float32
        np.testing.assert_array_equal(lin.weight.data, before)

    @pytest.mark.filterwarnings("ignore:invalid value encountered in log")
    def test_non_finite_output_names_parameter(self):
        p = Parameter(np.array([1e-6]))
        with pytest.raises(NumericError, match="'p'"):
            grad_check(lambda: T.log(p).sum(), {"p": p}, eps=1e-3)

    def test_rejects_non_positive_eps(self):
        with pytest.raises(ValueError):
            grad_check(lambda: Tensor(0.0), {}, eps=0.0)

    def test_detects_a_wrong_gradient(self):
        x = Tensor(np.array([0.5, 1.5]))

        def broken(a):
            return T._make(a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2

        report = grad_check(lambda: broken(x).sum(), {"x": x}, max_entries=None)
        assert report.max_error > 0.4
