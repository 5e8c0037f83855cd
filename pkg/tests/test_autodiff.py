"""Reverse-mode engine: every primitive's backward pass is checked against
the central-difference oracle, plus the hand cases for simple losses."""

import numpy as np
import pytest

from elliptical.autodiff import GradTape, backward, leaf
from elliptical.numerics import ParameterError, finite_diff_jacobian, make_rng

VJP_RTOL = 1e-4


class TestHandCases:
    def test_sum_gradient_is_ones(self):
        tape = GradTape()
        x = leaf(make_rng(0).standard_normal((3, 4)))
        loss = tape.sum_all(x)
        backward(tape, loss)
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic_gradient(self):
        tape = GradTape()
        x = leaf(np.array([[1.0, 2.0]]))
        loss = tape.sum_all(tape.mul(x, x))
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, [[2.0, 4.0]], atol=1e-14)

    def test_softmax_cross_entropy_matches_fd(self):
        rng = make_rng(1)
        logits0 = rng.standard_normal((1, 5))
        target = np.array([2])

        tape = GradTape()
        x = leaf(logits0)
        loss = tape.cross_entropy(x, target)
        backward(tape, loss)

        def f(v):
            t = GradTape()
            return t.cross_entropy(leaf(v.reshape(1, 5)), target).value.reshape(-1)

        fd = finite_diff_jacobian(f, logits0.reshape(-1)).reshape(1, 5)
        np.testing.assert_allclose(x.grad, fd, atol=1e-5)

    def test_backward_requires_scalar(self):
        tape = GradTape()
        x = leaf(np.ones((2, 2)))
        y = tape.relu(x)
        with pytest.raises(ParameterError):
            backward(tape, y)


def _fd_check(op_builder, shapes, seed, rtol=VJP_RTOL):
    """Generic leaf-gradient check: scalarize via sum, compare against FD."""
    rng = make_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]

    def run(values):
        tape = GradTape()
        leaves = [leaf(v) for v in values]
        out = op_builder(tape, *leaves)
        loss = tape.sum_all(out)
        return tape, leaves, loss

    tape, leaves, loss = run(arrays)
    backward(tape, loss)

    for i, base in enumerate(arrays):
        def scalar(flat, i=i, base=base):
            vals = [a.copy() for a in arrays]
            vals[i] = flat.reshape(base.shape)
            _, _, l = run(vals)
            return l.value.reshape(-1)

        fd = finite_diff_jacobian(scalar, base.reshape(-1)).reshape(base.shape)
        got = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(base)
        np.testing.assert_allclose(got, fd, rtol=rtol, atol=1e-7)


class TestPrimitiveGradients:
    def test_add(self):
        _fd_check(lambda t, a, b: t.add(a, b), [(3, 4), (3, 4)], seed=10)

    def test_add_bias_row(self):
        _fd_check(lambda t, a, b: t.add(a, b), [(3, 4), (1, 4)], seed=11)

    def test_mul(self):
        _fd_check(lambda t, a, b: t.mul(a, b), [(2, 5), (2, 5)], seed=12)

    def test_matmul(self):
        _fd_check(lambda t, a, b: t.matmul(a, b), [(3, 4), (4, 2)], seed=13)

    def test_transpose_then_matmul(self):
        _fd_check(lambda t, a, b: t.matmul(a, t.transpose(b)), [(3, 4), (2, 4)], seed=14)

    def test_relu(self):
        _fd_check(lambda t, a: t.relu(a), [(4, 4)], seed=15)

    def test_softmax_rows(self):
        _fd_check(lambda t, a: t.softmax_rows(a), [(3, 5)], seed=16)

    def test_mul_const_and_div_const(self):
        c = make_rng(17).standard_normal((3, 4))
        _fd_check(lambda t, a: t.div_const(t.mul_const(a, c), 1.7), [(3, 4)], seed=18)

    def test_add_const(self):
        c = make_rng(19).standard_normal((2, 3))
        _fd_check(lambda t, a: t.add_const(a, c), [(2, 3)], seed=20)

    def test_layer_norm(self):
        _fd_check(
            lambda t, x, g, b: t.layer_norm(x, g, b),
            [(4, 6), (1, 6), (1, 6)],
            seed=21,
        )

    def test_slice_concat_roundtrip(self):
        def build(t, a):
            left = t.slice_cols(a, 0, 2)
            right = t.slice_cols(a, 2, 5)
            return t.concat_cols([t.relu(left), right])

        _fd_check(build, [(3, 5)], seed=22)

    def test_block_causal_attention(self):
        rng = make_rng(30)
        batch, t_len, dim = 2, 5, 3
        rows = batch * t_len
        m = rng.uniform(0.2, 1.0, (rows, dim))
        temp = 1.7

        def build(t, q, k, v):
            return t.block_causal_attention(q, k, v, m, temp, batch)

        _fd_check(build, [(rows, dim), (rows, dim), (rows, dim)], seed=31)

    def test_block_causal_attention_matches_composed_ops(self):
        from elliptical.attention import causal_mask

        rng = make_rng(32)
        batch, t_len, dim = 3, 4, 2
        rows = batch * t_len
        q0, k0, v0 = (rng.standard_normal((rows, dim)) for _ in range(3))
        m = rng.uniform(0.5, 1.0, dim)

        tape = GradTape()
        q, k, v = leaf(q0), leaf(k0), leaf(v0)
        fused = tape.block_causal_attention(q, k, v, m, 1.3, batch)
        for b in range(batch):
            sl = slice(b * t_len, (b + 1) * t_len)
            t2 = GradTape()
            qb, kb, vb = leaf(q0[sl]), leaf(k0[sl]), leaf(v0[sl])
            scores = t2.add_const(
                t2.div_const(t2.matmul(t2.mul_const(qb, m), t2.transpose(kb)), 1.3),
                causal_mask(t_len),
            )
            out = t2.matmul(t2.softmax_rows(scores), vb)
            np.testing.assert_allclose(fused.value[sl], out.value, atol=1e-14)

    def test_embedding(self):
        ids = np.array([0, 2, 2, 1])

        def run(values):
            tape = GradTape()
            table = leaf(values)
            out = tape.embedding(table, ids)
            return tape, table, tape.sum_all(tape.mul(out, out))

        base = make_rng(23).standard_normal((3, 4))
        tape, table, loss = run(base)
        backward(tape, loss)

        def scalar(flat):
            _, _, l = run(flat.reshape(3, 4))
            return l.value.reshape(-1)

        fd = finite_diff_jacobian(scalar, base.reshape(-1)).reshape(3, 4)
        np.testing.assert_allclose(table.grad, fd, rtol=VJP_RTOL, atol=1e-7)


class TestTapeMechanics:
    def test_gradients_accumulate_across_reuse(self):
        tape = GradTape()
        x = leaf(np.array([[2.0]]))
        y = tape.add(x, x)  # dy/dx = 2
        loss = tape.sum_all(y)
        backward(tape, loss)
        assert x.grad[0, 0] == 2.0

    def test_unused_branches_get_no_gradient(self):
        tape = GradTape()
        x = leaf(np.ones((2, 2)))
        y = leaf(np.ones((2, 2)))
        _ = tape.relu(y)  # dead branch
        loss = tape.sum_all(tape.relu(x))
        backward(tape, loss)
        assert y.grad is None

    def test_each_node_visited_once(self):
        # shared subexpression: z = x * x; loss = sum(z + z) -> dx = 4x
        tape = GradTape()
        x = leaf(np.array([[3.0]]))
        z = tape.mul(x, x)
        loss = tape.sum_all(tape.add(z, z))
        backward(tape, loss)
        assert x.grad[0, 0] == pytest.approx(12.0)
