import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from convemo import tensor as T
from convemo.tensor import GradStore, NumericError, ShapeError, Tape, Var

from conftest import check_all

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def matrices(max_side=6):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite)
    )


class TestForward:
    def test_matmul_identity(self):
        out = T.matmul(Var([[1, 0], [0, 1]]), Var([[3], [4]]))
        np.testing.assert_array_equal(out.value, [[3], [4]])

    def test_matmul_row_col(self):
        assert T.matmul(Var([[1, 2]]), Var([[3], [4]])).value[0, 0] == 11

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Var(np.ones((2, 3))), Var(np.ones((2, 3))))

    def test_softmax_uniform(self):
        np.testing.assert_allclose(T.softmax_rows(Var([[0.0, 0.0, 0.0]])).value, [[1 / 3] * 3], atol=1e-15)

    def test_softmax_large_logits(self):
        p = T.softmax_rows(Var([[1000.0, 0.0]])).value
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, [[1.0, 0.0]], atol=1e-300)

    def test_sigmoid_zero(self):
        assert T.sigmoid_ew(Var([[0.0]])).value[0, 0] == 0.5

    def test_sigmoid_extreme_is_finite(self):
        v = T.sigmoid_ew(Var([[-800.0, 800.0]])).value
        np.testing.assert_array_equal(v, [[0.0, 1.0]])

    def test_concat_cols_three_columns(self):
        d = 5
        cols = [Var(np.full((d, 1), k)) for k in range(3)]
        out = T.concat_cols(cols)
        assert out.shape == (d, 3)
        np.testing.assert_array_equal(out.value[:, 2], 2.0)

    def test_concat_rows_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat_rows([Var(np.ones((1, 2))), Var(np.ones((1, 3)))])

    def test_add_broadcast_rules(self):
        out = T.add(Var(np.zeros((3, 2))), Var([[1.0, 2.0]]))
        np.testing.assert_array_equal(out.value, [[1, 2]] * 3)
        with pytest.raises(ShapeError):
            T.add(Var(np.zeros((3, 2))), Var(np.zeros((2, 2))))

    def test_transpose_and_scale(self):
        m = Var([[1.0, 2.0, 3.0]])
        assert T.transpose(m).shape == (3, 1)
        np.testing.assert_array_equal(T.scale(m, -2).value, [[-2, -4, -6]])

    def test_dropout_identity_without_rng(self):
        m = Var(np.ones((3, 3)))
        assert T.dropout(m, 0.5, None) is m

    def test_dropout_inverted_scaling(self, rng):
        out = T.dropout(Var(np.ones((200, 50))), 0.2, rng).value
        assert set(np.unique(out)) <= {0.0, 1.25}
        assert abs(out.mean() - 1.0) < 0.05


class TestBackward:
    """Each op's backward rule against central differences (h = 1e-5)."""

    def test_matmul(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        w = rng.normal(size=(3, 2))
        check_all(lambda v: T.sum_all(T.hadamard(T.matmul(v[0], v[1]), Var(w))), [a, b], 1e-6)

    def test_softmax_rows(self, rng):
        x = rng.normal(size=(2, 3))
        w = rng.normal(size=(2, 3))
        check_all(lambda v: T.sum_all(T.hadamard(T.softmax_rows(v[0]), Var(w))), [x], 1e-6)

    def test_hadamard(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        check_all(lambda v: T.sum_all(T.hadamard(v[0], v[1])), [a, b], 1e-6)

    def test_hadamard_column_broadcast(self, rng):
        a, b = rng.normal(size=(3, 1)), rng.normal(size=(3, 4))
        check_all(lambda v: T.sum_all(T.tanh_ew(T.hadamard(v[0], v[1]))), [a, b], 1e-6)

    @pytest.mark.parametrize("op", [T.tanh_ew, T.sigmoid_ew, T.complement, T.transpose, lambda m: T.scale(m, 1.7)])
    def test_unary(self, rng, op):
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=op(Var(x)).shape)
        check_all(lambda v: T.sum_all(T.hadamard(op(v[0]), Var(w))), [x], 1e-6)

    def test_add_sub_with_row_bias(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
        w = rng.normal(size=(3, 4))
        check_all(lambda v: T.sum_all(T.hadamard(T.sub(T.add(v[0], v[1]), v[1]), Var(w))), [a, b], 1e-6)

    def test_concat_split_slices(self, rng):
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 3))
        w = rng.normal(size=(6, 5))

        def build(v):
            c = T.concat_cols([v[0], v[1]])
            top, bottom = T.split_rows(c, [1, 2])
            stacked = T.concat_rows([bottom, top, T.take_rows(c, [2, 0, 0])])
            return T.sum_all(T.hadamard(T.tanh_ew(stacked), Var(w)))

        check_all(build, [a, b], 1e-6)

    def test_softmax_cross_entropy(self, rng):
        logits = rng.normal(size=(4, 3))
        labels = [0, 2, 1, 2]
        check_all(lambda v: T.softmax_cross_entropy(v[0], labels), [logits], 1e-6)

    def test_grad_accumulates_over_reuse(self, rng):
        x = rng.normal(size=(2, 2))
        check_all(lambda v: T.sum_all(T.matmul(v[0], v[0])), [x], 1e-6)


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(matrices())
    def test_softmax_rows_sum_to_one(self, x):
        p = T.softmax_rows(Var(x)).value
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12, rtol=0)

    @settings(max_examples=100, deadline=None)
    @given(matrices())
    def test_identity_matmul_exact(self, x):
        eye = np.eye(x.shape[0])
        np.testing.assert_array_equal(T.matmul(Var(eye), Var(x)).value, x)

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_concat_split_round_trip(self, data):
        n = data.draw(st.integers(1, 4))
        widths = data.draw(st.lists(st.integers(1, 4), min_size=1, max_size=4))
        parts = [data.draw(arrays(np.float64, (n, w), elements=finite)) for w in widths]
        back = T.split_cols(T.concat_cols([Var(p) for p in parts]), widths)
        for a, b in zip(parts, back):
            assert a.tobytes() == b.value.tobytes()

    @settings(max_examples=50, deadline=None)
    @given(matrices(5))
    def test_outputs_finite(self, x):
        for op in (T.tanh_ew, T.sigmoid_ew, T.softmax_rows):
            assert np.all(np.isfinite(op(Var(x)).value))


class TestGradStore:
    def test_two_backward_passes_add(self):
        x = np.arange(6.0).reshape(2, 3)
        store = GradStore()
        for _ in range(2):
            tape = Tape()
            v = tape.watch(x, name="x")
            tape.backward(T.sum_all(T.scale(v, 3.0)), store)
        np.testing.assert_array_equal(store["x"], np.full((2, 3), 6.0))
        store.zero()
        assert not store["x"].any()

    def test_shape_mismatch(self):
        store = GradStore({"w": np.zeros((2, 2))})
        with pytest.raises(ShapeError):
            store.accumulate("w", np.zeros((2, 3)))

    def test_unused_param_gets_zero_grad(self):
        tape = Tape()
        a = tape.watch(np.ones((2, 2)), name="a")
        tape.watch(np.ones((3, 1)), name="unused")
        store = tape.backward(T.sum_all(a))
        np.testing.assert_array_equal(store["unused"], np.zeros((3, 1)))

    def test_backward_needs_scalar(self):
        tape = Tape()
        a = tape.watch(np.ones((2, 2)), name="a")
        with pytest.raises(ShapeError):
            tape.backward(T.tanh_ew(a))


class TestGradCheck:
    def test_sum_is_exact(self, rng):
        report = T.grad_check(lambda v: T.sum_all(v[0]), [rng.normal(size=(3, 5))], tol=1e-6)
        assert report.passed
        assert report.max_rel_error < 1e-9

    def test_tanh_at_zero(self):
        tape = Tape()
        v = tape.watch(np.zeros((2, 3)), name="x")
        store = tape.backward(T.sum_all(T.tanh_ew(v)))
        np.testing.assert_array_equal(store["x"], np.ones((2, 3)))
        assert T.grad_check(lambda v: T.sum_all(T.tanh_ew(v[0])), [np.zeros((2, 3))]).passed

    def test_flags_wrong_gradient(self, rng):
        def bad_square(v):
            # forward x*x but backward records only one factor
            x = v[0]
            return T.sum_all(T.hadamard(x, Var(x.value)))

        report = T.grad_check(bad_square, [rng.normal(size=(2, 2)) + 3], tol=1e-6)
        assert not report.passed
        assert report.failures()[0].name == "p0"

    def test_nondeterministic_function_rejected(self):
        counter = iter(range(100))

        def f(v):
            return T.scale(T.sum_all(v[0]), 1.0 + next(counter))

        with pytest.raises(NumericError, match="deterministic"):
            T.grad_check(f, [np.ones((1, 1))])

    def test_non_finite_param_rejected(self):
        with pytest.raises(NumericError):
            T.grad_check(lambda v: T.sum_all(v[0]), [np.array([[np.nan]])])
