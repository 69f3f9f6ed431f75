import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from fusedrive import tensor as T
from fusedrive.gradcheck import check_primitives
from fusedrive.tensor import NonFiniteError, ShapeError, Tape, TapeError, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestForward:
    def test_matmul_and_add(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        w = Tensor([[1.0, 0.0], [1.0, 1.0]])
        out = T.add(T.matmul(a, w), Tensor([0.5, -0.5]))
        np.testing.assert_allclose(out.data, [[3.5, 1.5], [7.5, 3.5]])

    def test_softmax_rows(self, rng):
        x = Tensor(rng.standard_normal((4, 7)) * 30)
        s = T.softmax(x).data
        np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)
        assert (s >= 0).all()

    def test_gelu_reference_points(self):
        x = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
        ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-6)

    def test_layer_norm_normalises(self, rng):
        x = Tensor(rng.standard_normal((3, 16)) * 5 + 2, dtype=np.float64)
        y = T.layer_norm(x).data
        np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(y.std(-1), 1.0, atol=1e-6)

    def test_mean_over_axes(self, rng):
        x = rng.standard_normal((2, 3, 4))
        np.testing.assert_allclose(T.mean(Tensor(x), axis=(0, 2)).data, x.mean(axis=(0, 2)), rtol=1e-6)


class TestErrors:
    def test_broadcast_must_be_suffix(self):
        with pytest.raises(ShapeError, match="add"):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))

    def test_matmul_shape_error_names_op(self):
        with pytest.raises(ShapeError) as e:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert e.value.op == "matmul"
        assert (2, 3) in e.value.shapes

    def test_non_finite_output_raises(self):
        with pytest.raises(NonFiniteError):
            T.mul(Tensor([1e30], dtype=np.float32), Tensor([1e30], dtype=np.float32))

    def test_backward_needs_scalar(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(TapeError, match="scalar"):
            T.backward(tape, y)

    def test_absent_leaf(self):
        x, z = leaf([1.0]), leaf([2.0])
        with Tape() as tape:
            y = T.sum(T.mul(x, x))
        with pytest.raises(TapeError, match="absent"):
            T.backward(tape, y, [z])


class TestTape:
    def test_nothing_recorded_outside_tape(self):
        x = leaf([1.0, 2.0])
        y = T.mul(x, x)
        assert not y.requires_grad
        assert T.active_tape() is None

    def test_gradient_of_square(self):
        x = leaf([1.0, -2.0, 3.0])
        with Tape() as tape:
            y = T.sum(T.mul(x, x))
        (g,) = T.backward(tape, y, [x])
        np.testing.assert_allclose(g, [2.0, -4.0, 6.0])

    def test_unused_leaf_gets_zero_gradient(self):
        x, z = leaf([1.0]), leaf([5.0, 6.0])
        with Tape() as tape:
            y = T.add(T.sum(x), T.scale(T.sum(z), 0.0))
        T.backward(tape, y)
        np.testing.assert_array_equal(z.grad, [0.0, 0.0])

    def test_broadcast_gradient_sums_leading_axes(self):
        x = leaf(np.ones((3, 2)))
        b = leaf([1.0, 2.0])
        with Tape() as tape:
            y = T.sum(T.add(x, b))
        T.backward(tape, y)
        np.testing.assert_array_equal(b.grad, [3.0, 3.0])

    def test_no_record_suspends(self):
        x = leaf([1.0])
        with Tape() as tape:
            with T.no_record():
                T.mul(x, x)
        assert len(tape) == 0

    def test_all_primitives_match_finite_differences(self):
        rep = check_primitives(seed=3)
        assert rep.ok, "\n".join(rep.lines())


class TestAdam:
    def test_first_step_matches_hand_computation(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        g = np.array([0.5, -0.1])
        st = T.AdamState(lr=0.1, weight_decay=0.01)
        T.adam_step({"p": p}, {"p": g}, st)
        # bias-corrected first step: m_hat = g, v_hat = g^2
        upd = g / (np.abs(g) + 1e-8) + 0.01 * np.array([1.0, -2.0])
        np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) - 0.1 * upd, rtol=1e-12)
        assert st.step == 1

    def test_missing_gradient_is_zero(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        st = T.AdamState(lr=0.1, weight_decay=0.0)
        T.adam_step({"p": p}, {}, st)
        assert p.data[0] == 1.0

    def test_rejects_non_positive_lr(self):
        with pytest.raises(ValueError):
            T.adam_step({}, {}, T.AdamState(), lr=0.0)


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 5e-4), (29, 5e-4), (30, 2.5e-4), (59, 2.5e-4),
                                          (60, 1e-4), (90, 5e-5), (119, 5e-5)])
    def test_full_scale_recipe(self, epoch, lr):
        assert T.lr_at(epoch) == pytest.approx(lr, rel=1e-12)

    def test_desk_scale_lands_proportionally(self):
        s = T.LRSchedule(phase_epochs=6, halve_every=3)
        assert [T.lr_at(e, s) for e in (0, 3, 6, 9)] == pytest.approx([5e-4, 2.5e-4, 1e-4, 5e-5])

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            T.lr_at(-1)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    s = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-9)
    assert (s >= 0).all()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
       hnp.arrays(np.float64, (4,), elements=st.floats(-10, 10)))
def test_add_commutes_with_broadcast(a, b):
    np.testing.assert_array_equal(T.add(Tensor(a), Tensor(b)).data, T.add(Tensor(b), Tensor(a)).data)
