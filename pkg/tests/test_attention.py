import numpy as np
import pytest

from fusedrive import tensor as T
from fusedrive.attention import (cascaded_group_attention, init_attention, init_block, init_cascaded,
                                 mlp, multi_head_attention, scaled_dot_attention, transformer_block)
from fusedrive.layers import Linear, param
from fusedrive.tensor import ShapeError, Tensor


def test_scaled_dot_attention_hand_example():
    q = Tensor(np.array([[1.0, 0.0]]))
    k = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    v = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out, attn = scaled_dot_attention(q, k, v)
    e = np.exp(1 / np.sqrt(2))
    w = np.array([e, 1.0]) / (e + 1.0)
    np.testing.assert_allclose(attn.data[0], w, rtol=1e-6)
    np.testing.assert_allclose(out.data[0], w @ v.data, rtol=1e-6)


def test_attention_rows_are_stochastic(rng):
    w = init_attention(rng, 16, heads=4)
    x = Tensor(rng.standard_normal((3, 9, 16)))
    _, a = multi_head_attention(x, x, w)
    assert a.shape == (3, 4, 9, 9)
    np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-6)


def test_cross_attention_on_same_source_is_self_attention(rng):
    w = init_attention(rng, 8, heads=2)
    x = Tensor(rng.standard_normal((2, 5, 8)))
    y = Tensor(x.data.copy())
    o1, a1 = multi_head_attention(x, x, w)
    o2, a2 = multi_head_attention(x, y, w)
    np.testing.assert_array_equal(o1.data, o2.data)
    np.testing.assert_array_equal(a1.data, a2.data)


def test_cross_attention_shapes(rng):
    w = init_attention(rng, 8, d_kv=4, heads=2)
    out, a = multi_head_attention(Tensor(rng.standard_normal((2, 3, 8))), Tensor(rng.standard_normal((2, 7, 4))), w)
    assert out.shape == (2, 3, 8)
    assert a.shape == (2, 2, 3, 7)


def test_key_projection_has_no_bias(rng):
    assert init_attention(rng, 8, heads=2).k.b is None


def test_head_divisibility_checked(rng):
    with pytest.raises(ShapeError):
        init_attention(rng, 10, heads=4)


def test_query_dim_mismatch(rng):
    w = init_attention(rng, 8, heads=2)
    x = Tensor(rng.standard_normal((1, 3, 6)))
    with pytest.raises(ShapeError, match="multi_head_attention"):
        multi_head_attention(x, x, w)


def test_single_group_cascade_equals_single_head_attention(rng):
    d = 8
    cga = init_cascaded(rng, d, 1)
    cga.proj = Linear(param(np.eye(d)), param(np.zeros(d)))
    x = Tensor(rng.standard_normal((2, 6, d)))
    out_c, maps = cascaded_group_attention(x, cga)
    out_m, a = multi_head_attention(x, x, cga.groups[0])
    np.testing.assert_allclose(out_c.data, out_m.data, rtol=1e-6, atol=1e-7)
    np.testing.assert_array_equal(maps[0].data, a.data)


def test_cascade_feeds_previous_group(rng):
    cga = init_cascaded(rng, 8, 2)
    x = Tensor(rng.standard_normal((1, 5, 8)))
    with_c, _ = cascaded_group_attention(x, cga, cascade=True)
    without, _ = cascaded_group_attention(x, cga, cascade=False)
    assert not np.allclose(with_c.data, without.data)
    # the first group's half is unaffected before mixing; check via identity projection
    cga.proj = Linear(param(np.eye(8)), param(np.zeros(8)))
    a, _ = cascaded_group_attention(x, cga, cascade=True)
    b, _ = cascaded_group_attention(x, cga, cascade=False)
    np.testing.assert_array_equal(a.data[..., :4], b.data[..., :4])


def test_cascaded_rows_stochastic(rng):
    blk = init_block(rng, 12, groups=3)
    _, maps = transformer_block(Tensor(rng.standard_normal((2, 4, 12))), blk)
    assert len(maps) == 3
    for m in maps:
        np.testing.assert_allclose(m.data.sum(-1), 1.0, atol=1e-6)


def test_block_without_residuals_is_mlp_of_attention(rng):
    blk = init_block(rng, 8, heads=2)
    x = Tensor(rng.standard_normal((2, 3, 8)))
    out, _ = transformer_block(x, blk, residuals=False)
    att, _ = multi_head_attention(x, x, blk.attn)
    np.testing.assert_allclose(out.data, mlp(att, blk).data, rtol=1e-6)


def test_zero_output_block_is_identity(rng):
    blk = init_block(rng, 8, heads=2, zero_out=True)
    x = Tensor(rng.standard_normal((2, 3, 8)))
    np.testing.assert_array_equal(transformer_block(x, blk)[0].data, x.data)


def test_block_gradients_reach_every_parameter(rng):
    from fusedrive.layers import named_parameters
    blk = init_block(rng, 8, heads=2)
    x = Tensor(rng.standard_normal((2, 4, 8)))
    with T.Tape() as tape:
        loss = T.sum(T.mul(transformer_block(x, blk)[0], Tensor(rng.standard_normal((2, 4, 8)))))
    T.backward(tape, loss)
    for name, p in named_parameters(blk):
        assert np.abs(p.grad).sum() > 0, name
