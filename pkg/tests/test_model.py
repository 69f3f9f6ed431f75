import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusedrive import tensor as T
from fusedrive.backbone import backbone_forward, expected_token_counts, merge_tokens, patchify
from fusedrive.config import ConfigError, LossWeights, ModelConfig, tiny_model
from fusedrive.decoder import TokenLayout
from fusedrive.heads import compute_losses, prefer, prefer_reference
from fusedrive.layers import init_linear
from fusedrive.model import DrivingModel
from fusedrive.tensor import ShapeError, Tensor


def random_batch(cfg, b=2, seed=0, n_side=None):
    rng = np.random.default_rng(seed)
    s = cfg.image_size
    side_shape = (b, cfg.in_channels, s, s) if not n_side else (b, n_side, cfg.in_channels, s, s)
    return {"main": rng.random((b, cfg.in_channels, s, s)), "side": rng.random(side_shape),
            "speed": rng.random(b) * 6, "command": rng.integers(0, cfg.n_commands, b),
            "target": rng.standard_normal((b, 2)) * 10}


def random_label(cfg, b=2, seed=1):
    rng = np.random.default_rng(seed)
    return {"waypoints": rng.standard_normal((b, cfg.n_waypoints, 2)), "control": rng.random((b, 3)),
            "target_speed": rng.random(b) * 6, "latent": rng.standard_normal((b, cfg.latent_dim))}


# ---------------------------------------------------------------------------
# backbone


def test_patchify_layout():
    img = np.arange(2 * 4 * 4, dtype=np.float64).reshape(1, 2, 4, 4)
    p = patchify(Tensor(img), 2).data
    assert p.shape == (1, 4, 8)
    # second patch is the top-right 2x2 block, channel-major
    np.testing.assert_array_equal(p[0, 1], np.concatenate([img[0, 0, :2, 2:].ravel(), img[0, 1, :2, 2:].ravel()]))


def test_merge_tokens_groups_2x2_neighbours(rng):
    x = np.arange(16, dtype=np.float64).reshape(1, 16, 1)
    m = init_linear(rng, 4, 4)
    m.w.data = np.eye(4)
    m.b.data = np.zeros(4)
    out = merge_tokens(Tensor(x), 4, m).data
    np.testing.assert_array_equal(out[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(out[0, 3], [10, 11, 14, 15])


def test_merge_tokens_rejects_odd_grid(rng):
    with pytest.raises(ShapeError):
        merge_tokens(Tensor(np.zeros((1, 9, 2))), 3, init_linear(rng, 8, 2))


def test_stage_token_counts_follow_merges():
    cfg = ModelConfig()
    m = DrivingModel(cfg)
    out = m(random_batch(cfg, b=1))
    assert out.stage_tokens == expected_token_counts(cfg) == [(64, 64), (16, 16), (4, 4)]


def test_two_side_views_double_side_tokens(tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, n_side_views=2)
    out = DrivingModel(cfg)(random_batch(cfg, n_side=2))
    one = DrivingModel(tiny_cfg)(random_batch(tiny_cfg))
    assert out.layout.n_side == 2 * one.layout.n_side
    assert out.waypoints.shape == one.waypoints.shape


def test_fusion_off_leaves_other_weights_unchanged(tiny_cfg):
    on = DrivingModel(tiny_cfg, seed=3)
    off = DrivingModel(dataclasses.replace(tiny_cfg, fusion=False), seed=3)
    assert set(off.params) < set(on.params)
    extra = set(on.params) - set(off.params)
    assert all(".fusion" in k or k.startswith("backbone.fusion") for k in extra)
    for k, p in off.params.items():
        np.testing.assert_array_equal(p.data, on.params[k].data, err_msg=k)


def test_fusion_changes_output(tiny_cfg):
    on = DrivingModel(tiny_cfg, seed=3)
    off = DrivingModel(dataclasses.replace(tiny_cfg, fusion=False), seed=3)
    b = random_batch(tiny_cfg)
    assert not np.allclose(on(b).waypoints.data, off(b).waypoints.data)


def test_wrong_image_size_rejected(tiny_cfg):
    m = DrivingModel(tiny_cfg)
    b = random_batch(tiny_cfg)
    b["main"] = b["main"][..., :32, :32]
    with pytest.raises(ShapeError, match="backbone_forward"):
        m(b)


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(image_size=60).validate()
    with pytest.raises(ConfigError):
        ModelConfig(readout="cls").validate()


# ---------------------------------------------------------------------------
# decoder


def test_layout_offsets():
    lay = TokenLayout(2, 3, 4, 16)
    assert lay.offsets == (2, 5, 9)
    assert lay.total == 25
    assert lay.slices()["main"] == slice(9, 25)


def test_sequence_order_and_attention_shape(tiny_cfg):
    out = DrivingModel(tiny_cfg)(random_batch(tiny_cfg, b=3))
    lay = out.layout
    assert (lay.n_pred, lay.n_meas, lay.n_side, lay.n_main) == (2, 3, 4, 4)
    assert out.attention.shape == (3, tiny_cfg.decoder_depth, tiny_cfg.decoder_heads, lay.total, lay.total)
    np.testing.assert_allclose(out.attention.sum(-1), 1.0, atol=1e-6)


def test_mean_pool_has_no_prediction_tokens(tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, readout="mean_pool")
    m = DrivingModel(cfg)
    out = m(random_batch(cfg))
    assert out.layout.n_pred == 0
    assert not any(k.startswith("decoder.pred") for k in m.params)


def test_learnable_vectors_receive_gradient(tiny_cfg):
    m = DrivingModel(tiny_cfg)
    with T.Tape() as tape:
        out = m(random_batch(tiny_cfg))
        loss = compute_losses(out, random_label(tiny_cfg), LossWeights()).total
    T.backward(tape, loss)
    assert np.abs(m.params["decoder.pred"].grad).sum() > 0


# ---------------------------------------------------------------------------
# heads and losses


def test_output_ranges(tiny_cfg):
    out = DrivingModel(tiny_cfg)(random_batch(tiny_cfg, b=4))
    c = out.control.data
    assert ((c[:, 0] >= 0) & (c[:, 0] <= 1)).all()
    assert ((c[:, 1] >= -1) & (c[:, 1] <= 1)).all()
    assert ((c[:, 2] >= 0) & (c[:, 2] <= 1)).all()
    assert out.waypoints.shape == (4, tiny_cfg.n_waypoints, 2)
    assert out.est_control.shape == out.est_waypoint.shape == (4,)


def test_prefer_known_values():
    assert prefer(0.0, 0.0) == 0.5
    assert prefer(0.0, 1.0) == pytest.approx(1 / (1 + math.exp(-1)))
    # control branch predicted worse -> trust it less
    assert prefer(2.0, 0.1) < 0.5


def test_prefer_is_finite_for_extreme_estimates():
    assert prefer(1e4, 0.0) == 0.0
    assert prefer(0.0, 1e4) == 1.0
    assert np.isfinite(prefer(np.array([-1e6, 1e6]), np.array([1e6, -1e6]))).all()


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.1, 3), st.floats(0.1, 3))
def test_prefer_matches_ratio_form(lc, lw, kc, kw):
    assert prefer(lc, lw, kc, kw) == pytest.approx(prefer_reference(lc, lw, kc, kw), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.01, 5))
def test_prefer_monotone(lc, lw, d):
    p = prefer(lc, lw)
    assert 0.0 <= p <= 1.0
    assert prefer(lc + d, lw) <= p
    assert prefer(lc, lw + d) >= p


def test_loss_components_match_numpy_oracle(tiny_cfg):
    out = DrivingModel(tiny_cfg).astype(np.float64)(random_batch(tiny_cfg, b=3))
    lab = random_label(tiny_cfg, b=3)
    lb = compute_losses(out, lab, LossWeights())
    w = np.abs(out.waypoints.data - lab["waypoints"]).mean(axis=(1, 2))
    c = np.abs(out.control.data - lab["control"]).mean(axis=1)
    s = np.abs(out.speed.data[:, 0] - lab["target_speed"]).mean()
    f = ((out.feature.data - lab["latent"]) ** 2).mean()
    e = ((out.est_control.data - c) ** 2 + (out.est_waypoint.data - w) ** 2).mean()
    got = lb.scalars()
    for k, v in (("waypoint", w.mean()), ("control", c.mean()), ("speed", s), ("feature", f), ("estimator", e)):
        assert got[k] == pytest.approx(v, rel=1e-9), k
    assert got["total"] == pytest.approx(w.mean() + c.mean() + s + f + e, rel=1e-9)


def test_zero_feature_weight_drops_term(tiny_cfg):
    out = DrivingModel(tiny_cfg).astype(np.float64)(random_batch(tiny_cfg))
    lab = random_label(tiny_cfg)
    full = compute_losses(out, lab, LossWeights()).scalars()
    nof = compute_losses(out, lab, LossWeights(feature=0.0)).scalars()
    assert nof["total"] == pytest.approx(full["total"] - full["feature"], rel=1e-9)


def test_estimator_targets_are_constants(tiny_cfg):
    m = DrivingModel(tiny_cfg)
    with T.Tape() as tape:
        out = m(random_batch(tiny_cfg))
        lb = compute_losses(out, random_label(tiny_cfg), LossWeights(0, 0, 0, 0, 1))
    T.backward(tape, lb.total)
    # only the estimator path carries gradient: the heads' output layers get none
    assert np.abs(m.params["control.out.w"].grad).sum() == 0
    assert np.abs(m.params["mixer.control.w"].grad).sum() > 0


def test_missing_label_field(tiny_cfg):
    out = DrivingModel(tiny_cfg)(random_batch(tiny_cfg))
    lab = random_label(tiny_cfg)
    del lab["latent"]
    with pytest.raises(KeyError, match="latent"):
        compute_losses(out, lab, LossWeights())


def test_state_dict_round_trip(tiny_cfg):
    a, b = DrivingModel(tiny_cfg, seed=1), DrivingModel(tiny_cfg, seed=2)
    b.load_state_dict(a.state_dict())
    batch = random_batch(tiny_cfg)
    np.testing.assert_array_equal(a(batch).waypoints.data, b(batch).waypoints.data)
    with pytest.raises(KeyError):
        b.load_state_dict({})
