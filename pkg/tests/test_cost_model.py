import dataclasses
import json

import numpy as np
import pytest

from fusedrive.config import ModelConfig, StreamConfig, tiny_model
from fusedrive.cost_model import (analyze, attention_cost, count_macs, count_params, decoder_tokens, fusion_cost,
                                  linear_cost, matmul_macs, quadratic_macs)
from fusedrive.model import DrivingModel


def random_config(rng) -> ModelConfig:
    stages = int(rng.integers(1, 4))
    patch = int(rng.choice([4, 8])) if stages < 3 else 8
    heads = int(rng.choice([1, 2]))
    dims_m = tuple(int(x) for x in rng.choice([8, 16, 24], stages))
    dims_s = tuple(min(int(x), m) for x, m in zip(rng.choice([8, 16], stages), dims_m))
    groups_m = tuple(int(rng.choice([g for g in (1, 2, 4) if d % g == 0])) for d in dims_m)
    groups_s = tuple(int(rng.choice([g for g in (1, 2) if d % g == 0])) for d in dims_s)
    return ModelConfig(
        image_size=64 if patch == 8 else 32, patch=patch,
        main=StreamConfig(dims_m, tuple(int(x) for x in rng.integers(0, 3, stages)), groups_m),
        side=StreamConfig(dims_s, tuple(int(x) for x in rng.integers(0, 3, stages)), groups_s),
        n_side_views=int(rng.integers(1, 3)), fusion=bool(rng.integers(0, 2)), fusion_heads=heads,
        decoder_dim=int(rng.choice([8, 16])), decoder_depth=int(rng.integers(1, 4)), decoder_heads=heads,
        readout=str(rng.choice(["learnable_vector", "mean_pool"])), n_waypoints=int(rng.integers(2, 6)),
        control_hidden=int(rng.choice([8, 16])), latent_dim=int(rng.integers(1, 9)),
    ).validate()


def test_linear_and_matmul_hand_examples():
    row = linear_cost(2, 5)
    assert (row.params, row.macs) == (15, 15)
    assert linear_cost(2, 5, tokens=3).macs == 45
    assert linear_cost(2, 5, bias=False).params == 10
    assert matmul_macs(2, 3, 4) == 24


def test_attention_hand_example():
    r = attention_cost(4, 3, 5, heads=2)
    rows = {x.name: x for x in r.rows}
    assert rows["k"].params == 16           # no key bias
    assert rows["q"].params == rows["v"].params == rows["o"].params == 20
    assert rows["qk"].macs == 2 * 3 * 5 * 2 + 2 * 3 * 5
    assert rows["softmax"].macs == 30
    assert rows["av"].macs == 2 * 3 * 5 * 2


@pytest.mark.parametrize("cfg", [tiny_model(), ModelConfig()], ids=["tiny", "desk"])
def test_presets_match_instantiated_model(cfg):
    assert count_params(cfg).params == DrivingModel(cfg).n_params()


def test_frozen_preset_counts():
    assert count_params(tiny_model()).params == 35296
    assert count_params(ModelConfig()).params == 439312


@pytest.mark.parametrize("seed", range(5))
def test_random_configs_match_instantiated_model(seed):
    cfg = random_config(np.random.default_rng(seed))
    assert count_params(cfg).params == DrivingModel(cfg).n_params()


def test_fusion_delta_is_exact():
    on = tiny_model()
    off = dataclasses.replace(on, fusion=False)
    assert fusion_cost(on) == count_params(on).params - count_params(off).params == 3264
    assert fusion_cost(off) == 0


def test_per_stage_fusion_switch():
    cfg = ModelConfig(fusion_stages=(True, False, True))
    full = ModelConfig()
    none = dataclasses.replace(full, fusion=False)
    assert none.fuse_at(0) is False
    assert count_params(none).params < count_params(cfg).params < count_params(full).params
    assert count_params(cfg).params == DrivingModel(cfg).n_params()


def test_decoder_quadratic_term_scales_with_tokens_squared():
    small = ModelConfig(image_size=64)
    big = ModelConfig(image_size=128)
    ts, tb = decoder_tokens(small), decoder_tokens(big)
    ratio = quadratic_macs(analyze(big)) / quadratic_macs(analyze(small))
    assert ratio == pytest.approx((tb / ts) ** 2, rel=1e-12)
    assert ratio > tb / ts > 1  # superlinear in the token count


def test_monotone_in_depth_and_width():
    base = ModelConfig()
    deeper = dataclasses.replace(base, decoder_depth=base.decoder_depth + 1)
    wider = dataclasses.replace(base, decoder_dim=96, decoder_heads=4)
    for other in (deeper, wider):
        assert analyze(other).params > analyze(base).params
        assert analyze(other).macs > analyze(base).macs


def test_flops_are_twice_macs():
    r = analyze(tiny_model())
    assert r.flops == 2 * r.macs
    d = json.loads(r.to_json())
    assert d["total_params"] == r.params and d["total_flops"] == r.flops


def test_count_macs_rejects_wrong_input_size():
    with pytest.raises(ValueError):
        count_macs(tiny_model(), image_size=128)


def test_report_text_has_totals():
    text = analyze(tiny_model()).to_text()
    assert "35,296" in text
    assert text.splitlines()[-1].startswith("flops")
