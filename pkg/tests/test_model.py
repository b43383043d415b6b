"""Vision transformer forward/backward checks on tiny configurations."""

import numpy as np
import pytest

from modlab.model import (
    ModelConfig,
    alternating_pattern,
    check_params,
    cross_entropy,
    dense_block_forward,
    init_params,
    layer_view,
    mhsa,
    mlp_block,
    model_forward,
    param_shapes,
    patch_embed,
)
from modlab.tensor import (
    ContractError,
    IndexSelectionError,
    Tape,
    Tensor,
    backward,
    finite_diff_check,
    mul,
    sum_all,
)

RNG = np.random.default_rng(7)


def tiny_config(**overrides):
    base = dict(
        image_size=32,
        patch_size=16,
        channels=1,
        depth=2,
        dim=8,
        heads=2,
        num_classes=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# config and parameters
# ---------------------------------------------------------------------------


def test_token_counts():
    assert tiny_config().num_tokens == 5
    assert ModelConfig(image_size=224, patch_size=16).num_tokens == 197


def test_config_validation():
    with pytest.raises(ContractError):
        tiny_config(image_size=30)
    with pytest.raises(ContractError):
        tiny_config(dim=9)
    with pytest.raises(ContractError):
        tiny_config(capacity=0.0, mod_pattern=(1,))
    with pytest.raises(ContractError):
        tiny_config(router="attention", mod_pattern=(0,))
    with pytest.raises(ContractError):
        tiny_config(mod_pattern=(5,))


def test_alternating_pattern():
    assert alternating_pattern(12) == (1, 3, 5, 7, 9, 11)
    assert alternating_pattern(12, start=4) == (4, 6, 8, 10)


def test_param_name_set_is_exact():
    cfg = tiny_config(mod_pattern=(1,), capacity=0.5, router="standard")
    params = init_params(cfg, seed=0)
    assert set(params) == set(param_shapes(cfg))
    assert "router.1.W_r" in params
    assert params["router.1.W_r"].dims == (cfg.dim, 1)
    check_params(params, cfg)
    extra = dict(params)
    extra["orphan"] = Tensor(np.zeros((1, 1)))
    with pytest.raises(ContractError):
        check_params(extra, cfg)
    del extra["orphan"], extra["cls_token"]
    with pytest.raises(ContractError):
        check_params(extra, cfg)


# ---------------------------------------------------------------------------
# patch embedding
# ---------------------------------------------------------------------------


def test_patch_embed_zero_image_rows_equal_bias():
    cfg = tiny_config()
    params = init_params(cfg, seed=1)
    params["pos_embed"] = Tensor(np.zeros(params["pos_embed"].dims))
    tokens = patch_embed(np.zeros((1, 32, 32), dtype=np.float32), params, cfg)
    bias = params["patch_embed.bias"].data
    for row in tokens.data[1:]:
        np.testing.assert_allclose(row, bias.reshape(-1), atol=1e-7)


def test_patch_embed_shape_check():
    cfg = tiny_config()
    params = init_params(cfg, seed=1)
    with pytest.raises(Exception):
        patch_embed(np.zeros((1, 16, 32), dtype=np.float32), params, cfg)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def test_mhsa_zero_projections_give_uniform_maps():
    cfg = tiny_config()
    params = init_params(cfg, seed=2)
    lp = layer_view(params, 0)
    lp["attn.wq"] = Tensor(np.zeros((8, 8)))
    lp["attn.wk"] = Tensor(np.zeros((8, 8)))
    out = mhsa(Tensor(RNG.normal(size=(5, 8)).astype(np.float32)), lp, cfg)
    for head in out.maps.heads:
        np.testing.assert_allclose(head.data, 1.0 / 5, atol=1e-6)


def test_mhsa_single_token():
    cfg = tiny_config()
    params = init_params(cfg, seed=3)
    lp = layer_view(params, 0)
    x = Tensor(RNG.normal(size=(1, 8)).astype(np.float32))
    out = mhsa(x, lp, cfg)
    for head in out.maps.heads:
        np.testing.assert_allclose(head.data, [[1.0]])
    expect = (x.data @ lp["attn.wv"].data) @ lp["attn.wo"].data
    np.testing.assert_allclose(out.tokens.data, expect, atol=1e-6)


def test_mhsa_hand_computed_single_head():
    cfg = ModelConfig(
        image_size=32, patch_size=16, channels=1, depth=1, dim=1, heads=1, num_classes=2
    )
    params = init_params(cfg, seed=0)
    lp = layer_view(params, 0)
    lp["attn.wq"] = Tensor([[2.0]])
    lp["attn.wk"] = Tensor([[1.0]])
    x = Tensor([[1.0], [2.0]])
    out = mhsa(x, lp, cfg)
    logits = np.array([[2.0, 4.0], [4.0, 8.0]])  # QK^T / sqrt(1)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    expect = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out.maps.heads[0].data, expect, atol=1e-6)


def test_attention_maps_row_stochastic_every_layer():
    cfg = tiny_config(depth=3)
    params = init_params(cfg, seed=4)
    batch = RNG.normal(size=(2, 1, 32, 32)).astype(np.float32)
    _, all_maps, _ = model_forward(batch, params, cfg)
    for sample_maps in all_maps:
        assert len(sample_maps) == cfg.depth
        for layer_maps in sample_maps:
            sums = layer_maps.sum(axis=2)
            np.testing.assert_allclose(sums, 1.0, atol=1e-5)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def test_mlp_zero_weights_zero_output():
    cfg = tiny_config()
    params = init_params(cfg, seed=5)
    lp = layer_view(params, 0)
    lp["mlp.w1"] = Tensor(np.zeros((8, 32)))
    lp["mlp.w2"] = Tensor(np.zeros((32, 8)))
    out = mlp_block(Tensor(RNG.normal(size=(5, 8)).astype(np.float32)), lp, cfg)
    np.testing.assert_array_equal(out.data, 0.0)


def test_dense_block_zero_weights_is_identity():
    cfg = tiny_config()
    params = init_params(cfg, seed=6)
    lp = layer_view(params, 0)
    for name in ("attn.wo", "mlp.w2"):
        lp[name] = Tensor(np.zeros(lp[name].dims))
    x = Tensor(RNG.normal(size=(5, 8)).astype(np.float32))
    out = dense_block_forward(x, lp, cfg)
    np.testing.assert_allclose(out.tokens.data, x.data, atol=1e-7)
    assert out.tokens.dims == x.dims


def test_dense_block_gradient():
    cfg = tiny_config()
    params = init_params(cfg, seed=8)
    lp = layer_view(params, 0)
    w = Tensor(RNG.normal(size=(5, 8)).astype(np.float32))
    err = finite_diff_check(
        lambda t: sum_all(mul(dense_block_forward(t, lp, cfg).tokens, w)),
        Tensor(RNG.normal(size=(5, 8)).astype(np.float32)),
    )
    assert err < 1e-3


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


def test_empty_mod_pattern_is_plain_vit():
    cfg = tiny_config()
    params = init_params(cfg, seed=9)
    batch = RNG.normal(size=(2, 1, 32, 32)).astype(np.float32)
    logits, _, log = model_forward(batch, params, cfg)
    assert logits.dims == (2, 3)
    assert log == []


def test_full_capacity_attention_routing_matches_dense():
    cfg = tiny_config(depth=3, mod_pattern=(1, 2), capacity=1.0, router="attention")
    params = init_params(cfg, seed=10)
    batch = RNG.normal(size=(2, 1, 32, 32)).astype(np.float32)
    routed, _, log = model_forward(batch, params, cfg)
    dense, _, _ = model_forward(batch, params, cfg.dense_twin())
    np.testing.assert_allclose(routed.data, dense.data, atol=1e-5)
    assert all(len(entry.selected[0]) == entry.k == cfg.num_tokens - 1 for entry in log)


def test_token_count_invariant_under_routing():
    cfg = tiny_config(depth=4, mod_pattern=(1, 3), capacity=0.5, router="attention")
    params = init_params(cfg, seed=11)
    logits, all_maps, _ = model_forward(
        RNG.normal(size=(1, 1, 32, 32)).astype(np.float32), params, cfg
    )
    assert logits.dims == (1, 3)
    # Routed layers attend over their subset only; dense layers over all 5.
    assert all_maps[0][0].shape[1] == 5
    assert all_maps[0][1].shape[1] < 5


def test_full_model_gradient_matches_finite_differences():
    cfg = tiny_config()
    params = init_params(cfg, seed=12)
    batch = RNG.normal(size=(2, 1, 32, 32)).astype(np.float32)
    labels = [0, 2]

    def loss_for(name):
        def f(t):
            trial = dict(params)
            trial[name] = t
            logits, _, _ = model_forward(batch, trial, cfg)
            return cross_entropy(logits, labels)

        return f

    for name in ("pos_embed", "blocks.0.attn.wq", "blocks.1.mlp.w1", "head.weight"):
        assert finite_diff_check(loss_for(name), params[name]) < 1e-3, name


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((2, 7), dtype=np.float32))
    assert abs(cross_entropy(logits, [1, 3]).item() - np.log(7)) < 1e-6


def test_cross_entropy_confident_logit():
    row = np.zeros((1, 4), dtype=np.float32)
    row[0, 2] = 50.0
    assert cross_entropy(Tensor(row), [2]).item() < 1e-6


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = Tensor(RNG.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
    labels = [0, 1, 3]
    with Tape() as tape:
        backward(cross_entropy(logits, labels), tape)
    e = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    soft = e / e.sum(axis=1, keepdims=True)
    onehot = np.zeros_like(soft)
    onehot[np.arange(3), labels] = 1.0
    np.testing.assert_allclose(logits.grad, (soft - onehot) / 3, atol=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexSelectionError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])
