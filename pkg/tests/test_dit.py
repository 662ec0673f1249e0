import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from i2idit import tensor as T
from i2idit.dit import (
    XL_PRESET_METADATA,
    PRESETS,
    Attention,
    DiTBlock,
    DiTConfig,
    DiTModel,
    conditioning_vector,
    dit_block_forward,
    multi_head_attention,
    parameter_count,
    patchify,
    project_cond,
    timestep_embedding,
    unpatchify,
)
from i2idit.errors import DimensionError, ParameterError
from i2idit.gradcheck import check_gradients
from i2idit.rng import Rng
from i2idit.tensor import Tensor, no_grad

TINY = PRESETS["tiny"]


def randomize(module, rng, scale=0.3):
    """Give every parameter (zero-init ones included) random values."""
    for name, p in module.named_parameters():
        p.data[...] = rng.split(name).normal(p.shape) * scale


def test_patchify_token_count_example():
    z = np.zeros((1, 4, 32, 32))
    assert patchify(z, 4).shape == (1, 64, 64)


def test_whole_image_patch():
    z = Rng(0).normal((2, 3, 4, 4))
    np.testing.assert_array_equal(patchify(z, 4).data, z.reshape(2, 1, -1))


def test_patch_order_is_row_major():
    z = np.arange(16.0).reshape(1, 1, 4, 4)
    tokens = patchify(z, 2).data[0]
    np.testing.assert_array_equal(tokens[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(tokens[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(tokens[2], [8, 9, 12, 13])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 3))
def test_patchify_bijection(B, C, P, gh, gw):
    z = Rng(B * 100 + C).normal((B, C, gh * P, gw * P))
    tokens = patchify(z, P)
    assert tokens.shape == (B, gh * gw, C * P * P)
    np.testing.assert_array_equal(unpatchify(tokens, P, gh * P, gw * P).data, z)


def test_unpatchify_zero_and_single_token():
    np.testing.assert_array_equal(unpatchify(np.zeros((1, 4, 12)), 2, 4, 4).data, np.zeros((1, 3, 4, 4)))
    z = Rng(1).normal((1, 2, 3, 3))
    np.testing.assert_array_equal(unpatchify(patchify(z, 3), 3, 3, 3).data, z)


def test_patch_errors():
    with pytest.raises(DimensionError):
        patchify(np.zeros((1, 1, 5, 4)), 2)
    with pytest.raises(DimensionError):
        unpatchify(np.zeros((1, 3, 4)), 2, 4, 4)


def test_timestep_embedding_examples():
    e = timestep_embedding(0, 16).data
    np.testing.assert_array_equal(e[:8], 0.0)
    np.testing.assert_array_equal(e[8:], 1.0)
    np.testing.assert_array_equal(timestep_embedding(37, 16).data, timestep_embedding(37, 16).data)
    with pytest.raises(ParameterError):
        timestep_embedding(3, 7)


def test_timestep_embedding_table_has_no_collisions():
    table = timestep_embedding(np.arange(200), 64).data
    d = np.linalg.norm(table[:, None] - table[None], axis=-1)
    assert d[~np.eye(200, dtype=bool)].min() > 1e-3


@pytest.mark.parametrize("kwargs", [dict(input_size=6, patch_size=4), dict(hidden_size=30, num_heads=4),
                                    dict(time_embed_dim=9), dict(depth=0)])
def test_config_validation(kwargs):
    with pytest.raises(ParameterError):
        DiTConfig(**kwargs)


def test_xl_preset_metadata():
    xl = PRESETS["dit-xl-256"]
    assert (xl.depth, xl.num_heads, xl.hidden_size) == (28, 16, 1152)
    assert XL_PRESET_METADATA["listed_hidden_size"] == 1156
    assert xl.hidden_size % xl.num_heads == 0


def test_single_kv_token_attention_is_constant():
    rng = Rng(2)
    attn = Attention(8, 2, rng)
    randomize(attn, rng)
    q = rng.normal((1, 5, 8))
    kv = rng.normal((1, 1, 8))
    out = multi_head_attention(q, kv, attn).data
    _, v = np.split(kv @ attn.kv_proj.weight.data + attn.kv_proj.bias.data, 2, axis=-1)
    expected = v @ attn.out_proj.weight.data + attn.out_proj.bias.data
    np.testing.assert_allclose(out, np.broadcast_to(expected, out.shape), atol=1e-12)


def test_attention_is_permutation_invariant_over_keys():
    rng = Rng(3)
    attn = Attention(8, 2, rng)
    q, kv = rng.normal((2, 4, 8)), rng.normal((2, 6, 8))
    perm = rng.gen.permutation(6)
    a = multi_head_attention(q, kv, attn).data
    b = multi_head_attention(q, kv[:, perm], attn).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_attention_head_divisibility():
    with pytest.raises(ParameterError):
        Attention(10, 4, Rng(0))


def test_attention_gradient():
    rng = Rng(4)
    attn = Attention(4, 2, rng)
    x = Tensor(rng.normal((1, 3, 4)), requires_grad=True)
    w = rng.normal((1, 3, 4))
    params = [p for _, p in attn.named_parameters()] + [x]
    assert check_gradients(lambda: T.sum(multi_head_attention(x, x, attn) * w), params) < 1e-4


def test_fresh_block_is_identity():
    rng = Rng(5)
    block = DiTBlock(TINY, rng)
    x = rng.normal((2, 4, 16))
    out = dit_block_forward(x, rng.normal((2, 16)), rng.normal((2, 1, 16)), block)
    np.testing.assert_array_equal(out.data, x)


def test_zero_kv_cross_branch_is_silent():
    rng = Rng(6)
    block = DiTBlock(TINY, rng)
    randomize(block, rng)
    for attn in (block.cross_attn,):
        for lin in (attn.q_proj, attn.kv_proj, attn.out_proj):
            lin.bias.data[...] = 0.0
    x, c = rng.normal((1, 4, 16)), rng.normal((1, 16))
    base = dit_block_forward(x, c, np.zeros((1, 1, 16)), block).data
    block.cross_attn.kv_proj.weight.data[...] *= 7.0  # weights on a zero input cannot matter
    np.testing.assert_allclose(dit_block_forward(x, c, np.zeros((1, 1, 16)), block).data, base, atol=1e-12)


def test_block_gradient():
    rng = Rng(7)
    cfg = DiTConfig(input_size=2, in_channels=1, patch_size=1, hidden_size=8, depth=1, num_heads=2,
                    cond_dim=4, time_embed_dim=4, mlp_ratio=2)
    block = DiTBlock(cfg, rng)
    randomize(block, rng)
    x = Tensor(rng.normal((1, 2, 8)), requires_grad=True)
    c = Tensor(rng.normal((1, 8)), requires_grad=True)
    kv = Tensor(rng.normal((1, 1, 8)), requires_grad=True)
    w = rng.normal((1, 2, 8))
    params = [p for _, p in block.named_parameters()] + [x, c, kv]
    assert check_gradients(lambda: T.sum(dit_block_forward(x, c, kv, block) * w), params) < 1e-4


def test_conditioning_vector_decomposition():
    rng = Rng(8)
    model = DiTModel(TINY, seed=1)
    a, b = rng.normal((3, 8)), rng.normal((3, 8))
    t = np.array([0, 5, 9])
    with no_grad():
        time_only = model.time_mlp(timestep_embedding(t, 8)).data + model.cond_proj.bias.data
        np.testing.assert_allclose(conditioning_vector(np.zeros((3, 8)), t, model).data, time_only, atol=1e-12)
        lin = (conditioning_vector(a + b, t, model).data - conditioning_vector(a, t, model).data
               - conditioning_vector(b, t, model).data + conditioning_vector(np.zeros((3, 8)), t, model).data)
        np.testing.assert_allclose(lin, 0.0, atol=1e-12)
        model.time_mlp.fc2.weight.data[...] = 0.0
        model.time_mlp.fc2.bias.data[...] = 0.0
        np.testing.assert_allclose(conditioning_vector(a, t, model).data, project_cond(a, model).data, atol=1e-12)
    with pytest.raises(DimensionError):
        conditioning_vector(np.zeros((3, 5)), t, model)


def test_zero_init_parameters():
    model = DiTModel(TINY, seed=2)
    for block in model.blocks:
        assert not block.adaLN.weight.data.any() and not block.adaLN.bias.data.any()
    assert not model.final.proj.weight.data.any() and not model.final.proj.bias.data.any()
    assert not model.final.adaLN.weight.data.any()


def test_untrained_model_predicts_zero():
    rng = Rng(9)
    model = DiTModel(PRESETS["desk"], seed=3)
    with no_grad():
        out = model(rng.normal((2, 4, 16, 16)), np.array([3, 150]), rng.normal((2, 64)))
    assert out.shape == (2, 4, 16, 16)
    assert not out.data.any()


def test_first_step_eps_mse_is_one():
    rng = Rng(10)
    model = DiTModel(TINY, seed=4)
    eps = rng.normal((64, 2, 4, 4))
    with no_grad():
        eps_hat = model(rng.normal(eps.shape), rng.integers(0, 200, 64), rng.normal((64, 8))).data
    assert abs(np.mean((eps_hat - eps) ** 2) - 1.0) < 0.05


SWEEP = list(itertools.product([2, 4], [32, 64], [1, 2]))


@pytest.mark.parametrize("P,d,depth", SWEEP)
def test_config_sweep_shapes_and_counts(P, d, depth):
    cfg = DiTConfig(input_size=8, in_channels=3, patch_size=P, hidden_size=d, depth=depth,
                    num_heads=4, cond_dim=16, time_embed_dim=16)
    assert cfg.num_tokens == 8 * 8 // P ** 2
    model = DiTModel(cfg, seed=5)
    assert model.num_parameters() == parameter_count(cfg)
    rng = Rng(P * d + depth)
    randomize(model, rng, 0.05)
    with no_grad():
        z = rng.normal((2, 3, 8, 8))
        assert model(z, np.array([1, 2]), rng.normal((2, 16))).shape == z.shape


def test_forward_gradient_on_parameter_sample():
    rng = Rng(11)
    model = DiTModel(TINY, seed=6)
    randomize(model, rng, 0.3)
    z, cond = rng.normal((2, 2, 4, 4)), rng.normal((2, 8))
    t = np.array([4, 120])
    params = [p for _, p in model.named_parameters()]
    sizes = np.array([p.size for p in params])
    k = max(1, int(0.01 * sizes.sum()))
    flat = rng.split("pick").gen.choice(sizes.sum(), size=k, replace=False)
    owner = np.searchsorted(np.cumsum(sizes), flat, side="right")
    offsets = flat - np.concatenate([[0], np.cumsum(sizes)])[owner]
    picks = {}
    for o, off in zip(owner, offsets):
        picks.setdefault(int(o), []).append(int(off))
    chosen = [params[i] for i in picks]
    indices = {j: picks[i] for j, i in enumerate(picks)}
    err = check_gradients(lambda: T.mean(T.square(model(z, t, cond))), chosen, indices=indices)
    assert err < 1e-3


def test_forward_errors_name_the_block():
    model = DiTModel(DiTConfig(**{**TINY.to_dict(), "depth": 2}), seed=7)
    model.blocks[1] = DiTBlock(DiTConfig(**{**TINY.to_dict(), "hidden_size": 32}), Rng(0))
    with pytest.raises(DimensionError, match="block 1"):
        model(np.zeros((1, 2, 4, 4)), 0, np.zeros((1, 8)))
    with pytest.raises(DimensionError):
        model(np.zeros((1, 2, 4, 5)), 0, np.zeros((1, 8)))
    with pytest.raises(DimensionError):
        model(np.zeros((1, 2, 4, 4)), 0, np.zeros((2, 8)))


def test_forward_is_deterministic():
    rng = Rng(12)
    z, cond = rng.normal((1, 2, 4, 4)), rng.normal((1, 8))
    a, b = DiTModel(TINY, seed=8), DiTModel(TINY, seed=8)
    randomize(a, Rng(1))
    randomize(b, Rng(1))
    with no_grad():
        np.testing.assert_array_equal(a(z, 3, cond).data, b(z, 3, cond).data)
