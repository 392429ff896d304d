import numpy as np
import pytest

from prunevit import ops
from prunevit.backbone import (TokenState, VitConfig, embed_patches,
                               extract_patches, init_vit_params,
                               patch_grid_length, run_stage, vit_layer)
from prunevit.tensor import NumericsError, Tensor


def small_cfg(**kw):
    defaults = dict(image_height=8, image_width=8, patch_size=4, embed_dim=8,
                    num_layers=2, num_heads=2, ffn_mult=2)
    defaults.update(kw)
    return VitConfig(**defaults)


def params64(params):
    return {k: Tensor(v.data.astype(np.float64), dtype=np.float64)
            for k, v in params.items()}


def test_patch_grid_length_values():
    assert patch_grid_length(1024, 1024, 16) == 4096
    assert patch_grid_length(32, 32, 4) == 64


def test_patch_grid_length_divisibility_error():
    with pytest.raises(NumericsError):
        patch_grid_length(17, 16, 16)


def test_config_validation():
    with pytest.raises(NumericsError):
        VitConfig(image_height=30, image_width=32, patch_size=4)
    with pytest.raises(NumericsError):
        VitConfig(embed_dim=10, num_heads=4)


def test_embed_zero_image_gives_positional_rows():
    cfg = small_cfg()
    params = init_vit_params(cfg, seed=7)
    out = embed_patches(np.zeros((3, 8, 8), dtype=np.float32), cfg, params)
    assert np.array_equal(out.data, params["vit.pos"].data)


def test_embed_output_shape():
    cfg = small_cfg()
    params = init_vit_params(cfg, seed=7)
    img = np.random.default_rng(0).uniform(0, 1, (3, 8, 8)).astype(np.float32)
    assert embed_patches(img, cfg, params).shape == (cfg.n_tokens, cfg.embed_dim)


def test_embed_shape_mismatch():
    cfg = small_cfg()
    params = init_vit_params(cfg, seed=7)
    with pytest.raises(NumericsError):
        embed_patches(np.zeros((3, 8, 12), dtype=np.float32), cfg, params)


def test_patch_permutation_equivariance():
    # swapping two patches of the image permutes the pre-positional rows
    cfg = small_cfg()
    params = init_vit_params(cfg, seed=7)
    params["vit.pos"].data[:] = 0.0
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 1, (3, 8, 8)).astype(np.float32)
    swapped = img.copy()
    # patch grid is 2x2; swap patch (0,0) with patch (1,1)
    swapped[:, 0:4, 0:4], swapped[:, 4:8, 4:8] = (img[:, 4:8, 4:8].copy(),
                                                  img[:, 0:4, 0:4].copy())
    base = embed_patches(img, cfg, params).data
    perm = embed_patches(swapped, cfg, params).data
    assert np.allclose(perm[[3, 1, 2, 0]], base)


def test_vit_layer_zero_projections_is_identity():
    cfg = small_cfg()
    params = init_vit_params(cfg, seed=7)
    params["vit.layer0.attn.o.w"].data[:] = 0.0
    params["vit.layer0.attn.o.b"].data[:] = 0.0
    params["vit.layer0.ffn.w2.w"].data[:] = 0.0
    params["vit.layer0.ffn.w2.b"].data[:] = 0.0
    x = Tensor(np.random.default_rng(5).uniform(-1, 1, (4, 8)).astype(np.float32))
    out = vit_layer(x, params, 0, cfg)
    assert np.allclose(out.data, x.data, atol=1e-7)


def test_single_token_attends_to_itself():
    q = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 4)))
    v = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
    out = ops.mhsa_core(q, q, v, 2)
    assert np.allclose(out.data, v.data)


def test_vit_layer_matches_loop_oracle():
    cfg = small_cfg()
    p64 = params64(init_vit_params(cfg, seed=11))
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (3, cfg.embed_dim))
    out = vit_layer(Tensor(x, dtype=np.float64), p64, 1, cfg).data

    def ln(z, g, b):
        mu = z.mean(axis=-1, keepdims=True)
        var = ((z - mu) ** 2).mean(axis=-1, keepdims=True)
        return g * (z - mu) / np.sqrt(var + 1e-5) + b

    def lin(z, pre):
        return z @ p64[f"{pre}.w"].data + p64[f"{pre}.b"].data

    pre = "vit.layer1"
    h = ln(x, p64[f"{pre}.ln1.g"].data, p64[f"{pre}.ln1.b"].data)
    q, k, v = lin(h, f"{pre}.attn.q"), lin(h, f"{pre}.attn.k"), lin(h, f"{pre}.attn.v")
    dh = cfg.embed_dim // cfg.num_heads
    att = np.zeros_like(q)
    for head in range(cfg.num_heads):
        sl = slice(head * dh, (head + 1) * dh)
        scores = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                scores[i, j] = float(q[i, sl] @ k[j, sl]) / np.sqrt(dh)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        a = e / e.sum(axis=1, keepdims=True)
        att[:, sl] = a @ v[:, sl]
    y = x + lin(att, f"{pre}.attn.o")
    h2 = ln(y, p64[f"{pre}.ln2.g"].data, p64[f"{pre}.ln2.b"].data)
    from scipy.special import erf
    mid = lin(h2, f"{pre}.ffn.w1")
    mid = mid * 0.5 * (1 + erf(mid / np.sqrt(2)))
    expected = y + lin(mid, f"{pre}.ffn.w2")
    assert np.abs(out - expected).max() < 1e-6


def make_state(cfg, seed=0, active=None):
    rng = np.random.default_rng(seed)
    values = Tensor(rng.uniform(-1, 1, (cfg.n_tokens, cfg.embed_dim))
                    .astype(np.float32))
    if active is None:
        active = np.ones(cfg.n_tokens, dtype=bool)
    return TokenState(active=active, values=values)


def test_run_stage_zero_layers_is_identity():
    cfg = small_cfg()
    params = init_vit_params(cfg, seed=1)
    state = make_state(cfg)
    out = run_stage(state, [], params, cfg)
    assert out.values is state.values


def test_run_stage_all_active_equals_direct():
    cfg = small_cfg()
    params = init_vit_params(cfg, seed=1)
    state = make_state(cfg)
    staged = run_stage(state, range(cfg.num_layers), params, cfg)
    direct = state.values
    for layer in range(cfg.num_layers):
        direct = vit_layer(direct, params, layer, cfg)
    assert staged.values.data.tobytes() == direct.data.tobytes()


def test_run_stage_compaction_matches_subsequence():
    cfg = small_cfg()
    params = init_vit_params(cfg, seed=1)
    active = np.array([True, False, True, False])
    state = make_state(cfg, active=active)
    staged = run_stage(state, range(cfg.num_layers), params, cfg)
    sub = Tensor(state.values.data[active])
    for layer in range(cfg.num_layers):
        sub = vit_layer(sub, params, layer, cfg)
    assert np.abs(staged.values.data[active] - sub.data).max() <= 1e-6


def test_run_stage_frozen_rows_byte_identical():
    cfg = small_cfg()
    params = init_vit_params(cfg, seed=1)
    active = np.array([False, True, True, False])
    state = make_state(cfg, active=active)
    before = state.values.data[~active].tobytes()
    staged = run_stage(state, range(cfg.num_layers), params, cfg)
    assert staged.values.data[~active].tobytes() == before


def test_run_stage_no_active_tokens_errors():
    cfg = small_cfg()
    params = init_vit_params(cfg, seed=1)
    state = make_state(cfg, active=np.zeros(cfg.n_tokens, dtype=bool))
    with pytest.raises(NumericsError, match="no active"):
        run_stage(state, range(1), params, cfg)


def test_extract_patches_row_major_order():
    cfg = small_cfg()
    img = np.zeros((3, 8, 8), dtype=np.float32)
    img[0, 0:4, 4:8] = 1.0  # patch (0, 1), red channel
    rows = extract_patches(img, cfg)
    assert rows[1].sum() == 16.0
    assert rows[[0, 2, 3]].sum() == 0.0


def test_init_is_deterministic():
    cfg = small_cfg()
    a = init_vit_params(cfg, seed=9)
    b = init_vit_params(cfg, seed=9)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
