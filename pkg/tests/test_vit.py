import numpy as np
import pytest

from maect.vit import (
    DecoderConfig,
    FreezePlan,
    ViTConfig,
    apply_freeze,
    decode,
    encode,
    init_decoder_params,
    init_params,
    layerwise_lr,
    param_lr_scales,
    patchify,
    sincos_pos_embed,
    unpatchify,
)

SMALL = ViTConfig(image_size=8, patch_size=2, embed_dim=8, depth=2, heads=2)


def reference_pos_embed(grid, dim):
    """Written straight from the formula: x half then y half, sin block then cos block."""
    out = np.zeros((grid * grid, dim))
    quarter = dim // 4
    for row in range(grid):
        for col in range(grid):
            i = row * grid + col
            for j in range(quarter):
                w = 1.0 / 10000 ** (j / quarter)
                out[i, j] = np.sin(col * w)
                out[i, quarter + j] = np.cos(col * w)
                out[i, 2 * quarter + j] = np.sin(row * w)
                out[i, 3 * quarter + j] = np.cos(row * w)
    return out


def test_patch_counts():
    img = np.random.default_rng(0).random((32, 32, 3))
    assert patchify(img, 4).shape == (64, 48)


def test_constant_image_gives_identical_patches():
    p = patchify(np.full((2, 8, 8, 3), 0.3), 4)
    assert np.all(p == p[0, 0])


def test_patchify_roundtrip_is_exact():
    img = np.random.default_rng(0).random((3, 16, 16, 3))
    assert unpatchify(patchify(img, 4), 4).tobytes() == img.tobytes()


def test_patchify_rejects_bad_sizes():
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 10, 10, 3)), 4)
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 8, 4, 3)), 4)


def test_pos_embed_single_cell():
    emb = sincos_pos_embed(1, 8)
    np.testing.assert_array_equal(emb, [[0, 0, 1, 1, 0, 0, 1, 1]])


def test_pos_embed_rows_share_y_half():
    emb = sincos_pos_embed(4, 16)
    grid = emb.reshape(4, 4, 16)
    for row in range(4):
        assert np.all(grid[row, :, 8:] == grid[row, 0, 8:])
    for col in range(4):
        assert np.all(grid[:, col, :8] == grid[0, col, :8])


def test_pos_embed_matches_reference():
    np.testing.assert_allclose(sincos_pos_embed(8, 64), reference_pos_embed(8, 64), rtol=0, atol=1e-15)


def test_config_validation_lists_every_problem():
    with pytest.raises(ValueError) as err:
        ViTConfig(image_size=10, patch_size=4, embed_dim=6, heads=4, pooling="max")
    msg = str(err.value)
    assert "divisible by patch_size" in msg and "heads" in msg and "pooling" in msg


def test_encode_all_patches_equals_unmasked():
    rng = np.random.default_rng(0)
    params = init_params(SMALL, rng)
    x = rng.random((2, 8, 8, 3))
    full = encode(params, SMALL, x).tokens.data
    kept = encode(params, SMALL, x, keep_indices=np.arange(SMALL.n_patches)).tokens.data
    assert full.tobytes() == kept.tobytes()


def test_quarter_of_patches_gives_length_17():
    cfg = ViTConfig(image_size=32, patch_size=4, embed_dim=8, depth=1, heads=2)
    rng = np.random.default_rng(0)
    keep = np.sort(rng.choice(64, 16, replace=False))
    out = encode(init_params(cfg, rng), cfg, rng.random((1, 32, 32, 3)), keep_indices=keep[None])
    assert out.tokens.shape == (1, 17, 8)


def test_permuting_keep_indices_permutes_tokens():
    rng = np.random.default_rng(1)
    params = init_params(SMALL, rng)
    x = rng.random((1, 8, 8, 3))
    keep = rng.choice(SMALL.n_patches, 6, replace=False)
    perm = rng.permutation(6)
    a = encode(params, SMALL, x, keep_indices=keep[None]).tokens.data
    b = encode(params, SMALL, x, keep_indices=keep[perm][None]).tokens.data
    np.testing.assert_allclose(b[:, 1:], a[:, 1:][:, perm], atol=1e-12)
    np.testing.assert_allclose(b[:, 0], a[:, 0], atol=1e-12)


def test_bad_keep_indices_rejected():
    rng = np.random.default_rng(0)
    params = init_params(SMALL, rng)
    x = rng.random((1, 8, 8, 3))
    with pytest.raises(ValueError, match="duplicates"):
        encode(params, SMALL, x, keep_indices=np.array([[1, 1]]))
    with pytest.raises(ValueError, match="range"):
        encode(params, SMALL, x, keep_indices=np.array([[99]]))
    with pytest.raises(ValueError):
        encode(params, SMALL, rng.random((1, 4, 4, 3)))


def test_pooling_modes_differ():
    rng = np.random.default_rng(0)
    params = init_params(SMALL, rng)
    x = rng.random((3, 8, 8, 3))
    cls = encode(params, SMALL, x).pooled.data
    mean = encode(params, ViTConfig(**{**SMALL.to_dict(), "pooling": "mean_patch"}), x).pooled.data
    assert not np.allclose(cls, mean)


def test_block_cls_has_one_entry_per_block():
    rng = np.random.default_rng(0)
    out = encode(init_params(SMALL, rng), SMALL, rng.random((2, 8, 8, 3)), return_block_cls=True)
    assert len(out.block_cls) == SMALL.depth
    assert out.block_cls[0].shape == (2, SMALL.embed_dim)


def test_decoder_outputs_every_patch():
    rng = np.random.default_rng(0)
    dec = DecoderConfig(embed_dim=8, depth=1, heads=2)
    keep = np.sort(rng.choice(SMALL.n_patches, 4, replace=False))[None]
    tokens = encode(init_params(SMALL, rng), SMALL, rng.random((1, 8, 8, 3)), keep_indices=keep).tokens
    out = decode(init_decoder_params(dec, SMALL, rng), dec, SMALL, tokens, keep)
    assert out.shape == (1, SMALL.n_patches, SMALL.patch_dim)


def test_layerwise_lr_without_decay_or_freezing():
    assert all(lr == 0.5 for _, lr in layerwise_lr(0.5, 1.0, SMALL))


def test_layerwise_lr_large_config():
    cfg = ViTConfig(depth=24, embed_dim=8, heads=2)
    groups = dict(layerwise_lr(1.0, 0.65, cfg, FreezePlan(12)))
    assert groups["block.23"] == pytest.approx(0.65)
    assert all(groups[f"block.{i}"] == 0 for i in range(12))
    assert sum(lr > 0 for lr in groups.values()) == 24 - 12 + 1


def test_param_scales_and_freezing_agree():
    cfg = ViTConfig(image_size=8, patch_size=2, embed_dim=8, depth=4, heads=2)
    scales = param_lr_scales(cfg, 0.5, FreezePlan(2))
    assert scales["patch_embed.weight"] == 0 and scales["cls_token"] == 0
    assert scales["blocks.3.mlp.fc1.weight"] == 0.5
    assert scales["blocks.2.norm1.bias"] == 0.25
    assert scales["norm.weight"] == 1.0
    params = init_params(cfg, np.random.default_rng(0))
    apply_freeze(params, cfg, FreezePlan(2))
    assert all(params[n].requires_grad == (s > 0) for n, s in scales.items())
    with pytest.raises(ValueError):
        apply_freeze(params, cfg, FreezePlan(5))
