"""Tiny ViT encoder and lightweight MAE decoder built on :mod:`maect.autodiff`.

Parameters live in a flat ``dict[str, Tensor]`` whose names follow the usual
``blocks.<i>.attn.qkv.weight`` layout. Images are (B, H, W, C) float arrays.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

POOLINGS = ("cls", "mean_patch")


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 8
    heads: int = 4
    mlp_ratio: float = 4.0
    pooling: str = "cls"
    channels: int = 3
    # the CLS token gets no positional embedding unless this is set
    cls_pos_embed: bool = False

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("invalid ViTConfig: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.patch_size < 1 or self.image_size % self.patch_size:
            out.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.heads < 1 or self.embed_dim % self.heads:
            out.append(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4:
            out.append(f"embed_dim {self.embed_dim} must be divisible by 4 for 2D sin-cos embedding")
        if self.depth < 0:
            out.append("depth must be >= 0")
        if self.pooling not in POOLINGS:
            out.append(f"pooling must be one of {POOLINGS}")
        return out

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FreezePlan:
    frozen_blocks: int = 0

    def check(self, config: ViTConfig) -> None:
        if not 0 <= self.frozen_blocks <= config.depth:
            raise ValueError(f"frozen_blocks must lie in [0, {config.depth}], got {self.frozen_blocks}")


# ------------------------------------------------------------------ patches


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) or (H, W, C) -> (B, N, p*p*C) in row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    b, h, w, c = images.shape
    if h != w:
        raise ValueError(f"patchify expects square images, got {h}x{w}")
    if h % patch_size:
        raise ValueError(f"image size {h} not divisible by patch size {patch_size}")
    g = h // patch_size
    x = images.reshape(b, g, patch_size, g, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, g * g, patch_size * patch_size * c)
    return x[0] if single else x


def unpatchify(patches: np.ndarray, patch_size: int, channels: int = 3) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b, n, _ = patches.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ValueError(f"{n} patches do not form a square grid")
    x = patches.reshape(b, g, g, patch_size, patch_size, channels).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, g * patch_size, g * patch_size, channels)
    return x[0] if single else x


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000**omega
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed(grid_side: int, dim: int) -> np.ndarray:
    """Fixed 2D sine-cosine embedding, shape (grid_side**2, dim).

    The first half of each row encodes the x (column) coordinate, the second
    half the y (row) coordinate; each half is ``[sin(pos*w), cos(pos*w)]``.
    """
    if dim % 4:
        raise ValueError(f"embedding dim {dim} must be divisible by 4")
    ys, xs = np.meshgrid(np.arange(grid_side, dtype=np.float64),
                         np.arange(grid_side, dtype=np.float64), indexing="ij")
    emb_x = _sincos_1d(dim // 2, xs)
    emb_y = _sincos_1d(dim // 2, ys)
    return np.concatenate([emb_x, emb_y], axis=1)


# --------------------------------------------------------------- parameters


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def block_param_shapes(prefix: str, dim: int, mlp_dim: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.norm1.weight": (dim,),
        f"{prefix}.norm1.bias": (dim,),
        f"{prefix}.attn.qkv.weight": (dim, 3 * dim),
        f"{prefix}.attn.qkv.bias": (3 * dim,),
        f"{prefix}.attn.proj.weight": (dim, dim),
        f"{prefix}.attn.proj.bias": (dim,),
        f"{prefix}.norm2.weight": (dim,),
        f"{prefix}.norm2.bias": (dim,),
        f"{prefix}.mlp.fc1.weight": (dim, mlp_dim),
        f"{prefix}.mlp.fc1.bias": (mlp_dim,),
        f"{prefix}.mlp.fc2.weight": (mlp_dim, dim),
        f"{prefix}.mlp.fc2.bias": (dim,),
    }


def param_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    d = config.embed_dim
    shapes = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
    }
    for i in range(config.depth):
        shapes.update(block_param_shapes(f"blocks.{i}", d, config.mlp_dim))
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


def init_block_params(rng: np.random.Generator, shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in shapes.items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            out[name] = np.ones(shape)
        elif len(shape) == 1:
            out[name] = np.zeros(shape)
        else:
            out[name] = _xavier(rng, *shape)
    return out


def init_params(config: ViTConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    shapes = param_shapes(config)
    arrays = init_block_params(rng, shapes)
    arrays["cls_token"] = rng.normal(0.0, 0.02, size=shapes["cls_token"])
    return {name: Tensor(arrays[name], requires_grad=True) for name in shapes}


def check_params(params: dict[str, Tensor], shapes: dict[str, tuple[int, ...]]) -> None:
    missing = sorted(set(shapes) - set(params))
    extra = sorted(set(params) - set(shapes))
    wrong = sorted(n for n in shapes if n in params and params[n].shape != shapes[n])
    if missing or extra or wrong:
        raise ValueError(
            f"parameter set does not match config: missing={missing} extra={extra} wrong_shape={wrong}"
        )


# ------------------------------------------------------------------ forward


def transformer_block(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Pre-norm block: x + attn(LN(x)), then x + mlp(LN(x))."""
    d = x.shape[-1]
    h = ad.layer_norm(x, params[f"{prefix}.norm1.weight"], params[f"{prefix}.norm1.bias"])
    qkv = ad.linear(h, params[f"{prefix}.attn.qkv.weight"], params[f"{prefix}.attn.qkv.bias"])
    q = ad.getitem(qkv, (Ellipsis, slice(0, d)))
    k = ad.getitem(qkv, (Ellipsis, slice(d, 2 * d)))
    v = ad.getitem(qkv, (Ellipsis, slice(2 * d, 3 * d)))
    a = ad.attention(q, k, v, heads)
    x = ad.add(x, ad.linear(a, params[f"{prefix}.attn.proj.weight"], params[f"{prefix}.attn.proj.bias"]))
    h = ad.layer_norm(x, params[f"{prefix}.norm2.weight"], params[f"{prefix}.norm2.bias"])
    h = ad.gelu(ad.linear(h, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    return ad.add(x, ad.linear(h, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"]))


def check_keep_indices(keep_indices, batch: int, n_patches: int) -> np.ndarray:
    keep = np.asarray(keep_indices)
    if keep.ndim == 1:
        keep = np.broadcast_to(keep, (batch, keep.size))
    if keep.ndim != 2 or keep.shape[0] != batch:
        raise ValueError(f"keep_indices shape {keep.shape} does not match batch {batch}")
    if not np.issubdtype(keep.dtype, np.integer):
        raise ValueError("keep_indices must be integers")
    if keep.size and (keep.min() < 0 or keep.max() >= n_patches):
        raise ValueError(f"keep_indices out of range [0, {n_patches})")
    srt = np.sort(keep, axis=1)
    if keep.shape[1] > 1 and np.any(srt[:, 1:] == srt[:, :-1]):
        raise ValueError("keep_indices contain duplicates")
    return keep


@dataclass
class EncoderOutput:
    tokens: Tensor  # (B, 1 + K, D) after the final LayerNorm
    pooled: Tensor  # (B, D)
    block_cls: list[Tensor] | None = None  # CLS token after every block


def encode(
    params: dict[str, Tensor],
    config: ViTConfig,
    images,
    keep_indices=None,
    return_block_cls: bool = False,
) -> EncoderOutput:
    """Run the encoder on (B, H, W, C) images, optionally on a patch subset."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (config.image_size, config.image_size, config.channels):
        raise ValueError(
            f"expected images of shape (B, {config.image_size}, {config.image_size}, {config.channels}),"
            f" got {images.shape}"
        )
    b = images.shape[0]
    patches = patchify(images, config.patch_size)
    pos = sincos_pos_embed(config.grid_side, config.embed_dim)
    x = ad.linear(patches, params["patch_embed.weight"], params["patch_embed.bias"])
    x = ad.add(x, pos)
    if keep_indices is not None:
        keep = check_keep_indices(keep_indices, b, config.n_patches)
        x = ad.gather_rows(x, keep)
    # a CLS position row would be all zeros (MAE layout), so cls_pos_embed
    # changes no values; it only records the choice in checkpoints
    cls = ad.add(np.zeros((b, 1, config.embed_dim)), params["cls_token"])
    x = ad.concat([cls, x], axis=1)
    block_cls = [] if return_block_cls else None
    for i in range(config.depth):
        x = transformer_block(x, params, f"blocks.{i}", config.heads)
        if block_cls is not None:
            block_cls.append(ad.getitem(x, (slice(None), 0)))
    x = ad.layer_norm(x, params["norm.weight"], params["norm.bias"])
    if config.pooling == "cls":
        pooled = ad.getitem(x, (slice(None), 0))
    else:
        pooled = ad.mean(ad.getitem(x, (slice(None), slice(1, None))), axis=1)
    return EncoderOutput(x, pooled, block_cls)


# ------------------------------------------------------------ lr grouping


def param_layer_id(name: str, depth: int) -> int:
    """Layer index for layer-wise lr decay: patch embedding and CLS share
    block 0, ``blocks.i`` is i, anything above the blocks is ``depth``."""
    if name.startswith("patch_embed") or name == "cls_token":
        return 0
    if name.startswith("blocks."):
        return int(name.split(".")[1])
    return depth


def layerwise_lr(base_lr: float, decay: float, config: ViTConfig, freeze_plan: FreezePlan | None = None) -> list[tuple[str, float]]:
    """Learning rate per group, top-down: ``head`` then ``block.<depth-1>`` ... ``block.0``."""
    if not 0 < decay <= 1:
        raise ValueError(f"layer decay must lie in (0, 1], got {decay}")
    freeze_plan = freeze_plan or FreezePlan()
    freeze_plan.check(config)
    groups = [("head", float(base_lr))]
    for i in reversed(range(config.depth)):
        lr = 0.0 if i < freeze_plan.frozen_blocks else base_lr * decay ** (config.depth - i)
        groups.append((f"block.{i}", lr))
    return groups


def param_lr_scales(config: ViTConfig, decay: float, freeze_plan: FreezePlan | None = None) -> dict[str, float]:
    """Multiplier on the base lr for every encoder parameter (0 when frozen)."""
    table = dict(layerwise_lr(1.0, decay, config, freeze_plan))
    out = {}
    for name in param_shapes(config):
        layer = param_layer_id(name, config.depth)
        out[name] = table["head"] if layer == config.depth else table[f"block.{layer}"]
    return out


def apply_freeze(params: dict[str, Tensor], config: ViTConfig, freeze_plan: FreezePlan) -> None:
    """Mark parameters of the bottom ``frozen_blocks`` (and patch embedding) as constants."""
    freeze_plan.check(config)
    for name, t in params.items():
        t.requires_grad = param_layer_id(name, config.depth) >= freeze_plan.frozen_blocks


def clone_params(params: dict[str, Tensor], requires_grad: bool | None = None) -> dict[str, Tensor]:
    return {
        n: Tensor(t.data.copy(), requires_grad=t.requires_grad if requires_grad is None else requires_grad, _checked=True)
        for n, t in params.items()
    }


# ------------------------------------------------------------------ decoder


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.heads or self.embed_dim % 4:
            raise ValueError(f"decoder embed_dim {self.embed_dim} must be divisible by heads and by 4")

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


def decoder_param_shapes(dec: DecoderConfig, enc: ViTConfig) -> dict[str, tuple[int, ...]]:
    d = dec.embed_dim
    shapes = {
        "decoder_embed.weight": (enc.embed_dim, d),
        "decoder_embed.bias": (d,),
        "mask_token": (d,),
    }
    for i in range(dec.depth):
        shapes.update(block_param_shapes(f"decoder_blocks.{i}", d, dec.mlp_dim))
    shapes["decoder_norm.weight"] = (d,)
    shapes["decoder_norm.bias"] = (d,)
    shapes["decoder_pred.weight"] = (d, enc.patch_dim)
    shapes["decoder_pred.bias"] = (enc.patch_dim,)
    return shapes


def init_decoder_params(dec: DecoderConfig, enc: ViTConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    shapes = decoder_param_shapes(dec, enc)
    arrays = init_block_params(rng, shapes)
    arrays["decoder_norm.weight"] = np.ones(shapes["decoder_norm.weight"])
    arrays["mask_token"] = rng.normal(0.0, 0.02, size=shapes["mask_token"])
    return {name: Tensor(arrays[name], requires_grad=True) for name in shapes}


def restore_order(keep: np.ndarray, n_patches: int) -> np.ndarray:
    """Per sample, the index into ``[kept..., masked...]`` of every patch position."""
    b = keep.shape[0]
    flags = np.zeros((b, n_patches), dtype=bool)
    flags[np.arange(b)[:, None], keep] = True
    masked = np.stack([np.flatnonzero(~row) for row in flags]) if b else np.zeros((0, 0), int)
    order = np.concatenate([keep, masked.reshape(b, -1)], axis=1)
    return np.argsort(order, axis=1, kind="stable")


def decode(
    params: dict[str, Tensor],
    dec: DecoderConfig,
    enc: ViTConfig,
    tokens: Tensor,
    keep_indices,
) -> Tensor:
    """Reconstruct every patch: (B, 1 + K, D_enc) tokens -> (B, N, patch_dim).

    Visible tokens are embedded, mask tokens fill the dropped positions, then
    positional embeddings are added and a small transformer predicts pixels.
    """
    b = tokens.shape[0]
    n = enc.n_patches
    keep = check_keep_indices(keep_indices, b, n)
    x = ad.linear(tokens, params["decoder_embed.weight"], params["decoder_embed.bias"])
    cls = ad.getitem(x, (slice(None), slice(0, 1)))
    vis = ad.getitem(x, (slice(None), slice(1, None)))
    parts = [vis]
    if n - keep.shape[1]:
        parts.append(ad.add(np.zeros((b, n - keep.shape[1], dec.embed_dim)), params["mask_token"]))
    full = ad.gather_rows(ad.concat(parts, axis=1), restore_order(keep, n))
    full = ad.add(full, sincos_pos_embed(enc.grid_side, dec.embed_dim))
    x = ad.concat([cls, full], axis=1)
    for i in range(dec.depth):
        x = transformer_block(x, params, f"decoder_blocks.{i}", dec.heads)
    x = ad.layer_norm(x, params["decoder_norm.weight"], params["decoder_norm.bias"])
    x = ad.linear(x, params["decoder_pred.weight"], params["decoder_pred.bias"])
    return ad.getitem(x, (slice(None), slice(1, None)))
