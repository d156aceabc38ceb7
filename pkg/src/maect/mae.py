"""Masked-autoencoder objective: masking, pixel targets, loss and the pre-training loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .augment import augment_batch
from .autodiff import Tape, Tensor
from .config import RunConfig, stage_rng
from .nnclr import EmbeddingQueue, NNCLRHead, ema_update, lookup_embeddings, nnclr_loss_symmetrized
from .optim import AdamW, lr_schedule, make_specs, scaled_lr
from .training import TrainingDiverged, check_finite_loss, epoch_batches, steps_per_epoch, to_arrays
from .vit import (
    DecoderConfig,
    ViTConfig,
    decode,
    encode,
    init_decoder_params,
    init_params,
    patchify,
)

TARGET_EPS = 1e-6


@dataclass
class MaskSpec:
    ratio: float
    keep_indices: np.ndarray  # (B, K), sorted per row
    masked_indices: np.ndarray  # (B, M), sorted per row

    @property
    def n_patches(self) -> int:
        return self.keep_indices.shape[1] + self.masked_indices.shape[1]


def n_masked(n_patches: int, ratio: float) -> int:
    # round half up, independent of banker's rounding
    return int(np.floor(ratio * n_patches + 0.5))


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator, batch: int = 1) -> MaskSpec:
    """Uniformly choose ``round(ratio * n)`` masked patches per sample."""
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    m = n_masked(n_patches, ratio)
    order = np.argsort(rng.random((batch, n_patches)), axis=1)
    masked = np.sort(order[:, :m], axis=1)
    keep = np.sort(order[:, m:], axis=1)
    return MaskSpec(ratio, keep, masked)


def normalize_target(patches) -> np.ndarray:
    """Per-patch standardization over the last axis (population variance)."""
    p = np.asarray(patches, dtype=np.float64)
    mu = p.mean(axis=-1, keepdims=True)
    var = p.var(axis=-1, keepdims=True)
    out = (p - mu) / np.sqrt(var + TARGET_EPS)
    # the mean of a constant patch can be off by an ulp; keep such patches exactly zero
    flat = (p.max(axis=-1, keepdims=True) == p.min(axis=-1, keepdims=True))
    return np.where(flat, 0.0, out)


def mae_loss(predictions, images, mask_spec: MaskSpec, patch_size: int) -> Tensor:
    """Mean squared error on masked patches against normalized pixel targets.

    ``predictions`` is either (B, N, L) for every patch, in which case only the
    masked positions are scored, or (B, M, L) for the masked patches in the
    order of ``mask_spec.masked_indices``.
    """
    predictions = ad.as_tensor(predictions)
    patches = patchify(images, patch_size)
    b, n, _ = patches.shape
    masked = mask_spec.masked_indices
    if masked.shape[0] != b or mask_spec.n_patches != n:
        raise ValueError(f"mask for {mask_spec.n_patches} patches does not match images with {n}")
    if predictions.shape[:2] == (b, n):
        predictions = ad.gather_rows(predictions, masked)
    elif predictions.shape[:2] != masked.shape:
        raise ValueError(
            f"predictions {predictions.shape} cover neither all {n} patches nor the {masked.shape[1]} masked ones"
        )
    targets = normalize_target(patches[np.arange(b)[:, None], masked])
    return ad.mse_loss(predictions, targets)


def combined_loss(l_mae, l_nnclr, lam: float):
    """``l_mae + lam * l_nnclr`` for floats or tensors."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if isinstance(l_mae, Tensor) or isinstance(l_nnclr, Tensor):
        return ad.add(l_mae, ad.mul(l_nnclr, lam))
    return l_mae + lam * l_nnclr


def forward_mae(enc_params, dec_params, enc: ViTConfig, dec: DecoderConfig, images, mask: MaskSpec):
    """Masked encoder pass + decoder; returns (loss, encoder output)."""
    out = encode(enc_params, enc, images, keep_indices=mask.keep_indices)
    pred = decode(dec_params, dec, enc, out.tokens, mask.keep_indices)
    return mae_loss(pred, images, mask, enc.patch_size), out


def init_mae(enc: ViTConfig, dec: DecoderConfig, rng: np.random.Generator):
    return init_params(enc, rng), init_decoder_params(dec, enc, rng)


def mae_gradients(enc_params, dec_params, enc, dec, images, mask) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradient of every encoder/decoder parameter (used by tests and tooling)."""
    everything = {**enc_params, **dec_params}
    for t in everything.values():
        t.grad = None
    with Tape() as tape:
        loss, _ = forward_mae(enc_params, dec_params, enc, dec, images, mask)
    ad.backward(tape, output=loss)
    return loss.item(), {n: (t.grad if t.grad is not None else np.zeros(t.shape)) for n, t in everything.items()}


# ------------------------------------------------------------ pre-training


@dataclass
class PretrainResult:
    encoder: dict[str, np.ndarray]
    decoder: dict[str, np.ndarray]
    log: list[dict]
    head: NNCLRHead | None = None
    queue: EmbeddingQueue | None = None


def mae_pretrain(cfg: RunConfig, images: np.ndarray, labels: np.ndarray | None = None) -> PretrainResult:
    """Masked-reconstruction training with a warmup -> cosine schedule.

    ``images`` are (n, H, W, C) floats in [0, 1]. With ``cfg.stage.combined``
    an NNCLR head on the pooled token adds ``lam * L_NNCLR``; ``detached``
    stops its gradient at the encoder output.
    """
    st = cfg.stage
    if len(images) == 0:
        raise ValueError("empty dataset")
    if st.combined and st.views != 2:
        raise ValueError("combined pre-training needs views=2")
    if st.combined and labels is None and st.oracle:
        raise ValueError("oracle lookup needs labels")
    init_rng = stage_rng(st.seed, "pretrain", "init")
    shuffle_rng = stage_rng(st.seed, "pretrain", "shuffle")
    aug_rng = stage_rng(st.seed, "pretrain", "augment")
    mask_rng = stage_rng(st.seed, "pretrain", "mask")
    lookup_rng = stage_rng(st.seed, "pretrain", "lookup")

    enc, dec = init_mae(cfg.vit, cfg.decoder, init_rng)
    params = {f"encoder.{n}": t for n, t in enc.items()}
    params.update({f"decoder.{n}": t for n, t in dec.items()})
    peak = scaled_lr(st.base_lr, st.batch_size, st.views)
    specs = make_specs(params, st.weight_decay)
    for s in specs.values():
        s.lr_scale = peak
    head = queue = None
    if st.combined:
        head = NNCLRHead.create(cfg.head, init_rng)
        queue = EmbeddingQueue(st.queue_capacity, cfg.head.out_dim, track_classes=st.oracle)
        head_params = {f"head.{n}": t for n, t in head.params.items()}
        head_specs = make_specs(head_params, st.head_weight_decay)
        for s in head_specs.values():
            s.lr_scale = scaled_lr(st.head_lr, st.batch_size, st.views)
        params.update(head_params)
        specs.update(head_specs)
    opt = AdamW(params, specs, betas=(0.9, 0.95))

    n = len(images)
    total = st.epochs * steps_per_epoch(n, st.batch_size)
    step = 0
    log = []
    for epoch in range(st.epochs):
        losses = []
        mult = 0.0
        for idx in epoch_batches(n, st.batch_size, shuffle_rng):
            mult = lr_schedule(step, total, st.warmup_fraction)
            batch = images[idx]
            views = [augment_batch(batch, aug_rng, st.augmentation, (st.crop_scale_min, 1.0)) for _ in range(st.views)]
            masks = [sample_mask(cfg.vit.n_patches, st.resolved_mask_ratio(), mask_rng, len(idx)) for _ in views]
            try:
                with Tape() as tape:
                    outs = [forward_mae(enc, dec, cfg.vit, cfg.decoder, x, m) for x, m in zip(views, masks)]
                    loss = outs[0][0] if len(outs) == 1 else ad.mul(ad.add(outs[0][0], outs[1][0]), 0.5)
                    z1 = None
                    if st.combined:
                        y1, y2 = outs[0][1].pooled, outs[1][1].pooled
                        if st.detached:
                            y1, y2 = ad.detach(y1), ad.detach(y2)
                        cls_ids = labels[idx] if st.oracle else None
                        if len(queue) >= st.k:
                            nn_out = nnclr_loss_symmetrized(y1, y2, head, queue, st.k, st.tau, lookup_rng, cls_ids)
                            loss = combined_loss(loss, nn_out.loss, st.lam)
                            z1 = nn_out.z1
                        else:
                            z1 = lookup_embeddings(head, y1)
                ad.backward(tape, output=loss)
            except ad.AutodiffError as err:
                raise TrainingDiverged("pretrain", step, peak * mult, None, str(err)) from err
            value = loss.item()
            check_finite_loss(value, "pretrain", step, peak * mult)
            opt.step(mult)
            opt.zero_grad()
            if st.combined:
                queue.push(z1, labels[idx] if st.oracle else None)
                ema_update(head.ema_params, head.params, st.projector_ema)
            losses.append(value)
            step += 1
        log.append({"epoch": epoch, "step": step, "lr": peak * mult, "loss": float(np.mean(losses))})
    return PretrainResult(to_arrays(enc), to_arrays(dec), log, head, queue)
