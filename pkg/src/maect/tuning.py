"""NNCLR head initialization and contrastive tuning of a pre-trained encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .augment import augment, augment_batch  # noqa: F401  (re-exported stage API)
from .autodiff import Tape, Tensor
from .config import RunConfig, stage_rng
from .mae import sample_mask
from .nnclr import (
    EmbeddingQueue,
    NNCLRHead,
    ema_update,
    lookup_embeddings,
    nnclr_loss_symmetrized,
)
from .optim import AdamW, lr_schedule, make_specs, scaled_lr  # noqa: F401
from .training import (
    TrainingDiverged,
    check_finite_loss,
    epoch_batches,
    steps_per_epoch,
    to_arrays,
    to_tensors,
)
from .vit import FreezePlan, apply_freeze, check_params, encode, param_lr_scales, param_shapes

HEAD_INIT_K = 1


@dataclass
class HeadInitResult:
    head: NNCLRHead
    log: list[dict]


def _load_encoder(cfg: RunConfig, arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    params = to_tensors(arrays)
    try:
        check_params(params, param_shapes(cfg.vit))
    except ValueError as err:
        raise ValueError(f"encoder checkpoint does not match ViTConfig: {err}") from None
    return params


def init_head(cfg: RunConfig, images: np.ndarray, encoder: dict[str, np.ndarray]) -> HeadInitResult:
    """Train a fresh NNCLR head on the output of the fully frozen encoder.

    Uses top1-NN lookup (``cfg.stage.k`` is ignored) and no projector EMA.
    """
    st = cfg.stage
    if len(images) == 0:
        raise ValueError("empty dataset")
    enc = _load_encoder(cfg, encoder)
    for t in enc.values():
        t.requires_grad = False
    head = NNCLRHead.create(cfg.head, stage_rng(st.seed, "head_init", "init"))
    shuffle_rng = stage_rng(st.seed, "head_init", "shuffle")
    aug_rng = stage_rng(st.seed, "head_init", "augment")
    lookup_rng = stage_rng(st.seed, "head_init", "lookup")
    queue = EmbeddingQueue(st.queue_capacity, cfg.head.out_dim)
    peak = scaled_lr(st.head_lr, st.batch_size, 2)
    specs = make_specs(head.params, st.head_weight_decay)
    for s in specs.values():
        s.lr_scale = peak
    opt = AdamW(head.params, specs, betas=(0.9, 0.95))
    scale = (st.crop_scale_min, 1.0)

    n = len(images)
    total = st.epochs * steps_per_epoch(n, st.batch_size)
    step = 0
    log = []
    for _ in range(st.epochs):
        for idx in epoch_batches(n, st.batch_size, shuffle_rng):
            mult = lr_schedule(step, total, st.warmup_fraction)
            x1 = augment_batch(images[idx], aug_rng, st.augmentation, scale)
            x2 = augment_batch(images[idx], aug_rng, st.augmentation, scale)
            y1 = encode(enc, cfg.vit, x1).pooled
            y2 = encode(enc, cfg.vit, x2).pooled
            loss_value = None
            if len(queue) >= HEAD_INIT_K:
                with Tape() as tape:
                    out = nnclr_loss_symmetrized(y1, y2, head, queue, HEAD_INIT_K, st.tau, lookup_rng)
                ad.backward(tape, output=out.loss)
                loss_value = out.loss.item()
                check_finite_loss(loss_value, "head_init", step, peak * mult)
                opt.step(mult)
                opt.zero_grad()
                z1 = out.z1
            else:
                z1 = lookup_embeddings(head, y1)
            queue.push(z1)
            # no projector EMA: the lookup path tracks the projector exactly
            ema_update(head.ema_params, head.params, 0.0)
            log.append({"step": step, "lr": mult, "loss": loss_value, "queue_fill": len(queue)})
            step += 1
    return HeadInitResult(head, log)


# --------------------------------------------------------- contrastive tuning


@dataclass
class CTState:
    cfg: RunConfig
    encoder: dict[str, Tensor]  # f, online
    encoder_ema: dict[str, Tensor]  # f_m, slow EMA, the returned model
    head: NNCLRHead  # g, h and the fast EMA g_m
    queue: EmbeddingQueue
    opt: AdamW
    trainable: list[str]
    lookup_rng: np.random.Generator
    mask_rng: np.random.Generator
    step: int = 0


def make_ct_state(cfg: RunConfig, encoder: dict[str, np.ndarray], head: NNCLRHead | None) -> CTState:
    st = cfg.stage
    enc = _load_encoder(cfg, encoder)
    plan = FreezePlan(st.frozen_blocks)
    apply_freeze(enc, cfg.vit, plan)
    enc_ema = to_tensors(encoder, requires_grad=False)
    if head is None:
        if not st.skip_init:
            raise ValueError("contrastive tuning needs an initialized head (or skip_init)")
        head = NNCLRHead.create(cfg.head, stage_rng(st.seed, "ct", "init"))
    head.reset_ema()

    enc_peak = scaled_lr(st.base_lr, st.batch_size, 2)
    head_peak = scaled_lr(st.head_lr, st.batch_size, 2)
    scales = param_lr_scales(cfg.vit, st.layer_decay, plan)
    params = {f"encoder.{n}": t for n, t in enc.items()}
    specs = make_specs(params, st.weight_decay, {f"encoder.{n}": enc_peak * s for n, s in scales.items()})
    head_params = {f"head.{n}": t for n, t in head.params.items()}
    head_specs = make_specs(head_params, st.head_weight_decay)
    for s in head_specs.values():
        s.lr_scale = head_peak
    params.update(head_params)
    specs.update(head_specs)
    return CTState(
        cfg=cfg,
        encoder=enc,
        encoder_ema=enc_ema,
        head=head,
        queue=EmbeddingQueue(st.queue_capacity, cfg.head.out_dim, track_classes=st.oracle),
        opt=AdamW(params, specs, betas=(0.9, 0.95)),
        trainable=[n for n, t in enc.items() if t.requires_grad],
        lookup_rng=stage_rng(st.seed, "ct", "lookup"),
        mask_rng=stage_rng(st.seed, "ct", "mask"),
    )


def ct_step(state: CTState, x1: np.ndarray, x2: np.ndarray, lr_mult: float, labels=None) -> float | None:
    """One iteration of contrastive tuning on a pair of augmented batches.

    Returns the loss, or None while the queue is still shorter than k (the
    step then only fills the queue).
    """
    cfg, st = state.cfg, state.cfg.stage
    keep1 = keep2 = None
    if st.resolved_mask_ratio() > 0:
        keep1 = sample_mask(cfg.vit.n_patches, st.resolved_mask_ratio(), state.mask_rng, len(x1)).keep_indices
        keep2 = sample_mask(cfg.vit.n_patches, st.resolved_mask_ratio(), state.mask_rng, len(x2)).keep_indices
    class_ids = labels if st.oracle else None
    if st.oracle and labels is None:
        raise ValueError("oracle lookup needs labels")

    if len(state.queue) < st.k:
        with ad.no_record():
            y1 = encode(state.encoder, cfg.vit, x1, keep1).pooled
        state.queue.push(lookup_embeddings(state.head, y1), class_ids)
        state.step += 1
        return None

    try:
        with Tape() as tape:
            y1 = encode(state.encoder, cfg.vit, x1, keep1).pooled
            y2 = encode(state.encoder, cfg.vit, x2, keep2).pooled
            out = nnclr_loss_symmetrized(y1, y2, state.head, state.queue, st.k, st.tau, state.lookup_rng, class_ids)
        ad.backward(tape, output=out.loss)
    except ad.AutodiffError as err:
        raise TrainingDiverged("ct", state.step, lr_mult, None, str(err)) from err
    value = out.loss.item()
    check_finite_loss(value, "ct", state.step, lr_mult)
    norms = np.linalg.norm(out.z1, axis=1)
    if not np.all(np.abs(norms - 1.0) <= 1e-6):
        raise TrainingDiverged("ct", state.step, lr_mult, value, "lookup embeddings overflowed")
    state.opt.step(lr_mult)
    state.opt.zero_grad()
    state.queue.push(out.z1, class_ids)
    # frozen weights are skipped so they stay bit-identical in f_m as well
    ema_update(
        {n: state.encoder_ema[n] for n in state.trainable},
        {n: state.encoder[n] for n in state.trainable},
        st.encoder_ema,
    )
    ema_update(state.head.ema_params, state.head.params, st.projector_ema)
    state.step += 1
    return value


@dataclass
class CTResult:
    encoder_ema: dict[str, np.ndarray]
    encoder: dict[str, np.ndarray]
    head: NNCLRHead
    queue: EmbeddingQueue
    log: list[dict]


def contrastive_tune(
    cfg: RunConfig,
    images: np.ndarray,
    encoder: dict[str, np.ndarray],
    head: NNCLRHead | None,
    labels: np.ndarray | None = None,
) -> CTResult:
    """Algorithm-1 loop; returns the slow-EMA encoder as the tuned model."""
    st = cfg.stage
    if len(images) == 0:
        raise ValueError("empty dataset")
    state = make_ct_state(cfg, encoder, head)
    shuffle_rng = stage_rng(st.seed, "ct", "shuffle")
    aug_rng = stage_rng(st.seed, "ct", "augment")
    scale = (st.crop_scale_min, 1.0)
    n = len(images)
    total = st.epochs * steps_per_epoch(n, st.batch_size)
    log = []
    for _ in range(st.epochs):
        for idx in epoch_batches(n, st.batch_size, shuffle_rng):
            mult = lr_schedule(state.step, total, st.warmup_fraction)
            x1 = augment_batch(images[idx], aug_rng, st.augmentation, scale)
            x2 = augment_batch(images[idx], aug_rng, st.augmentation, scale)
            batch_labels = labels[idx] if labels is not None else None
            step = state.step
            loss = ct_step(state, x1, x2, mult, batch_labels)
            log.append({"step": step, "lr": mult, "loss": loss, "queue_fill": len(state.queue)})
    return CTResult(to_arrays(state.encoder_ema), to_arrays(state.encoder), state.head, state.queue, log)
