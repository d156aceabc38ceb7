"""Drive the package's ct_step and the scripted oracle from the same state."""

from __future__ import annotations

import copy

import numpy as np

from ctoracle import ScriptedCT
from maect.config import RunConfig
from maect.nnclr import HeadConfig, NNCLRHead
from maect.training import to_arrays
from maect.tuning import ct_step, make_ct_state
from maect.vit import DecoderConfig, ViTConfig, init_params

NULL_GRAD = 1e-12


def small_ct_config(pooling="cls", frozen_blocks=1, k=3) -> RunConfig:
    vit = ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=3, heads=2, pooling=pooling)
    return RunConfig(
        vit=vit,
        decoder=DecoderConfig(embed_dim=8, depth=1, heads=2),
        head=HeadConfig(in_dim=8, proj_hidden=12, out_dim=6, pred_hidden=10),
    ).with_stage(
        stage="ct", batch_size=6, k=k, tau=0.2, frozen_blocks=frozen_blocks, layer_decay=0.65,
        base_lr=3e-3, head_lr=2e-3, weight_decay=0.05, head_weight_decay=1e-3,
        encoder_ema=0.9, projector_ema=0.7, queue_capacity=16,
    )


def _state_arrays(state) -> dict[str, np.ndarray]:
    out = {f"encoder/{n}": t.data for n, t in state.encoder.items()}
    out.update({f"encoder_ema/{n}": t.data for n, t in state.encoder_ema.items()})
    out.update({f"head/{n}": t.data for n, t in state.head.params.items()})
    out.update({f"ema/{n}": t.data for n, t in state.head.ema_params.items()})
    for prefix, stats in (("bn", state.head.bn), ("ema_bn", state.head.ema_bn)):
        for n, s in stats.items():
            out[f"{prefix}/{n}.mean"] = s.mean
            out[f"{prefix}/{n}.var"] = s.var
    out["queue"] = state.queue.entries
    return out


def compare_ct_steps(seed: int = 0, steps: int = 2, pooling: str = "cls", frozen_blocks: int = 1) -> dict:
    """Run ``steps`` iterations both ways; return the worst absolute deviations."""
    cfg = small_ct_config(pooling, frozen_blocks)
    st = cfg.stage
    rng = np.random.default_rng(seed)
    encoder = to_arrays(init_params(cfg.vit, rng))
    # perturb norm weights and biases so no parameter sits at a special value
    for n in encoder:
        if encoder[n].ndim == 1:
            encoder[n] = encoder[n] + 0.1 * rng.normal(size=encoder[n].shape)
    head = NNCLRHead.create(cfg.head, rng)
    state = make_ct_state(cfg, encoder, head)
    q = rng.normal(size=(10, cfg.head.out_dim))
    state.queue.push(q / np.linalg.norm(q, axis=1, keepdims=True))

    start = {k: v.copy() for k, v in _state_arrays(state).items()}
    group = lambda prefix: {k.split("/", 1)[1]: v.copy() for k, v in start.items() if k.startswith(prefix + "/")}
    oracle = ScriptedCT(
        group("encoder"), group("head"), group("ema"), group("bn"), group("ema_bn"), start["queue"].copy(),
        dict(depth=cfg.vit.depth, heads=cfg.vit.heads, patch=cfg.vit.patch_size, pooling=cfg.vit.pooling,
             frozen_blocks=st.frozen_blocks, layer_decay=st.layer_decay, base_lr=st.base_lr, head_lr=st.head_lr,
             batch_size=st.batch_size, weight_decay=st.weight_decay, head_weight_decay=st.head_weight_decay,
             k=st.k, tau=st.tau, capacity=st.queue_capacity, encoder_ema=st.encoder_ema,
             projector_ema=st.projector_ema),
    )
    frozen_before = {n: t.data.tobytes() for n, t in state.encoder.items() if not t.requires_grad}
    loss_err = 0.0
    for i in range(steps):
        x1 = rng.random((st.batch_size, 8, 8, 3))
        x2 = rng.random((st.batch_size, 8, 8, 3))
        mult = [0.5, 1.0, 0.8][i % 3]
        draws = copy.deepcopy(state.lookup_rng)
        ours = ct_step(state, x1, x2, mult)
        theirs = oracle.step(x1, x2, mult, draws)
        loss_err = max(loss_err, abs(ours - theirs))
    mine, ref = _state_arrays(state), oracle.arrays()
    assert set(mine) == set(ref), set(mine) ^ set(ref)
    errs = {k: float(np.abs(mine[k] - ref[k]).max()) for k in mine if k != "queue"}
    # Parameters whose exact gradient vanishes (a shift cancelled by a following
    # BatchNorm) get gradients of pure roundoff; Adam's normalization blows that
    # noise up, so they are judged by staying put rather than by agreement.
    null = {k for k, g in oracle.grad_peak.items() if g < NULL_GRAD}
    param_err = max(v for k, v in errs.items() if k not in null)
    null_moved = max([max(float(np.abs(mine[k] - start[k]).max()), float(np.abs(ref[k] - start[k]).max()))
                      for k in null], default=0.0)
    queue_err = float(np.abs(mine["queue"] - ref["queue"]).max()) if mine["queue"].shape == ref["queue"].shape else np.inf
    moved = {k: float(np.abs(mine[k] - start[k]).max()) for k in mine if k != "queue"}
    frozen_same = all(state.encoder[n].data.tobytes() == b for n, b in frozen_before.items())
    return {"loss": loss_err, "params": param_err, "queue": queue_err, "moved": moved, "frozen_same": frozen_same,
            "queue_len": len(state.queue), "errors": errs,
            "null_params": sorted(null), "null_moved": null_moved}
