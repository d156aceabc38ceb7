"""Stage orchestration over a run directory: data, checkpoints, manifests, metrics."""

from __future__ import annotations

import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .artifacts import (
    RunManifest,
    export_report,
    head_from_arrays,
    head_to_arrays,
    queue_to_arrays,
    write_curve_csv,
    write_metrics,
)
from .config import RunConfig, stage_rng
from .containers import Checkpoint, Dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .data import generate_toy_dataset
from .mae import mae_pretrain
from .tuning import contrastive_tune, init_head
from .vit import ViTConfig

log = logging.getLogger(__name__)

SUBCOMMANDS = ("pretrain", "head-init", "ct", "eval", "probe-hist", "cluster", "ei")
# checkpoint file written by each training stage
CHECKPOINTS = {"pretrain": "pretrain.ckpt", "head-init": "head_init.ckpt", "ct": "ct.ckpt"}


class StageError(RuntimeError):
    """A stage cannot run; ``exit_code`` is what the CLI returns."""

    def __init__(self, message: str, exit_code: int = 3):
        super().__init__(message)
        self.exit_code = exit_code


class MissingPrerequisite(StageError):
    def __init__(self, missing: str, needed_by: str):
        super().__init__(f"{needed_by} needs the {missing} stage first: no {missing} checkpoint found", 3)
        self.missing = missing


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive lock file so two processes never write one run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / ".lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError(f"{run_dir} is locked by another process ({path})", 4) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


# -------------------------------------------------------------------- data


def load_data(cfg: RunConfig, run_dir: Path) -> tuple[Dataset, Dataset]:
    """Datasets named in the config, else the toy set cached in the run directory."""
    if cfg.train_path or cfg.test_path:
        if not (cfg.train_path and cfg.test_path):
            raise StageError("train_path and test_path must be given together", 2)
        return load_dataset(cfg.train_path), load_dataset(cfg.test_path)
    train_p, test_p = run_dir / "data" / "train.ds", run_dir / "data" / "test.ds"
    if train_p.exists() and test_p.exists():
        return load_dataset(train_p), load_dataset(test_p)
    train, test = generate_toy_dataset(cfg.toy, cfg.data_seed)
    save_dataset(train_p, train)
    save_dataset(test_p, test)
    return train, test


def _checkpoint(run_dir: Path, stage: str, explicit: str | None, needed_by: str) -> Checkpoint:
    path = Path(explicit) if explicit else run_dir / CHECKPOINTS[stage]
    if not path.exists():
        raise MissingPrerequisite(stage, needed_by)
    return load_checkpoint(path)


@dataclass
class EncoderSource:
    arrays: dict[str, np.ndarray]
    vit: ViTConfig
    source: str
    run_id: str
    stage: str


def latest_encoder(cfg: RunConfig, run_dir: Path, needed_by: str) -> EncoderSource:
    """The tuned (slow-EMA) encoder if CT ran, else the pre-trained one."""
    if cfg.encoder_checkpoint:
        ckpt = load_checkpoint(cfg.encoder_checkpoint) if Path(cfg.encoder_checkpoint).exists() else None
        if ckpt is None:
            raise MissingPrerequisite("pretrain", needed_by)
    elif (run_dir / CHECKPOINTS["ct"]).exists():
        ckpt = load_checkpoint(run_dir / CHECKPOINTS["ct"])
    else:
        ckpt = _checkpoint(run_dir, "pretrain", None, needed_by)
    source = "ema_encoder" if ckpt.meta.get("stage") == "ct" else "raw_encoder"
    vit = ViTConfig(**ckpt.meta["vit"]) if "vit" in ckpt.meta else cfg.vit
    return EncoderSource(ckpt.group("encoder"), vit, source, ckpt.meta.get("run_id", ""), ckpt.meta.get("stage", ""))


# ----------------------------------------------------------- evaluations


def eval_metrics(enc: EncoderSource, train: Dataset, test: Dataset, cfg: RunConfig) -> tuple[dict, np.ndarray]:
    """k-NN, linear probe and low-shot logistic regression on the pooled output."""
    st = cfg.stage
    tr = ev.extract_embeddings(enc.arrays, enc.vit, train.float_images(), train.labels, enc.source)
    te = ev.extract_embeddings(enc.arrays, enc.vit, test.float_images(), test.labels, enc.source)
    preds, knn = ev.knn_classify(tr, te, st.knn_k)
    probe = ev.linear_probe(tr, te, st.probe_lrs, st.probe_epochs, st.probe_warmup_epochs,
                            seed=int(stage_rng(st.seed, "eval", "probe").integers(2**31)))
    out = {
        "source": enc.source,
        "knn_k": st.knn_k,
        "knn_accuracy": knn,
        "linear_probe_accuracy": probe.accuracy,
        "linear_probe_lr": probe.lr,
    }
    n_classes = max(train.n_classes, test.n_classes)
    for s in st.lowshot_shots:
        mean, std, _ = ev.logistic_regression_lowshot(tr, te, s, st.lowshot_l2, n_classes=n_classes)
        out[f"lowshot_{s}_accuracy"] = mean
        out[f"lowshot_{s}_accuracy_std"] = std
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (test.labels, preds), 1)
    return out, confusion


def cluster_metrics(enc: EncoderSource, test: Dataset, cfg: RunConfig) -> dict:
    st = cfg.stage
    emb = ev.extract_embeddings(enc.arrays, enc.vit, test.float_images(), test.labels, enc.source, standardized=True)
    seed = int(stage_rng(st.seed, "eval", "kmeans").integers(2**31))
    res = ev.kmeans(emb.vectors, test.n_classes, st.kmeans_restarts, seed)
    nmi, ami, ari = ev.nmi_ami_ari(res.assignment, test.labels)
    return {
        "source": enc.source,
        "cluster_accuracy": ev.cluster_accuracy(res.assignment, test.labels),
        "nmi": nmi,
        "ami": ami,
        "ari": ari,
        "kmeans_inertia": res.inertia,
        "silhouette": ev.silhouette(emb.vectors, test.labels),
        "silhouette_metric": "euclidean on standardized embeddings",
    }


def ei_metrics(enc: EncoderSource, train: Dataset, test: Dataset, cfg: RunConfig) -> dict:
    """Effective invariance of a linear probe's predictions under rotations and color changes."""
    st = cfg.stage
    tr = ev.extract_embeddings(enc.arrays, enc.vit, train.float_images(), train.labels, enc.source)
    te = ev.extract_embeddings(enc.arrays, enc.vit, test.float_images(), test.labels, enc.source)
    probe = ev.linear_probe(tr, te, st.probe_lrs, st.probe_epochs, st.probe_warmup_epochs,
                            seed=int(stage_rng(st.seed, "eval", "probe").integers(2**31)))
    base = probe.predict_proba(te.vectors)
    images = test.float_images()
    out = {"source": enc.source}
    for name, fn in ev.INVARIANCE_TRANSFORMS.items():
        vt = ev.extract_embeddings(enc.arrays, enc.vit, np.ascontiguousarray(fn(images)), None, enc.source).vectors
        out[f"ei_{name}"] = ev.mean_effective_invariance(base, probe.predict_proba(vt))
    out["ei_rotation"] = float(np.mean([out[f"ei_{n}"] for n in ev.ROTATIONS]))
    out["ei_color"] = float(np.mean([out[f"ei_{n}"] for n in ev.COLOR_TRANSFORMS]))
    return out


def histogram_metrics(enc: EncoderSource, train: Dataset, test: Dataset, cfg: RunConfig) -> dict:
    """Color-histogram prediction error from the CLS token after every block."""
    st = cfg.stage
    train_imgs, test_imgs = train.float_images(), test.float_images()
    y_tr = ev.color_histogram_target(train_imgs, st.hist_bins)
    y_te = ev.color_histogram_target(test_imgs, st.hist_bins)
    f_tr = ev.extract_block_cls(enc.arrays, enc.vit, train_imgs)
    f_te = ev.extract_block_cls(enc.arrays, enc.vit, test_imgs)
    seed = int(stage_rng(st.seed, "eval", "probe").integers(2**31))
    out = {"source": enc.source, "hist_bins": st.hist_bins,
           "hist_uniform_baseline": ev.uniform_histogram_baseline(y_te, st.hist_bins)}
    for i, (a, b) in enumerate(zip(f_tr, f_te)):
        tag = f"block{i}" if i < enc.vit.depth else "final"
        out[f"histogram_error_{tag}"] = ev.histogram_probe(a, y_tr, b, y_te, st.hist_bins, st.hist_epochs, seed=seed)
    return out


# ----------------------------------------------------------------- stages


def _finish(run_dir: Path, name: str, manifest: RunManifest, rows: list[dict], t0: float) -> RunManifest:
    (run_dir / "curves").mkdir(parents=True, exist_ok=True)
    if rows:
        write_curve_csv(run_dir / "curves" / f"{name}.csv", rows)
    manifest.log_rows = len(rows)
    manifest.wall_seconds = round(time.perf_counter() - t0, 3)
    manifest.save(run_dir / f"{name}.manifest.json")
    return manifest


def run_stage(subcommand: str, cfg: RunConfig, run_dir) -> RunManifest:
    """Run one pipeline stage in ``run_dir`` and refresh the report."""
    if subcommand not in SUBCOMMANDS:
        raise StageError(f"unknown stage {subcommand!r}", 2)
    run_dir = Path(run_dir)
    with run_lock(run_dir):
        manifest = _run(subcommand, cfg, run_dir)
        export_report(run_dir)
    return manifest


def _run(sub: str, cfg: RunConfig, run_dir: Path) -> RunManifest:
    t0 = time.perf_counter()
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    stage_name = {"head-init": "head_init", "ct": "ct", "pretrain": "pretrain"}.get(sub, "eval")
    cfg = cfg.with_stage(stage=stage_name)
    cfg = cfg.with_stage(mask_ratio=cfg.stage.resolved_mask_ratio())
    st = cfg.stage
    name = sub.replace("-", "_")

    # resolve inputs before touching data so a missing stage fails fast
    inputs = {}
    enc_ckpt = head_ckpt = None
    if sub == "head-init":
        enc_ckpt = _checkpoint(run_dir, "pretrain", cfg.encoder_checkpoint, sub)
    elif sub == "ct":
        enc_ckpt = _checkpoint(run_dir, "pretrain", cfg.encoder_checkpoint, sub)
        if not st.skip_init:
            head_ckpt = _checkpoint(run_dir, "head-init", cfg.head_checkpoint, sub)
    enc_src = None
    if sub in ("eval", "probe-hist", "cluster", "ei"):
        enc_src = latest_encoder(cfg, run_dir, sub)
        inputs[enc_src.stage or "encoder"] = enc_src.run_id
    for label, ck in (("pretrain", enc_ckpt), ("head_init", head_ckpt)):
        if ck is not None:
            inputs[label] = ck.meta.get("run_id", "")

    train, test = load_data(cfg, run_dir)
    manifest = RunManifest(name, cfg.to_dict(), train.fingerprint(), st.seed, inputs=inputs, started_at=started)
    meta = {"stage": stage_name, "run_id": manifest.run_id, "vit": cfg.vit.to_dict()}
    rows: list[dict] = []

    if sub == "pretrain":
        res = mae_pretrain(cfg, train.float_images(), train.labels)
        ck = Checkpoint(meta=dict(meta, decoder=cfg.decoder.to_dict(), combined=st.combined, detached=st.detached))
        ck.put_group("encoder", res.encoder)
        ck.put_group("decoder", res.decoder)
        if res.head is not None:
            ck.put_group("head", head_to_arrays(res.head))
            ck.put_group("queue", queue_to_arrays(res.queue))
        save_checkpoint(run_dir / CHECKPOINTS[sub], ck)
        rows = res.log
    elif sub == "head-init":
        _check_vit(enc_ckpt, cfg, sub)
        res = init_head(cfg, train.float_images(), enc_ckpt.group("encoder"))
        ck = Checkpoint(meta=dict(meta, head=cfg.head.to_dict()))
        ck.put_group("head", head_to_arrays(res.head))
        save_checkpoint(run_dir / CHECKPOINTS[sub], ck)
        rows = res.log
    elif sub == "ct":
        _check_vit(enc_ckpt, cfg, sub)
        head = head_from_arrays(cfg.head, head_ckpt.group("head")) if head_ckpt is not None else None
        res = contrastive_tune(cfg, train.float_images(), enc_ckpt.group("encoder"), head, train.labels)
        ck = Checkpoint(meta=dict(meta, head=cfg.head.to_dict(), skip_init=st.skip_init))
        ck.put_group("encoder", res.encoder_ema)
        ck.put_group("online", res.encoder)
        ck.put_group("head", head_to_arrays(res.head))
        ck.put_group("queue", queue_to_arrays(res.queue))
        save_checkpoint(run_dir / CHECKPOINTS[sub], ck)
        rows = res.log
    elif sub == "eval":
        metrics, confusion = eval_metrics(enc_src, train, test, cfg)
        write_metrics(run_dir, name, metrics)
        np.savetxt(run_dir / "metrics" / "confusion.csv", confusion, fmt="%d", delimiter=",")
    elif sub == "cluster":
        write_metrics(run_dir, name, cluster_metrics(enc_src, test, cfg))
    elif sub == "ei":
        write_metrics(run_dir, name, ei_metrics(enc_src, train, test, cfg))
    elif sub == "probe-hist":
        write_metrics(run_dir, name, histogram_metrics(enc_src, train, test, cfg))
    log.info("%s finished in %.1fs", sub, time.perf_counter() - t0)
    return _finish(run_dir, name, manifest, rows, t0)


def _check_vit(ckpt: Checkpoint, cfg: RunConfig, sub: str) -> None:
    stored = ckpt.meta.get("vit")
    if stored is not None and stored != cfg.vit.to_dict():
        raise StageError(f"{sub}: config vit section differs from the pretrain checkpoint's", 2)
