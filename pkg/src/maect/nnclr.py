"""NNCLR head: projector, predictor, FIFO embedding queue, topk-NN lookup and InfoNCE."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor

NORM_TOL = 1e-6


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int = 64
    proj_hidden: int = 256
    out_dim: int = 64
    pred_hidden: int = 512

    def to_dict(self) -> dict:
        return asdict(self)


def head_param_shapes(cfg: HeadConfig) -> dict[str, tuple[int, ...]]:
    h, o, ph = cfg.proj_hidden, cfg.out_dim, cfg.pred_hidden
    # linears feeding a BatchNorm carry no bias (it would be cancelled)
    return {
        "projector.0.weight": (cfg.in_dim, h),
        "projector.0.bn.weight": (h,),
        "projector.0.bn.bias": (h,),
        "projector.1.weight": (h, h),
        "projector.1.bn.weight": (h,),
        "projector.1.bn.bias": (h,),
        "projector.2.weight": (h, o),
        "projector.2.bn.weight": (o,),
        "projector.2.bn.bias": (o,),
        "predictor.0.weight": (o, ph),
        "predictor.0.bn.weight": (ph,),
        "predictor.0.bn.bias": (ph,),
        "predictor.1.weight": (ph, o),
        "predictor.1.bias": (o,),
    }


BN_LAYERS = ("projector.0", "projector.1", "projector.2", "predictor.0")


@dataclass
class NNCLRHead:
    """Trainable head plus the fast-EMA copy of the projector used for lookups."""

    config: HeadConfig
    params: dict[str, Tensor]
    bn: dict[str, BatchNormState]
    ema_params: dict[str, Tensor]
    ema_bn: dict[str, BatchNormState] = field(default_factory=dict)

    @classmethod
    def create(cls, config: HeadConfig, rng: np.random.Generator) -> "NNCLRHead":
        params = {}
        for name, shape in head_param_shapes(config).items():
            if name.endswith("bn.weight"):
                arr = np.ones(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                arr = rng.uniform(-bound, bound, size=shape)
            params[name] = Tensor(arr, requires_grad=True)
        head = cls(config, params, {n: BatchNormState.create(params[f"{n}.bn.weight"].shape[0]) for n in BN_LAYERS}, {})
        head.reset_ema()
        return head

    def reset_ema(self) -> None:
        """Make the fast-EMA projector an exact copy of the projector."""
        self.ema_params = {
            n: Tensor(t.data.copy(), _checked=True) for n, t in self.params.items() if n.startswith("projector.")
        }
        self.ema_bn = {
            n: BatchNormState(s.mean.copy(), s.var.copy()) for n, s in self.bn.items() if n.startswith("projector.")
        }


def _bn(x, params, states, name, training):
    return ad.batch_norm(x, params[f"{name}.bn.weight"], params[f"{name}.bn.bias"], states[name], training=training)


def projector(params: dict[str, Tensor], states: dict[str, BatchNormState], y, training: bool = True) -> Tensor:
    """3-layer MLP; BatchNorm after each layer, ReLU after all but the last."""
    x = ad.linear(y, params["projector.0.weight"])
    x = ad.relu(_bn(x, params, states, "projector.0", training))
    x = ad.linear(x, params["projector.1.weight"])
    x = ad.relu(_bn(x, params, states, "projector.1", training))
    x = ad.linear(x, params["projector.2.weight"])
    return _bn(x, params, states, "projector.2", training)


def predictor(params: dict[str, Tensor], states: dict[str, BatchNormState], z, training: bool = True) -> Tensor:
    """2-layer MLP; no BatchNorm after the output layer."""
    x = ad.linear(z, params["predictor.0.weight"])
    x = ad.relu(_bn(x, params, states, "predictor.0", training))
    return ad.linear(x, params["predictor.1.weight"], params["predictor.1.bias"])


# -------------------------------------------------------------------- queue


class EmbeddingQueue:
    """Fixed-capacity FIFO of unit-norm vectors, oldest entry first."""

    def __init__(self, capacity: int, dim: int, track_classes: bool = False):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.entries = np.zeros((0, dim))
        self.classes = np.zeros(0, dtype=np.int64) if track_classes else None

    def __len__(self) -> int:
        return self.entries.shape[0]

    @property
    def full(self) -> bool:
        return len(self) == self.capacity

    def push(self, batch, class_ids=None) -> "EmbeddingQueue":
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise ValueError(f"queue expects (n, {self.dim}) vectors, got {batch.shape}")
        if batch.shape[0] > self.capacity:
            raise ValueError(f"batch of {batch.shape[0]} exceeds queue capacity {self.capacity}")
        norms = np.linalg.norm(batch, axis=1)
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            raise ValueError("queue entries must be unit-norm")
        # new arrays every push: entries already handed out are never mutated
        self.entries = np.concatenate([self.entries, batch])[-self.capacity:]
        if self.classes is not None:
            if class_ids is None:
                raise ValueError("this queue tracks classes; class_ids required")
            ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
            self.classes = np.concatenate([self.classes, ids])[-self.capacity:]
        return self

    def snapshot(self) -> dict[str, np.ndarray]:
        out = {"entries": self.entries.copy()}
        if self.classes is not None:
            out["classes"] = self.classes.astype(np.float64)
        return out

    @classmethod
    def restore(cls, capacity: int, arrays: dict[str, np.ndarray]) -> "EmbeddingQueue":
        entries = arrays["entries"]
        q = cls(capacity, entries.shape[1], track_classes="classes" in arrays)
        q.entries = entries.copy()
        if "classes" in arrays:
            q.classes = arrays["classes"].astype(np.int64)
        return q


def topk_indices(z: np.ndarray, entries: np.ndarray, k: int, allowed: np.ndarray | None = None) -> np.ndarray:
    """(n, k) queue indices of the k most similar entries per anchor.

    Ties are resolved by queue position, oldest first.
    """
    sims = z @ entries.T
    if allowed is not None:
        sims = np.where(allowed, sims, -np.inf)
    return np.argsort(-sims, axis=1, kind="stable")[:, :k]


def topk_nn(z, queue: EmbeddingQueue, k: int, rng: np.random.Generator, class_filter=None) -> np.ndarray:
    """Replace each anchor by a uniform draw among its k nearest queue entries.

    ``z`` is one vector (d,) or a batch (n, d). With ``class_filter`` (one id
    per anchor) only queue entries of that class are candidates.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(queue) < k:
        raise ValueError(f"queue holds {len(queue)} entries, fewer than k={k}")
    allowed = None
    if class_filter is not None:
        if queue.classes is None:
            raise ValueError("class_filter needs a queue that tracks classes")
        cls = np.asarray(class_filter, dtype=np.int64).reshape(-1)
        allowed = queue.classes[None, :] == cls[:, None]
        if np.any(allowed.sum(axis=1) < k):
            raise ValueError(f"fewer than k={k} queue entries of the requested class")
    cand = topk_indices(z2, queue.entries, k, allowed)
    dice = rng.integers(0, k, size=cand.shape[0])
    out = queue.entries[cand[np.arange(cand.shape[0]), dice]]
    return out[0] if single else out


# --------------------------------------------------------------------- loss


def infonce(nn_batch, p_batch, tau: float) -> Tensor:
    """Mean over rows of cross-entropy of ``nn_i . p_j / tau`` with target j = i."""
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    nn_batch, p_batch = ad.as_tensor(nn_batch), ad.as_tensor(p_batch)
    if nn_batch.shape != p_batch.shape or nn_batch.ndim != 2:
        raise ValueError(f"infonce: batches {nn_batch.shape} and {p_batch.shape} must match (n, d)")
    logits = ad.mul(ad.matmul(nn_batch, ad.transpose(p_batch)), 1.0 / tau)
    return ad.cross_entropy(logits, np.arange(nn_batch.shape[0]))


@dataclass
class NNCLROutput:
    loss: Tensor
    z1: np.ndarray
    z2: np.ndarray
    p1: Tensor
    p2: Tensor


def lookup_embeddings(head: NNCLRHead, y, training: bool = True) -> np.ndarray:
    """Unit-norm queue embeddings from the fast-EMA projector; never differentiated."""
    with ad.no_record():
        z = projector(head.ema_params, head.ema_bn, ad.detach(ad.as_tensor(y)), training)
        return ad.l2_normalize(z).data


def nnclr_loss_symmetrized(
    y1,
    y2,
    head: NNCLRHead,
    queue: EmbeddingQueue,
    k: int,
    tau: float,
    rng: np.random.Generator,
    class_ids=None,
    training: bool = True,
) -> NNCLROutput:
    """``L(nn1, p2) / 2 + L(nn2, p1) / 2``; gradients flow only through p1, p2."""
    if len(queue) == 0:
        raise ValueError("empty queue")
    p1 = ad.l2_normalize(predictor(head.params, head.bn, projector(head.params, head.bn, y1, training), training))
    p2 = ad.l2_normalize(predictor(head.params, head.bn, projector(head.params, head.bn, y2, training), training))
    z1 = lookup_embeddings(head, y1, training)
    z2 = lookup_embeddings(head, y2, training)
    nn1 = topk_nn(z1, queue, k, rng, class_ids)
    nn2 = topk_nn(z2, queue, k, rng, class_ids)
    loss = ad.add(ad.mul(infonce(nn1, p2, tau), 0.5), ad.mul(infonce(nn2, p1, tau), 0.5))
    return NNCLROutput(loss, z1, z2, p1, p2)


def ema_update(target: dict[str, Tensor], source: dict[str, Tensor], t: float) -> dict[str, Tensor]:
    """In place ``target <- t * target + (1 - t) * source`` for every shared name."""
    if not 0 <= t <= 1:
        raise ValueError("EMA momentum must lie in [0, 1]")
    for name, tgt in target.items():
        src = source[name]
        if src.shape != tgt.shape:
            raise ValueError(f"ema_update: shape mismatch for {name}: {tgt.shape} vs {src.shape}")
        if t == 1.0:
            continue
        if t == 0.0:
            tgt.data = src.data.copy()
        else:
            tgt.data = t * tgt.data + (1.0 - t) * src.data
    return target
