"""Frozen-embedding evaluations: k-NN, linear probe, low-shot logistic regression,
k-means clustering metrics, effective invariance and the color-histogram probe."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize
from scipy.spatial.distance import cdist
from scipy.special import gammaln, logsumexp

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .nnclr import NNCLRHead, projector
from .optim import SGD, lr_schedule
from .training import to_tensors
from .vit import ViTConfig, encode

SOURCES = ("raw_encoder", "ema_encoder", "head_projector")


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    labels: np.ndarray | None = None
    source: str = "raw_encoder"
    layer: str = "final"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError("an embedding set needs at least one vector")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.vectors.shape[0],):
                raise ValueError("labels must have one entry per vector")
            if self.labels.min() < 0:
                raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class ClusterResult:
    assignment: np.ndarray
    inertia: float
    seed: int
    restart_inertias: list[float] = field(default_factory=list)


# --------------------------------------------------------------- embeddings


def standardize(vectors: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Per-dimension zero mean / unit std over the set."""
    v = np.asarray(vectors, dtype=np.float64)
    std = v.std(axis=0)
    return (v - v.mean(axis=0)) / np.where(std > eps, std, 1.0)


def extract_embeddings(
    encoder: dict[str, np.ndarray],
    config: ViTConfig,
    images: np.ndarray,
    labels=None,
    source: str = "raw_encoder",
    batch_size: int = 256,
    standardized: bool = False,
) -> EmbeddingSet:
    """Pooled encoder output for every image (deterministic, no augmentation)."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}")
    params = to_tensors(encoder, requires_grad=False)
    chunks = [encode(params, config, images[i:i + batch_size]).pooled.data
              for i in range(0, len(images), batch_size)]
    vectors = np.concatenate(chunks)
    if standardized:
        vectors = standardize(vectors)
    return EmbeddingSet(vectors, labels, source)


def extract_head_embeddings(encoder: dict[str, np.ndarray], config: ViTConfig, head: NNCLRHead, images: np.ndarray,
                            labels=None, batch_size: int = 256) -> EmbeddingSet:
    """Unit-norm projector output on top of the pooled encoder output.

    BatchNorm uses its running statistics, so each image is embedded on its own.
    """
    pooled = extract_embeddings(encoder, config, images, labels, batch_size=batch_size).vectors
    z = projector(head.params, head.bn, pooled, training=False).data
    return EmbeddingSet(z / np.linalg.norm(z, axis=1, keepdims=True), labels, "head_projector")


def extract_block_cls(encoder, config: ViTConfig, images: np.ndarray, batch_size: int = 256) -> list[np.ndarray]:
    """CLS token after every transformer block plus the final pooled output."""
    params = to_tensors(encoder, requires_grad=False)
    per_layer: list[list[np.ndarray]] = [[] for _ in range(config.depth + 1)]
    for i in range(0, len(images), batch_size):
        out = encode(params, config, images[i:i + batch_size], return_block_cls=True)
        for j, t in enumerate(out.block_cls):
            per_layer[j].append(t.data)
        per_layer[-1].append(out.pooled.data)
    return [np.concatenate(chunks) for chunks in per_layer]


# --------------------------------------------------------------------- k-NN


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.maximum(n, 1e-12)


def knn_classify(train: EmbeddingSet, test: EmbeddingSet, k: int = 10) -> tuple[np.ndarray, float]:
    """Cosine-similarity weighted k-NN vote; returns (predictions, accuracy)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if train.labels is None:
        raise ValueError("training embeddings must be labeled")
    k = min(k, len(train))
    n_classes = int(train.labels.max()) + 1
    if test.labels is not None:
        n_classes = max(n_classes, int(test.labels.max()) + 1)
    a, b = _unit(test.vectors), _unit(train.vectors)
    preds = np.empty(len(test), dtype=np.int64)
    for start in range(0, len(test), 1024):
        sims = a[start:start + 1024] @ b.T
        nbr = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        w = np.take_along_axis(sims, nbr, axis=1)
        scores = np.zeros((sims.shape[0], n_classes))
        np.add.at(scores, (np.arange(sims.shape[0])[:, None], train.labels[nbr]), w)
        preds[start:start + 1024] = np.argmax(scores, axis=1)  # first max = lowest class id
    acc = float(np.mean(preds == test.labels)) if test.labels is not None else float("nan")
    return preds, acc


# ------------------------------------------------------------- linear probe


@dataclass
class ProbeResult:
    accuracy: float
    lr: float
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    per_lr: dict[float, float]

    def logits(self, vectors: np.ndarray) -> np.ndarray:
        return ((vectors - self.mean) / self.std) @ self.weight + self.bias

    def folded(self) -> tuple[np.ndarray, np.ndarray]:
        """Weight and bias with the standardization absorbed."""
        w = self.weight / self.std[:, None]
        return w, self.bias - (self.mean / self.std) @ self.weight

    def predict_proba(self, vectors: np.ndarray) -> np.ndarray:
        z = self.logits(vectors)
        return np.exp(z - logsumexp(z, axis=1, keepdims=True))


def _standardizer(x: np.ndarray, eps: float = 1e-5):
    # non-affine BatchNorm with statistics over the whole training set
    return x.mean(axis=0), np.sqrt(x.var(axis=0) + eps)


def _train_linear(x, y, n_classes, lr, epochs, warmup_epochs, batch_size, rng, loss="ce"):
    d = x.shape[1]
    out_dim = n_classes if loss == "ce" else y.shape[1]
    # L1 regression starts from the best constant predictor (the median)
    bias = np.zeros(out_dim) if loss == "ce" else np.median(y, axis=0)
    params = {"weight": Tensor(np.zeros((d, out_dim)), requires_grad=True),
              "bias": Tensor(bias, requires_grad=True)}
    opt = SGD(params, momentum=0.9)
    n = len(x)
    steps = max(1, int(np.ceil(n / batch_size)))
    total = epochs * steps
    warm = warmup_epochs / epochs if epochs else 0.0
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            with Tape() as tape:
                z = ad.linear(x[idx], params["weight"], params["bias"])
                if loss == "ce":
                    out = ad.cross_entropy(z, y[idx])
                else:
                    out = ad.mean(ad.abs_(ad.sub(z, y[idx])))
            ad.backward(tape, output=out)
            opt.step(lr * lr_schedule(min(step, total), total, min(warm, 0.99)))
            opt.zero_grad()
            step += 1
    return params["weight"].data, params["bias"].data


def linear_probe(
    train: EmbeddingSet,
    test: EmbeddingSet,
    lrs=(0.1, 0.09, 0.08, 0.07, 0.06, 0.05, 0.04, 0.03, 0.02, 0.01),
    epochs: int = 50,
    warmup_epochs: int = 5,
    batch_size: int = 256,
    seed: int = 0,
) -> ProbeResult:
    """Standardize, train one linear layer per lr by SGD, keep the best test accuracy."""
    if train.labels is None or test.labels is None:
        raise ValueError("linear probing needs labeled sets")
    mean, std = _standardizer(train.vectors)
    xs = (train.vectors - mean) / std
    xt = (test.vectors - mean) / std
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    best = None
    per_lr = {}
    for lr in lrs:
        rng = np.random.default_rng(seed)
        try:
            w, b = _train_linear(xs, train.labels, n_classes, lr, epochs, warmup_epochs, batch_size, rng)
        except ad.AutodiffError:
            continue  # diverged at this lr
        acc = float(np.mean(np.argmax(xt @ w + b, axis=1) == test.labels))
        per_lr[float(lr)] = acc
        if best is None or acc > best.accuracy:
            best = ProbeResult(acc, float(lr), w, b, mean, std, per_lr)
    if best is None:
        raise RuntimeError("linear probe diverged for every learning rate")
    best.per_lr = per_lr
    return best


# ---------------------------------------------------- low-shot logistic regression


def _fit_logreg(x: np.ndarray, y: np.ndarray, n_classes: int, l2: float, max_iter: int = 1000):
    n, d = x.shape
    onehot = np.eye(n_classes)[y]

    def fun(theta):
        w = theta[: d * n_classes].reshape(d, n_classes)
        b = theta[d * n_classes:]
        z = x @ w + b
        lse = logsumexp(z, axis=1)
        loss = np.mean(lse - (z * onehot).sum(axis=1)) + 0.5 * l2 * np.sum(w * w)
        p = np.exp(z - lse[:, None])
        gz = (p - onehot) / n
        grad = np.concatenate([(x.T @ gz + l2 * w).ravel(), gz.sum(axis=0)])
        return loss, grad

    theta0 = np.zeros(d * n_classes + n_classes)
    res = minimize(fun, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": 1e-6, "ftol": 0.0})
    w = res.x[: d * n_classes].reshape(d, n_classes)
    return w, res.x[d * n_classes:]


def lowshot_split(labels: np.ndarray, shots: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    idx = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        idx.extend(rng.choice(members, size=min(shots, len(members)), replace=False))
    return np.sort(np.asarray(idx))


def logistic_regression_lowshot(
    train: EmbeddingSet,
    test: EmbeddingSet,
    shots: int,
    l2: float = 1e-3,
    seeds=(0, 1, 2),
    n_classes: int | None = None,
) -> tuple[float, float, list[float]]:
    """Mean and std accuracy of L2-regularized multinomial regression over splits.

    Embeddings are L2-normalized; each split draws ``shots`` labeled samples
    per class. ``shots`` larger than a class takes the whole class.
    """
    if shots < 1:
        raise ValueError("need at least one labeled sample per class")
    if train.labels is None or test.labels is None:
        raise ValueError("low-shot evaluation needs labeled sets")
    n_classes = n_classes or int(max(train.labels.max(), test.labels.max())) + 1
    missing = sorted(set(range(n_classes)) - set(np.unique(train.labels).tolist()))
    if missing:
        raise ValueError(f"classes {missing} have no training samples")
    xtr, xte = _unit(train.vectors), _unit(test.vectors)
    accs = []
    for seed in seeds:
        idx = lowshot_split(train.labels, shots, seed)
        w, b = _fit_logreg(xtr[idx], train.labels[idx], n_classes, l2)
        accs.append(float(np.mean(np.argmax(xte @ w + b, axis=1) == test.labels)))
    return float(np.mean(accs)), float(np.std(accs)), accs


# ------------------------------------------------------------------ k-means


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[i])
        d2 = np.minimum(d2, _sq_dists(x, x[i][None])[:, 0])
    return np.array(centers)


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int) -> tuple[np.ndarray, float]:
    k = len(centers)
    assign = None
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        new = np.argmin(d, axis=1)
        counts = np.bincount(new, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # re-seed an empty cluster with the point farthest from its center
            far = int(np.argmax(d[np.arange(len(x)), new]))
            new[far] = c
            d[far] = 0.0
            counts = np.bincount(new, minlength=k)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        centers = np.array([x[assign == c].mean(axis=0) for c in range(k)])
    inertia = float(((x - centers[assign]) ** 2).sum())
    return assign, inertia


def kmeans(embeddings, n_clusters: int, n_restarts: int = 100, seed: int = 0, max_iter: int = 300) -> ClusterResult:
    """Lloyd's algorithm from k-means++ seeds; keep the lowest-inertia restart."""
    x = np.asarray(embeddings, dtype=np.float64)
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if n_clusters > len(x):
        raise ValueError("more clusters than points")
    rng = np.random.default_rng(seed)
    best = None
    inertias = []
    for _ in range(n_restarts):
        assign, inertia = _lloyd(x, _kmeanspp(x, n_clusters, rng), max_iter)
        inertias.append(inertia)
        if best is None or inertia < best[1]:
            best = (assign, inertia)
    return ClusterResult(best[0], best[1], seed, inertias)


# ----------------------------------------------------------- cluster metrics


def contingency(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1 if ai.size else 0, bi.max() + 1 if bi.size else 0), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def cluster_accuracy(assignment, labels) -> float:
    """Best one-to-one cluster -> class matching accuracy (Hungarian)."""
    table = contingency(assignment, labels)
    if table.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / table.sum())


def silhouette(embeddings, labels, max_points: int = 10_000, seed: int = 0) -> float:
    """Mean silhouette with Euclidean distances; singleton-class samples score 0."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if x.shape[0] != y.shape[0]:
        raise ValueError("length mismatch")
    if x.shape[0] > max_points:
        idx = np.sort(np.random.default_rng(seed).choice(x.shape[0], max_points, replace=False))
        x, y = x[idx], y[idx]
    classes, yi = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two classes")
    counts = np.bincount(yi)
    n = len(x)
    sums = np.zeros((n, len(classes)))
    for start in range(0, n, 1024):
        # exact differences; the Gram-matrix shortcut loses ~1e-9 to cancellation
        d = cdist(x[start:start + 1024], x)
        for c in range(len(classes)):
            sums[start:start + 1024, c] = d[:, yi == c].sum(axis=1)
    own = counts[yi]
    a = sums[np.arange(n), yi] / np.maximum(own - 1, 1)
    mean_other = sums / counts[None, :]
    mean_other[np.arange(n), yi] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _mutual_info(table: np.ndarray) -> float:
    n = table.sum()
    a = table.sum(1)
    b = table.sum(0)
    nz = table > 0
    nij = table[nz]
    outer = np.outer(a, b)[nz]
    return float((nij / n * (np.log(n * nij) - np.log(outer))).sum())


def expected_mutual_info(table: np.ndarray) -> float:
    """E[MI] under the hypergeometric (permutation) model with fixed marginals."""
    n = int(table.sum())
    a = table.sum(1).astype(np.int64)
    b = table.sum(0).astype(np.int64)
    emi = 0.0
    lg_n = gammaln(n + 1)
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if hi < lo:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            term = nij / n * (np.log(n * nij) - np.log(ai * bj))
            logp = (gammaln(ai + 1) + gammaln(bj + 1) + gammaln(n - ai + 1) + gammaln(n - bj + 1)
                    - lg_n - gammaln(nij + 1) - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                    - gammaln(n - ai - bj + nij + 1))
            emi += float((term * np.exp(logp)).sum())
    return emi


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def nmi_ami_ari(assignment, labels) -> tuple[float, float, float]:
    """NMI (arithmetic-mean normalization), AMI and ARI of two partitions."""
    table = contingency(assignment, labels)
    n = table.sum()
    if n == 0:
        raise ValueError("empty partitions")
    nonzero = table > 0
    if table.shape[0] == table.shape[1] and np.all(nonzero.sum(0) == 1) and np.all(nonzero.sum(1) == 1):
        # the same partition under another labeling: exact, free of log roundoff
        return 1.0, 1.0, 1.0
    h_a, h_b = _entropy(table.sum(1)), _entropy(table.sum(0))
    mi = _mutual_info(table)
    trivial = table.shape[0] == table.shape[1] == 1 or table.shape[0] == table.shape[1] == 0
    norm = 0.5 * (h_a + h_b)
    if trivial or norm == 0:
        nmi = 1.0
    else:
        nmi = mi / norm
    if trivial or (h_a == 0 and h_b == 0):
        ami = 1.0
    else:
        emi = expected_mutual_info(table)
        denom = norm - emi
        eps = np.finfo(np.float64).eps
        denom = min(denom, -eps) if denom < 0 else max(denom, eps)
        ami = (mi - emi) / denom
    sum_comb = _comb2(table).sum()
    sum_a = _comb2(table.sum(1)).sum()
    sum_b = _comb2(table.sum(0)).sum()
    expected = sum_a * sum_b / _comb2(n)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        ari = 1.0
    else:
        ari = (sum_comb - expected) / (max_index - expected)
    return float(nmi), float(ami), float(ari)


# -------------------------------------------------------- effective invariance


def effective_invariance(pred, pred_t):
    """0 where the predicted classes differ, else sqrt(conf * conf_t).

    ``pred`` and ``pred_t`` are (class, confidence) pairs of scalars or arrays.
    """
    cls, conf = (np.asarray(v) for v in pred)
    cls_t, conf_t = (np.asarray(v) for v in pred_t)
    conf = conf.astype(np.float64)
    conf_t = conf_t.astype(np.float64)
    for c in (conf, conf_t):
        if np.any((c < 0) | (c > 1)):
            raise ValueError("confidences must lie in [0, 1]")
    out = np.where(cls == cls_t, np.sqrt(conf * conf_t), 0.0)
    return float(out) if out.ndim == 0 else out


def mean_effective_invariance(probs: np.ndarray, probs_t: np.ndarray) -> float:
    """Dataset mean of EI from two (n, C) probability matrices."""
    pred = (probs.argmax(1), probs.max(1))
    pred_t = (probs_t.argmax(1), probs_t.max(1))
    return float(np.mean(effective_invariance(pred, pred_t)))


def _grayscale(img):
    g = img @ np.array([0.299, 0.587, 0.114])
    return np.repeat(g[..., None], 3, axis=-1)


INVARIANCE_TRANSFORMS = {
    "rotate90": lambda img: np.rot90(img, 1, axes=(-3, -2)),
    "rotate180": lambda img: np.rot90(img, 2, axes=(-3, -2)),
    "rotate270": lambda img: np.rot90(img, 3, axes=(-3, -2)),
    "grayscale": _grayscale,
    "channel_swap": lambda img: img[..., ::-1],
    "darken": lambda img: img * 0.6,
}
ROTATIONS = ("rotate90", "rotate180", "rotate270")
COLOR_TRANSFORMS = ("grayscale", "channel_swap", "darken")


# ------------------------------------------------------------ color histogram


def color_histogram_target(image: np.ndarray, bins: int = 64, value_range=(0.0, 1.0)) -> np.ndarray:
    """Per-channel histogram over equal-width bins, each channel summing to 1."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    img = np.asarray(image, dtype=np.float64)
    lo, hi = value_range
    single = img.ndim == 3
    if single:
        img = img[None]
    n, c = img.shape[0], img.shape[-1]
    flat = img.reshape(n, -1, c)
    idx = np.clip(((flat - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
    out = np.zeros((n, c, bins))
    for ch in range(c):
        for i in range(n):
            out[i, ch] = np.bincount(idx[i, :, ch], minlength=bins)
    out /= flat.shape[1]
    out = out.reshape(n, c * bins)
    return out[0] if single else out


def uniform_histogram_baseline(targets: np.ndarray, bins: int) -> float:
    """Mean L1 error of predicting 1/bins everywhere."""
    return float(np.mean(np.abs(np.asarray(targets) - 1.0 / bins)))


def histogram_probe_error(predictions, targets, baseline_constant: float) -> float:
    """Mean L1 error relative to the uniform-prediction baseline, in percent."""
    if baseline_constant <= 0:
        raise ValueError("baseline must be positive")
    err = np.mean(np.abs(np.asarray(predictions) - np.asarray(targets)))
    return float(err / baseline_constant * 100.0)


def histogram_probe(
    train_features: np.ndarray,
    train_targets: np.ndarray,
    test_features: np.ndarray,
    test_targets: np.ndarray,
    bins: int,
    epochs: int = 10,
    warmup_epochs: int = 1,
    lr: float = 0.1,
    batch_size: int = 256,
    seed: int = 0,
) -> float:
    """Train a standardized linear L1 regressor; return its histogram error on test."""
    mean, std = _standardizer(train_features)
    rng = np.random.default_rng(seed)
    w, b = _train_linear((train_features - mean) / std, train_targets, None, lr,
                         epochs, warmup_epochs, batch_size, rng, loss="l1")
    pred = ((test_features - mean) / std) @ w + b
    return histogram_probe_error(pred, test_targets, uniform_histogram_baseline(test_targets, bins))
