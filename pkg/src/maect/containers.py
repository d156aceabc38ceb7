"""On-disk containers: a one-line JSON manifest followed by a raw little-endian payload.

Layout of every file::

    <magic>\\n
    <manifest as single-line JSON>\\n
    <payload bytes>
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"MAECT-DATASET v1"
CHECKPOINT_MAGIC = b"MAECT-CHECKPOINT v1"
EMBEDDING_MAGIC = b"MAECT-EMBEDDINGS v1"

PIXEL_DTYPE = np.dtype("<u1")
LABEL_DTYPE = np.dtype("<i4")
FLOAT_DTYPE = np.dtype("<f8")


class ContainerError(ValueError):
    pass


def _write(path: Path, magic: bytes, manifest: dict, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic + b"\n" + header + b"\n")
        fh.write(payload)
    tmp.replace(path)


def _read(path: Path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1)
    if first < 0 or second < 0 or raw[:first] != magic:
        raise ContainerError(f"{path}: not a {magic.decode()} file")
    return json.loads(raw[first + 1:second]), raw[second + 1:]


# ------------------------------------------------------------------ dataset


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, C) uint8
    labels: np.ndarray  # (n,) int
    n_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ContainerError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return self.images.shape[0]

    def float_images(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return imgs.astype(np.float64) / 255.0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)

    def manifest(self) -> dict:
        n, h, w, c = self.images.shape
        return {
            "n": n, "height": h, "width": w, "channels": c,
            "n_classes": int(self.n_classes),
            "dtype": "uint8", "label_dtype": "int32", "endianness": "little",
        }

    def payload(self) -> bytes:
        return (
            np.ascontiguousarray(self.images, dtype=PIXEL_DTYPE).tobytes()
            + np.ascontiguousarray(self.labels, dtype=LABEL_DTYPE).tobytes()
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode() + self.payload()).hexdigest()


def save_dataset(path, ds: Dataset) -> None:
    _write(path, DATASET_MAGIC, ds.manifest(), ds.payload())


def load_dataset(path) -> Dataset:
    m, payload = _read(path, DATASET_MAGIC)
    n, h, w, c = m["n"], m["height"], m["width"], m["channels"]
    pix = n * h * w * c * PIXEL_DTYPE.itemsize
    expected = pix + n * LABEL_DTYPE.itemsize
    if len(payload) != expected:
        raise ContainerError(f"{path}: payload has {len(payload)} bytes, manifest implies {expected}")
    images = np.frombuffer(payload[:pix], dtype=PIXEL_DTYPE).reshape(n, h, w, c).copy()
    labels = np.frombuffer(payload[pix:], dtype=LABEL_DTYPE).astype(np.int64)
    return Dataset(images, labels, m["n_classes"])


# --------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    """Named float64 arrays plus free-form JSON metadata (configs, provenance)."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def put_group(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.tensors[f"{prefix}/{k}"] = np.array(v, dtype=np.float64)

    def has_group(self, prefix: str) -> bool:
        return any(k.startswith(prefix + "/") for k in self.tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype=FLOAT_DTYPE, order="C")
        data = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {"dtype": "float64", "endianness": "little", "tensors": entries, "meta": ckpt.meta}
    _write(path, CHECKPOINT_MAGIC, manifest, b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    m, payload = _read(path, CHECKPOINT_MAGIC)
    tensors = {}
    for e in m["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise ContainerError(f"{path}: tensor {e['name']} runs past the payload")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=FLOAT_DTYPE)
        tensors[e["name"]] = arr.reshape(tuple(e["shape"])).copy()
    return Checkpoint(tensors, m.get("meta", {}))


# --------------------------------------------------------------- embeddings


def save_embeddings(path, vectors: np.ndarray, labels: np.ndarray | None, meta: dict) -> None:
    vectors = np.ascontiguousarray(vectors, dtype=FLOAT_DTYPE)
    manifest = {
        "n": vectors.shape[0], "dim": vectors.shape[1], "dtype": "float64",
        "has_labels": labels is not None, "label_dtype": "int32", "endianness": "little", "meta": meta,
    }
    payload = vectors.tobytes()
    if labels is not None:
        payload += np.ascontiguousarray(labels, dtype=LABEL_DTYPE).tobytes()
    _write(path, EMBEDDING_MAGIC, manifest, payload)


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray | None, dict]:
    m, payload = _read(path, EMBEDDING_MAGIC)
    nbytes = m["n"] * m["dim"] * FLOAT_DTYPE.itemsize
    vectors = np.frombuffer(payload[:nbytes], dtype=FLOAT_DTYPE).reshape(m["n"], m["dim"]).copy()
    labels = None
    if m["has_labels"]:
        labels = np.frombuffer(payload[nbytes:], dtype=LABEL_DTYPE).astype(np.int64)
    return vectors, labels, m["meta"]
