"""Small helpers shared by the training loops."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: str, step: int, lr: float, loss: float | None, detail: str = ""):
        self.stage, self.step, self.lr, self.loss = stage, step, lr, loss
        msg = f"{stage}: training diverged at step {step} (lr={lr:.6g}, loss={loss})"
        super().__init__(msg + (f": {detail}" if detail else ""))


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled full batches; a trailing partial batch is dropped unless it is the only one."""
    perm = rng.permutation(n)
    if n <= batch_size:
        return [perm]
    return [perm[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return 1 if n <= batch_size else n // batch_size


def to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {n: t.data.copy() for n, t in params.items()}


def to_tensors(arrays: dict[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {n: Tensor(np.array(a, dtype=np.float64), requires_grad=requires_grad) for n, a in arrays.items()}


def check_finite_loss(value: float, stage: str, step: int, lr: float) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(stage, step, lr, value)
