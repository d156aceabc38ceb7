"""Run manifests, head/queue (de)serialization and the metrics report export."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import BatchNormState, Tensor
from .nnclr import EmbeddingQueue, HeadConfig, NNCLRHead

REPORT_NAME = "report.json"
TIMING_FIELDS = ("wall_seconds", "started_at")


@dataclass
class RunManifest:
    stage: str
    config: dict
    dataset_fingerprint: str
    seed: int
    code_version: str = __version__
    inputs: dict = field(default_factory=dict)  # upstream stage -> run id
    log_rows: int = 0
    wall_seconds: float | None = None
    started_at: str | None = None

    @property
    def run_id(self) -> str:
        key = json.dumps(
            [self.stage, self.config, self.dataset_fingerprint, self.seed, self.code_version, self.inputs],
            sort_keys=True,
        )
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        d["run_id"] = self.run_id
        if not timing:
            for name in TIMING_FIELDS:
                d.pop(name)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        d = {k: v for k, v in d.items() if k != "run_id"}
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------- head / queue


def head_to_arrays(head: NNCLRHead) -> dict[str, np.ndarray]:
    out = {f"params/{n}": t.data for n, t in head.params.items()}
    out.update({f"ema/{n}": t.data for n, t in head.ema_params.items()})
    for prefix, states in (("bn", head.bn), ("ema_bn", head.ema_bn)):
        for n, s in states.items():
            out[f"{prefix}/{n}/mean"] = s.mean
            out[f"{prefix}/{n}/var"] = s.var
    return out


def head_from_arrays(config: HeadConfig, arrays: dict[str, np.ndarray]) -> NNCLRHead:
    def group(prefix):
        p = prefix + "/"
        return {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}

    def states(prefix):
        g = group(prefix)
        names = sorted({k.rsplit("/", 1)[0] for k in g})
        return {n: BatchNormState(g[f"{n}/mean"].copy(), g[f"{n}/var"].copy()) for n in names}

    params = {n: Tensor(a.copy(), requires_grad=True) for n, a in group("params").items()}
    ema = {n: Tensor(a.copy()) for n, a in group("ema").items()}
    if not params:
        raise ValueError("no head parameters in checkpoint")
    return NNCLRHead(config, params, states("bn"), ema, states("ema_bn"))


def queue_to_arrays(queue: EmbeddingQueue) -> dict[str, np.ndarray]:
    return queue.snapshot()


# ------------------------------------------------------------------- report


def write_curve_csv(path, rows: list[dict]) -> None:
    """Log rows as CSV; missing values (None) become empty cells."""
    cols = sorted({k for r in rows for k in r})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r.get(c) is None else repr(r.get(c)) for c in cols])
    Path(path).write_text(buf.getvalue())


def read_curve_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _clean(value):
    """JSON-safe floats: NaN / inf are stored as strings."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else str(v)
    if isinstance(value, np.integer):
        return int(value)
    return value


def export_report(run_dir) -> dict:
    """Merge every stage manifest and metrics file of a run into ``report.json``.

    Timing fields are left out so identical runs give byte-identical reports.
    A stage whose curve CSV is missing or shorter than its manifest says is
    flagged and the report is marked incomplete (with a warning, not an error).
    """
    run_dir = Path(run_dir)
    stages = {}
    problems = []
    for mpath in sorted(run_dir.glob("*.manifest.json")):
        name = mpath.name[: -len(".manifest.json")]
        m = RunManifest.load(mpath)
        entry = {"manifest": m.to_dict(timing=False)}
        curve = run_dir / "curves" / f"{name}.csv"
        if m.log_rows:
            rows = read_curve_csv(curve) if curve.exists() else []
            if len(rows) < m.log_rows:
                problems.append(f"{name}: log has {len(rows)} of {m.log_rows} rows")
            entry["curve"] = f"curves/{name}.csv"
        mfile = run_dir / "metrics" / f"{name}.json"
        if mfile.exists():
            entry["metrics"] = json.loads(mfile.read_text())
        stages[name] = entry
    metrics = {}
    for entry in stages.values():
        metrics.update(entry.get("metrics", {}))
    report = {
        "complete": not problems and bool(stages),
        "problems": problems,
        "stages": stages,
        "metrics": metrics,
    }
    if problems:
        warnings.warn("report incomplete: " + "; ".join(problems), stacklevel=2)
    text = json.dumps(_clean(report), indent=2, sort_keys=True) + "\n"
    (run_dir / REPORT_NAME).write_text(text)
    return report


def write_metrics(run_dir, stage: str, metrics: dict) -> Path:
    path = Path(run_dir) / "metrics" / f"{stage}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(metrics), indent=2, sort_keys=True) + "\n")
    return path
