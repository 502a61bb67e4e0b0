"""Confusion matrices, per-class IoU and the ablation comparison table."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import IGNORE_INDEX, SegSample
from .errors import ConfigurationError, DataError, EvaluationError, ReportError


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    num_classes: int
    counts: np.ndarray = None
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ConfigurationError(f"cannot merge {self.num_classes}-class and {other.num_classes}-class matrices")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts, self.ignored + other.ignored)


def accumulate(cm: ConfusionMatrix, pred, label, ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    """Add one prediction/label pair to ``cm`` in place and return it."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise DataError(f"prediction {pred.shape} and label {label.shape} differ in shape")
    k = cm.num_classes
    keep = label != ignore_index
    t = label[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= k):
        raise DataError(f"label value outside [0, {k}): {int(t[(t < 0) | (t >= k)][0])}")
    if p.size and (p.min() < 0 or p.max() >= k):
        raise DataError(f"predicted class outside [0, {k}): {int(p[(p < 0) | (p >= k)][0])}")
    cm.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    cm.ignored += int((~keep).sum())
    return cm


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where the denominator is 0) and their mean over defined classes."""
    c = cm.counts.astype(np.float64)
    diag = np.diag(c)
    denom = c.sum(axis=1) + c.sum(axis=0) - diag
    iou = np.full(cm.num_classes, np.nan)
    ok = denom > 0
    if not ok.any():
        raise EvaluationError("no class has any ground-truth or predicted pixels")
    iou[ok] = diag[ok] / denom[ok]
    return iou, float(iou[ok].mean())


@dataclass
class EvalReport:
    iou: np.ndarray
    miou: float
    class_names: list[str]
    cm: ConfusionMatrix
    n_samples: int

    def table(self) -> str:
        width = max(6, *(len(n) for n in self.class_names))
        lines = [f"{'class':<{width}}  {'IoU':>7}"]
        for name, v in zip(self.class_names, self.iou):
            lines.append(f"{name:<{width}}  {'n/a' if np.isnan(v) else f'{100 * v:7.2f}':>7}")
        lines.append(f"{'mIoU':<{width}}  {100 * self.miou:7.2f}")
        return "\n".join(lines)

    def record(self) -> dict:
        return {"miou": 100 * self.miou, "n_samples": self.n_samples, "ignored": self.cm.ignored,
                "iou": {n: (None if np.isnan(v) else 100 * float(v)) for n, v in zip(self.class_names, self.iou)}}


def predict(model, image: np.ndarray) -> np.ndarray:
    """Whole-image arg-max prediction."""
    with T.no_grad():
        logits = model.seg_forward(image)
    return logits.data.argmax(axis=0)


def evaluate(source, dataset: Sequence[SegSample], class_names: Sequence[str] | None = None,
             ignore_index: int = IGNORE_INDEX, num_classes: int | None = None) -> EvalReport:
    """Evaluate a model, training state or checkpoint path on ``dataset``.

    ``num_classes`` (if given) must agree with the model's class count.
    """
    model = _resolve_model(source)
    k = model.cfg.num_classes
    if num_classes is not None and num_classes != k:
        raise ConfigurationError(f"dataset has {num_classes} classes but the model predicts {k}")
    if class_names is not None and len(class_names) != k:
        raise ConfigurationError(f"{len(class_names)} class names for a {k}-class model")
    if len(dataset) == 0:
        raise EvaluationError("evaluation dataset is empty")
    cm = ConfusionMatrix(k)
    for s in dataset:
        lab = np.asarray(s.label)
        bad = (lab != ignore_index) & (lab >= k)
        if bad.any():
            raise ConfigurationError(f"label value {int(lab[bad][0])} exceeds the model's {k} classes")
        accumulate(cm, predict(model, s.image), lab, ignore_index)
    iou, m = miou(cm)
    names = list(class_names) if class_names is not None else [f"c{i}" for i in range(k)]
    return EvalReport(iou, m, names, cm, len(dataset))


def _resolve_model(source):
    from .training import TrainState, load_state

    if isinstance(source, (str, Path)):
        return load_state(source).model
    if isinstance(source, TrainState):
        return source.model
    return source


# ---------------------------------------------------------------------------
# ablation table
# ---------------------------------------------------------------------------

@dataclass
class AblationReport:
    domains: list[str]
    rows: list[dict] = field(default_factory=list)  # name, scores, avg, delta, avg_delta
    baseline: str = ""

    def table(self) -> str:
        head = f"{'run':<8}" + "".join(f"{d:>16}" for d in self.domains) + f"{'avg':>16}"
        lines = [head]
        for r in self.rows:
            cells = [f"{s:7.2f} ({dl:+6.2f})" for s, dl in zip(r["scores"], r["delta"])]
            cells.append(f"{r['avg']:7.2f} ({r['avg_delta']:+6.2f})")
            lines.append(f"{r['name']:<8}" + "".join(f"{c:>16}" for c in cells))
        return "\n".join(lines)

    def records(self) -> list[dict]:
        return [{"run": r["name"], "baseline": self.baseline,
                 **{d: s for d, s in zip(self.domains, r["scores"])}, "avg": r["avg"],
                 **{f"delta_{d}": dl for d, dl in zip(self.domains, r["delta"])}, "delta_avg": r["avg_delta"]}
                for r in self.rows]


def ablation_report(runs: Sequence[tuple[str, Mapping[str, float]]] | Mapping[str, Mapping[str, float]],
                    baseline: str) -> AblationReport:
    """Per-domain mIoU and average for each run, with deltas against ``baseline``."""
    items = list(runs.items()) if isinstance(runs, Mapping) else list(runs)
    if len(items) < 2:
        raise ReportError("an ablation report needs at least two runs")
    names = [n for n, _ in items]
    if baseline not in names:
        raise ReportError(f"baseline run {baseline!r} not among {names}")
    domains = list(dict(items[names.index(baseline)][1]))
    for name, scores in items:
        missing = [d for d in domains if d not in scores]
        extra = [d for d in scores if d not in domains]
        if missing:
            raise ReportError(f"run {name!r} is missing domain {missing[0]!r}")
        if extra:
            raise ReportError(f"run {name!r} has domain {extra[0]!r} absent from the baseline")
    base = np.array([items[names.index(baseline)][1][d] for d in domains], dtype=np.float64)
    rep = AblationReport(domains, baseline=baseline)
    for name, scores in items:
        s = np.array([scores[d] for d in domains], dtype=np.float64)
        rep.rows.append({"name": name, "scores": s.tolist(), "avg": float(s.mean()),
                         "delta": (s - base).tolist(), "avg_delta": float(s.mean() - base.mean())})
    return rep
