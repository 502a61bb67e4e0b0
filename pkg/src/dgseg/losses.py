"""Segmentation, reconstruction and consistency losses, and their gated sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, LabelError
from .tensor import Tensor

IGNORE_INDEX = 255
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossReport:
    l_seg: float
    l_mim: float
    l_delta: float
    total: float
    u: int

    def __post_init__(self):
        if self.u == 0 and self.l_delta != 0.0:
            raise ContractError("gate u=0 must carry a zero consistency loss")
        for name in ("l_seg", "l_mim", "l_delta"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} is negative: {getattr(self, name)}")

    def as_record(self, iteration: int | None = None) -> dict:
        rec = {"l_seg": self.l_seg, "l_mim": self.l_mim, "l_delta": self.l_delta,
               "total": self.total, "u": self.u}
        if iteration is not None:
            rec = {"iteration": iteration, **rec}
        return rec


def _check_labels(labels: np.ndarray, k: int, ignore_index: int) -> None:
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= k))
    if bad.any():
        raise LabelError(f"label value {int(labels[bad].flat[0])} outside [0, {k}) and not ignore index {ignore_index}")


def seg_loss(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean pixel cross-entropy plus macro soft-Dice loss.

    ``logits`` is ``(K, H, W)`` or ``(N, K, H, W)``.  Dice is computed per class
    over all non-ignored pixels of the input (the whole batch is one pool),
    with smoothing 1.0, and averaged over the classes present in the labels
    or in the arg-max prediction.
    """
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits = logits.reshape(1, *logits.shape)
        labels = labels[None]
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    _check_labels(labels, k, ignore_index)
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        return (logits * 0.0).sum()
    onehot = np.zeros((n, k, h, w), dtype=logits.dtype)
    ni, hi, wi = np.nonzero(valid)
    onehot[ni, labels[valid], hi, wi] = 1.0
    validf = valid[:, None].astype(logits.dtype)

    logp = T.log_softmax(logits, axis=1)
    ce = -(logp * onehot).sum() * (1.0 / n_valid)

    prob = T.softmax(logits, axis=1) * validf
    inter = (prob * onehot).sum(axis=(0, 2, 3))
    psum = prob.sum(axis=(0, 2, 3))
    tsum = onehot.sum(axis=(0, 2, 3))
    dice = (inter * 2.0 + DICE_SMOOTH) / (psum + (tsum + DICE_SMOOTH))
    pred = logits.data.argmax(axis=1)
    present = (tsum > 0) | np.array([np.any(pred[valid] == c) for c in range(k)])
    weights = present.astype(logits.dtype) / max(int(present.sum()), 1)
    dice_loss = ((1.0 - dice) * weights).sum()
    return ce + dice_loss


def _norm(diff: Tensor, norm: str) -> Tensor:
    if norm == "l1":
        return T.tabs(diff)
    if norm == "l2":
        return diff * diff
    raise ContractError(f"norm must be 'l1' or 'l2', got {norm!r}")


def _masked_mean(e: Tensor, weight: np.ndarray | None) -> Tensor:
    if weight is None:
        return e.mean()
    w = np.broadcast_to(weight, e.shape).astype(e.dtype)
    total = float(w.sum())
    if total == 0:
        return (e * 0.0).sum()
    return (e * w).sum() * (1.0 / total)


def mim_loss(pred_m: Tensor, target_x, pred_s: Tensor | None = None, target_s=None, norm: str = "l1",
             weight: np.ndarray | None = None) -> Tensor:
    """Reconstruction loss: mean elementwise norm of ``pred_m - target_x``,
    plus the same term for the styled pair when given.

    ``weight`` (broadcastable to the predictions) restricts the masked-branch
    term to selected pixels.
    """
    if (pred_s is None) != (target_s is None):
        raise ContractError("styled prediction and styled target must be given together")
    target_x = T.as_tensor(target_x, dtype=pred_m.dtype)
    if pred_m.shape != target_x.shape:
        raise DimensionError(f"prediction {pred_m.shape} vs target {target_x.shape}")
    loss = _masked_mean(_norm(pred_m - target_x, norm), weight)
    if pred_s is not None:
        target_s = T.as_tensor(target_s, dtype=pred_s.dtype)
        if pred_s.shape != target_s.shape:
            raise DimensionError(f"styled prediction {pred_s.shape} vs target {target_s.shape}")
        loss = loss + _norm(pred_s - target_s, norm).mean()
    return loss


def delta_loss(pred_m: Tensor, pred_s: Tensor, norm: str = "l1") -> Tensor:
    """Mean elementwise norm of the difference between the two reconstructions."""
    if pred_m.shape != pred_s.shape:
        raise DimensionError(f"reconstructions differ in shape: {pred_m.shape} vs {pred_s.shape}")
    return _norm(pred_m - pred_s, norm).mean()


def gated_total(u: int, l_seg, l_mim, l_delta):
    """The differentiable total: ``l_seg + l_mim`` (+ ``l_delta`` when ``u == 1``)."""
    if u not in (0, 1):
        raise ContractError(f"gate must be 0 or 1, got {u}")
    total = l_seg + l_mim
    return total + l_delta if u == 1 else total


def compose_total(u: int, l_seg, l_mim, l_delta) -> LossReport:
    """Report for one step; with ``u == 0`` the consistency term is forced to 0."""
    if u not in (0, 1):
        raise ContractError(f"gate must be 0 or 1, got {u}")
    val = lambda t: float(t.data) if isinstance(t, Tensor) else float(t)  # noqa: E731
    seg, mim, dl = val(l_seg), val(l_mim), (val(l_delta) if u == 1 else 0.0)
    return LossReport(seg, mim, dl, seg + mim + dl, u)
