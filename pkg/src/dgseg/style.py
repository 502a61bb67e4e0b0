"""Style-statistics augmentation: style embeddings, offline corpus statistics,
block masks and the styled / masked image compositions used during training.

A style embedding is the channel-wise spatial mean and standard deviation of an
image.  Restyling renormalises each channel of an image from its own
statistics to a target pair (adaptive instance renormalisation).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .errors import ConfigurationError, DataError, DimensionError, InsufficientDataError
from .nn import Module, Parameter
from .tensor import Tensor

STD_FLOOR = 1e-5
STATS_FORMAT = "dgseg.style_stats"
STATS_VERSION = 1


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class StyleEmbedding:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise DimensionError(f"embedding mean {self.mean.shape} and std {self.std.shape} must be equal-length vectors")
        if np.any(self.std < 0):
            raise ValueError("embedding std entries must be non-negative")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.mean, self.std])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "StyleEmbedding":
        c = vec.shape[0] // 2
        return cls(np.array(vec[:c]), np.maximum(np.array(vec[c:]), 0.0))


@dataclass(frozen=True)
class StyleStats:
    """Gaussian description of a style corpus: per-dimension mean and std over flattened embeddings."""

    mean: np.ndarray
    std: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def to_record(self) -> dict:
        return {
            "format": STATS_FORMAT,
            "version": STATS_VERSION,
            "dim": self.dim,
            "count": self.count,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "StyleStats":
        if rec.get("format") != STATS_FORMAT:
            raise DataError(f"not a style-stats record (format={rec.get('format')!r})")
        if rec.get("version") != STATS_VERSION:
            raise DataError(f"unsupported style-stats version {rec.get('version')}")
        mean = np.asarray(rec["mean"], dtype=np.float64)
        std = np.asarray(rec["std"], dtype=np.float64)
        if mean.shape != (rec["dim"],) or std.shape != (rec["dim"],):
            raise DataError("style-stats record dimension does not match its vectors")
        return cls(mean, std, int(rec["count"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_record(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "StyleStats":
        return cls.from_record(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class BlockMask:
    grid: np.ndarray
    full: np.ndarray
    tau_m: float
    block_size: int

    @property
    def ones_fraction(self) -> float:
        return float(self.grid.mean())


def extract_style(x) -> StyleEmbedding:
    """Channel-wise spatial mean and population std of a ``(C, H, W)`` image."""
    arr = _array(x).astype(np.float64)
    if arr.ndim != 3 or arr.shape[1] == 0 or arr.shape[2] == 0:
        raise DimensionError(f"extract_style expects a non-empty (C, H, W) image, got shape {arr.shape}")
    return StyleEmbedding(arr.mean(axis=(1, 2)), arr.std(axis=(1, 2)))


def fit_style_stats(corpus: Sequence[StyleEmbedding]) -> StyleStats:
    """Fit the sampling distribution for simulated style embeddings.

    The per-dimension stds are square roots of the singular values of the
    empirical covariance (divisor n-1).  Singular values come out of the SVD
    sorted by magnitude; each one is put back on the native dimension its
    singular vector loads on most (a one-to-one assignment), so a diagonal
    covariance yields exactly its own diagonal.
    """
    if len(corpus) < 2:
        raise InsufficientDataError(f"need at least 2 style embeddings, got {len(corpus)}")
    mat = np.stack([e.flatten() for e in corpus])
    mean = mat.mean(axis=0)
    cov = np.cov(mat, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    u, singular, _ = np.linalg.svd(cov)
    dims, comps = linear_sum_assignment(-np.abs(u))
    native = np.empty_like(singular)
    native[dims] = singular[comps]
    return StyleStats(mean, np.sqrt(np.maximum(native, 0.0)), len(corpus))


def sample_embedding(stats: StyleStats, rng: np.random.Generator) -> StyleEmbedding:
    """Draw one simulated embedding; negative std components are clamped to 0."""
    vec = stats.mean + stats.std * rng.standard_normal(stats.dim)
    return StyleEmbedding.from_vector(vec)


def generate_mask(h: int, w: int, block: int, tau_m: float, rng: np.random.Generator) -> BlockMask:
    """Block mask: a cell is 1 iff its uniform draw strictly exceeds ``tau_m``."""
    if block < 1:
        raise ConfigurationError(f"block size must be ≥ 1, got {block}")
    if not 0.0 <= tau_m <= 1.0:
        raise ConfigurationError(f"mask ratio must lie in [0, 1], got {tau_m}")
    gh, gw = -(-h // block), -(-w // block)
    grid = (rng.random((gh, gw)) > tau_m).astype(np.float64)
    # upscale by exactly B per cell and crop, so a partial last block stays B-aligned
    full = np.repeat(np.repeat(grid, block, axis=0), block, axis=1)[:h, :w]
    return BlockMask(grid, full, float(tau_m), int(block))


def style_transfer(target: StyleEmbedding, source: StyleEmbedding, x) -> np.ndarray:
    """Per channel: ``target.std * (x - source.mean) / max(source.std, 1e-5) + target.mean``."""
    arr = _array(x)
    if arr.ndim != 3 or target.channels != arr.shape[0] or source.channels != arr.shape[0]:
        raise DimensionError(
            f"embeddings with {target.channels}/{source.channels} channels do not match image {arr.shape}")
    scale = target.std / np.maximum(source.std, STD_FLOOR)
    out = (arr - source.mean[:, None, None]) * scale[:, None, None] + target.mean[:, None, None]
    return out.astype(arr.dtype)


def _check_mask(x: np.ndarray, m: BlockMask) -> None:
    if x.shape[-2:] != m.full.shape:
        raise DimensionError(f"image spatial shape {x.shape[-2:]} does not match mask {m.full.shape}")


def compose_styled(x, styled, m: BlockMask) -> np.ndarray:
    """``styled * M + x * (1 - M)`` with the full-resolution mask broadcast over channels."""
    xa, sa = _array(x), _array(styled)
    if xa.shape != sa.shape:
        raise DimensionError(f"original {xa.shape} and styled {sa.shape} images differ in shape")
    _check_mask(xa, m)
    full = m.full.astype(xa.dtype)
    return (sa * full + xa * (1 - full)).astype(xa.dtype)


class VisualPrompt(Module):
    """Image-shaped multiplicative prompt, zero-initialised."""

    def __init__(self, shape: tuple[int, int, int], trainable: bool = True, dtype=T.DEFAULT_DTYPE):
        self.v = Parameter(np.zeros(shape, dtype), trainable=trainable)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.v.shape


def make_masked_image(x, m: BlockMask, v: VisualPrompt | Tensor) -> Tensor:
    """``x * M * v``; differentiable with respect to ``v`` when it is trainable."""
    vt = v.v if isinstance(v, VisualPrompt) else v
    xa = _array(x)
    if xa.shape[-3:] != vt.shape:
        raise DimensionError(f"image {xa.shape} and visual prompt {vt.shape} differ in shape")
    _check_mask(xa, m)
    const = Tensor((xa * m.full).astype(vt.dtype))
    return const * vt


def fit_style_stats_from_dir(root: str | Path) -> StyleStats:
    """Fit statistics from every image file under ``root`` (sorted, recursive)."""
    from .data import list_images, load_image

    files = list_images(root)
    return fit_style_stats([extract_style(load_image(f)) for f in files])
