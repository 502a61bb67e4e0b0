"""Multi-task training with a per-sample style gate.

One iteration: draw the block mask and build the masked image, draw the gate,
build the styled image when the gate fires, run the segmentation flow on the
original or styled image, reconstruct the masked (and styled) images with
the extractor and injectors switched off, sum the losses, and take one AdamW
step over the trainable parameters.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SegSample
from .errors import ConfigurationError, TrainingError
from .losses import IGNORE_INDEX, LossReport, compose_total, delta_loss, gated_total, mim_loss, seg_loss
from .model import BackboneConfig, ModelBundle, ModelConfig
from .nn import AdamW
from .style import (StyleStats, compose_styled, extract_style, generate_mask, make_masked_image,
                    sample_embedding, style_transfer)

log = logging.getLogger(__name__)

REFERENCE_SIDE = 512
MIN_BLOCK = 4


def scaled_block(block: int, side: int, reference: int = REFERENCE_SIDE) -> int:
    """Block size scaled proportionally from a reference image side, at least 4 px."""
    return max(MIN_BLOCK, int(round(block * side / reference)))


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 1
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    style: bool = True
    p: float = 0.1
    styled_tau: float = 0.1
    styled_block: int | None = None  # None: 64 px at 512 scaled to the image side
    masked_tau: float = 0.7
    masked_block: int | None = None
    mim_norm: str = "l1"
    delta_norm: str = "l1"
    mim_masked_only: bool = False
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0
    debug_check_every: int = 0
    history: int = 1000
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.betas = tuple(self.betas)
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"gate probability must lie in [0, 1], got {self.p}")
        for name in ("styled_tau", "masked_tau"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be ≥ 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be ≥ 1")
        for name in ("mim_norm", "delta_norm"):
            if getattr(self, name) not in ("l1", "l2"):
                raise ConfigurationError(f"{name} must be 'l1' or 'l2'")

    @property
    def use_mim(self) -> bool:
        return self.model.mim_decoder != "none"

    def blocks(self) -> tuple[int, int]:
        side = min(self.model.backbone.image_size)
        sb = self.styled_block if self.styled_block is not None else scaled_block(64, side)
        mb = self.masked_block if self.masked_block is not None else scaled_block(64, side)
        return sb, mb

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        model = dict(d.pop("model", {}) or {})
        mknown = {f.name for f in fields(ModelConfig)}
        if set(model) - mknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(set(model) - mknown)}")
        bb = model.pop("backbone", {}) or {}
        bknown = {f.name for f in fields(BackboneConfig)}
        if set(bb) - bknown:
            raise ConfigurationError(f"unknown backbone config keys: {sorted(set(bb) - bknown)}")
        return cls(model=ModelConfig(backbone=BackboneConfig(**bb), **model), **d)

    def replace(self, **overrides) -> "TrainConfig":
        d = self.to_dict()
        for key, value in overrides.items():
            target = d
            *path, last = key.split(".")
            for part in path:
                target = target[part]
            target[last] = value
        return TrainConfig.from_dict(d)


def load_config(path: str | Path) -> dict:
    """Read a YAML config file (training keys at top level, optional ``data`` section)."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: config must be a mapping")
    return raw


# Table-style ablation rows expressed as config overrides.
ABLATION_ROWS: dict[str, dict] = {
    "R1": {"model.use_gse": False, "model.mim_decoder": "none", "style": False},
    "R2": {"model.use_gse": True, "model.mim_decoder": "none", "style": False},
    "R3": {"model.use_gse": False, "model.mim_decoder": "aspp", "style": False},
    "R4": {"model.use_gse": False, "model.mim_decoder": "none", "style": True, "p": 0.1},
    "R5": {"model.use_gse": True, "model.mim_decoder": "aspp", "style": False},
    "R6": {"model.use_gse": True, "model.mim_decoder": "none", "style": True, "p": 0.1},
    "R7": {"model.use_gse": False, "model.mim_decoder": "aspp", "style": True, "p": 0.1},
    "R8": {"model.use_gse": True, "model.mim_decoder": "aspp", "style": True, "p": 0.1},
}
_R8 = ABLATION_ROWS["R8"]
ABLATION_ROWS.update({
    "R9": {**_R8, "model.injector": "ffn"},
    "R10": {**_R8, "model.mim_decoder": "linear"},
    "R11": {**_R8, "p": 0.3},
    "R12": {**_R8, "p": 0.5},
    "R13": {**_R8, "p": 0.7},
    "R14": {**_R8, "p": 0.9},
    "R15": {**_R8, "mim_norm": "l2"},
    "R16": {**_R8, "delta_norm": "l2"},
})


def ablation_config(base: TrainConfig, row: str) -> TrainConfig:
    if row not in ABLATION_ROWS:
        raise ConfigurationError(f"unknown ablation row {row!r}")
    return base.replace(**ABLATION_ROWS[row])


@dataclass
class TrainState:
    config: TrainConfig
    model: ModelBundle
    optimizer: AdamW
    rng: np.random.Generator  # augmentation stream: masks, gate, style samples
    data_rng: np.random.Generator  # sample order
    iteration: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=1000))
    styled_count: int = 0


def init_state(config: TrainConfig) -> TrainState:
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    model = ModelBundle(config.model, seed=int(seeds[0].generate_state(1)[0]))
    opt = AdamW(model.named_parameters(), lr=config.lr, betas=config.betas, weight_decay=config.weight_decay)
    return TrainState(config, model, opt, np.random.default_rng(seeds[1]), np.random.default_rng(seeds[2]),
                      history=deque(maxlen=config.history))


def _check_sample(state: TrainState, sample: SegSample, stats: StyleStats | None) -> None:
    bc = state.config.model.backbone
    if sample.image.shape != (bc.in_channels, *bc.image_size):
        raise ConfigurationError(f"sample image {sample.image.shape} does not match model input "
                                 f"{(bc.in_channels, *bc.image_size)}")
    if state.config.style and state.config.p > 0:
        if stats is None:
            raise ConfigurationError("style injection is enabled but no style statistics were given")
        if stats.dim != 2 * bc.in_channels:
            raise ConfigurationError(f"style statistics have dimension {stats.dim}, expected {2 * bc.in_channels}")


def train_step(state: TrainState, samples: SegSample | Sequence[SegSample], stats: StyleStats | None) -> LossReport:
    """One optimisation step on a batch (gate drawn independently per sample)."""
    if isinstance(samples, SegSample):
        samples = [samples]
    cfg = state.config
    model = state.model
    rng = state.rng
    dtype = np.dtype(cfg.model.dtype)
    h, w = cfg.model.backbone.image_size
    styled_block, masked_block = cfg.blocks()
    use_mim = cfg.use_mim
    if state.iteration == 0:
        for s in samples:
            _check_sample(state, s, stats)

    seg_inputs, masked, masks, styled, gates = [], [], [], [], []
    for s in samples:
        x = s.image.astype(dtype)
        if use_mim:
            m = generate_mask(h, w, masked_block, cfg.masked_tau, rng)
            masks.append(m)
            masked.append(make_masked_image(x, m, model.prompt))
        u = int(cfg.style and rng.random() < cfg.p)
        gates.append(u)
        if u:
            ms = generate_mask(h, w, styled_block, cfg.styled_tau, rng)
            target = sample_embedding(stats, rng)
            x_s = compose_styled(x, style_transfer(target, extract_style(x), x), ms).astype(dtype)
            styled.append(x_s)
            seg_inputs.append(x_s)
        else:
            seg_inputs.append(x)
    labels = np.stack([s.label for s in samples])
    images = np.stack([s.image.astype(dtype) for s in samples])

    logits = model.seg_forward(np.stack(seg_inputs))
    l_seg = seg_loss(logits, labels, IGNORE_INDEX)

    any_styled = int(any(gates))
    l_mim = 0.0
    l_delta = 0.0
    if use_mim:
        xm = T.stack(masked, axis=0) if len(masked) > 1 else masked[0].reshape(1, *masked[0].shape)
        weight = None
        if cfg.mim_masked_only:
            weight = np.stack([1.0 - m.full for m in masks])[:, None]
        if any_styled:
            xs = np.stack(styled)
            rec_m, rec_s = model.mim_forward(xm, xs)
            l_mim = mim_loss(rec_m, images, rec_s, xs, cfg.mim_norm, weight)
            idx = [i for i, u in enumerate(gates) if u]
            rec_m_styled = rec_m if len(idx) == len(gates) else rec_m[idx]
            l_delta = delta_loss(rec_m_styled, rec_s, cfg.delta_norm)
        else:
            (rec_m,) = model.mim_forward(xm)
            l_mim = mim_loss(rec_m, images, norm=cfg.mim_norm, weight=weight)

    report = compose_total(any_styled, l_seg, l_mim, l_delta)
    if not all(math.isfinite(v) for v in (report.l_seg, report.l_mim, report.l_delta, report.total)):
        raise TrainingError(f"non-finite loss at iteration {state.iteration}: l_seg={report.l_seg} "
                            f"l_mim={report.l_mim} l_delta={report.l_delta}")
    total = gated_total(any_styled, l_seg, l_mim, l_delta)
    total.backward()
    state.optimizer.step()
    state.optimizer.zero_grad()
    state.iteration += 1
    state.styled_count += sum(gates)
    state.history.append(report)
    return report


def snapshot(model: ModelBundle) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.named_parameters()}


def changed_parameters(before: dict[str, np.ndarray], model: ModelBundle) -> set[str]:
    return {n for n, p in model.named_parameters() if not np.array_equal(before[n], p.data)}


def check_trainable_invariant(before: dict[str, np.ndarray], model: ModelBundle) -> None:
    """Raise if any parameter outside the trainable set changed."""
    stray = changed_parameters(before, model) - model.trainable_names()
    if stray:
        raise TrainingError(f"non-trainable parameters changed: {sorted(stray)[:5]}")


def run_training(config: TrainConfig, dataset: Sequence[SegSample], stats: StyleStats | None,
                 state: TrainState | None = None, log_path: str | Path | None = None,
                 checkpoint_dir: str | Path | None = None,
                 callback: Callable[[TrainState, LossReport], None] | None = None) -> tuple[TrainState, list[dict]]:
    """Run (or resume) the training loop up to ``config.iterations``.

    Returns the final state and the list of logged records.  With
    ``log_path`` the records are also appended to a line-delimited JSON file;
    with ``checkpoint_dir`` checkpoints are written every
    ``checkpoint_every`` iterations and at the end.
    """
    if not dataset:
        raise ConfigurationError("training dataset is empty")
    state = state or init_state(config)
    if state.iteration == 0:
        for s in dataset[:1]:
            _check_sample(state, s, stats)
    records: list[dict] = []
    log_fh = open(log_path, "a") if log_path else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    before = snapshot(state.model) if config.debug_check_every else None
    try:
        while state.iteration < config.iterations:
            idx = state.data_rng.integers(len(dataset), size=config.batch_size)
            report = train_step(state, [dataset[i] for i in idx], stats)
            it = state.iteration
            if config.log_every and it % config.log_every == 0:
                rec = report.as_record(it)
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
            if before is not None and it % config.debug_check_every == 0:
                check_trainable_invariant(before, state.model)
                before = snapshot(state.model)
            if ckpt_dir and config.checkpoint_every and it % config.checkpoint_every == 0:
                save_state(state, ckpt_dir / f"ckpt_{it:06d}.bin")
            if callback:
                callback(state, report)
    finally:
        if log_fh:
            log_fh.close()
    if ckpt_dir:
        save_state(state, ckpt_dir / "last.bin")
    return state, records


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_state(state: TrainState, path: str | Path) -> None:
    arrays = {f"param/{n}": p.data for n, p in state.model.named_parameters()}
    opt = state.optimizer.state_dict()
    for n in sorted(opt["m"]):
        arrays[f"adam_m/{n}"] = opt["m"][n]
        arrays[f"adam_v/{n}"] = opt["v"][n]
    meta = {
        "iteration": state.iteration,
        "styled_count": state.styled_count,
        "adam_t": opt["t"],
        "adam_steps": opt["steps"],
        "rng": state.rng.bit_generator.state,
        "data_rng": state.data_rng.bit_generator.state,
        "history": [r.as_record() for r in state.history],
    }
    save_checkpoint(path, config=state.config.to_dict(), arrays=arrays, meta=meta)


def load_state(path: str | Path) -> TrainState:
    cfg_dict, arrays, meta = load_checkpoint(path)
    config = TrainConfig.from_dict(cfg_dict)
    state = init_state(config)
    state.model.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    state.optimizer.load_state_dict({
        "t": meta["adam_t"], "steps": meta["adam_steps"],
        "m": {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")},
        "v": {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")},
    })
    state.rng.bit_generator.state = meta["rng"]
    state.data_rng.bit_generator.state = meta["data_rng"]
    state.iteration = int(meta["iteration"])
    state.styled_count = int(meta["styled_count"])
    state.history.extend(LossReport(**r) for r in meta["history"])
    return state
