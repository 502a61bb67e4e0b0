"""Desk-scale domain-generalisation runs on the synthetic two-domain data."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import synth_style_corpus, synth_two_domain
from .metrics import evaluate
from .style import StyleStats, extract_style, fit_style_stats
from .training import TrainConfig, ablation_config, run_training

DG_ROWS = ("R1", "R2", "R3", "R4", "R8")


@dataclass
class DGSetup:
    n_train: int = 64
    n_test: int = 64
    n_style: int = 256
    size: int = 32
    classes: int = 3
    iterations: int = 2000


def style_stats_for(seed: int, setup: DGSetup) -> StyleStats:
    corpus = synth_style_corpus(10_000 + seed, setup.n_style, setup.size, setup.classes)
    return fit_style_stats([extract_style(x) for x in corpus])


def run_dg(rows=DG_ROWS, seeds=(0, 1, 2), setup: DGSetup | None = None, base: TrainConfig | None = None,
           verbose: bool = False) -> dict[str, list[float]]:
    """Train each ablation row on domain A and return cross-domain mIoU (percent) on B per seed."""
    setup = setup or DGSetup()
    base = base or TrainConfig(iterations=setup.iterations)
    out: dict[str, list[float]] = {r: [] for r in rows}
    for seed in seeds:
        train_a, _ = synth_two_domain(seed, setup.n_train, setup.size, setup.classes)
        _, test_b = synth_two_domain(5_000 + seed, setup.n_test, setup.size, setup.classes)
        stats = style_stats_for(seed, setup)
        for row in rows:
            cfg = ablation_config(base, row).replace(seed=seed)
            t0 = time.time()
            state, _ = run_training(cfg, train_a, stats)
            score = 100 * evaluate(state, test_b).miou
            out[row].append(score)
            if verbose:
                print(f"seed {seed} {row}: {score:.2f} ({time.time() - t0:.0f}s)", flush=True)
    return out


def summarize(scores: dict[str, list[float]]) -> dict[str, float]:
    return {r: float(np.median(v)) for r, v in scores.items()}
