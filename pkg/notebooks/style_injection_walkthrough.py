"""
Style injection on a single image
=================================

Walk through one augmentation draw: fit style statistics, sample a style,
transfer it onto an image, and paste it back through a block mask.
"""

import numpy as np

from dgseg.data import synth_style_corpus, synth_two_domain
from dgseg.style import (compose_styled, extract_style, fit_style_stats, generate_mask, sample_embedding,
                         style_transfer)

rng = np.random.default_rng(0)

# a source-domain image and a small unlabeled style corpus
(sample,), _ = synth_two_domain(0, 1)
x = sample.image
corpus = [extract_style(im) for im in synth_style_corpus(1, 256)]
stats = fit_style_stats(corpus)
print("style vector dim:", stats.dim)
print("mean  :", np.round(stats.mean, 3))
print("spread:", np.round(stats.std, 3))

# one simulated style, transferred onto the whole image
target = sample_embedding(stats, rng)
styled = style_transfer(target, extract_style(x), x)
print("channel means before:", np.round(x.mean(axis=(1, 2)), 3))
print("channel means after :", np.round(styled.mean(axis=(1, 2)), 3))
print("target means        :", np.round(target.mean, 3))

# a block mask decides which cells keep the original content (1) vs take the style (0)
m = generate_mask(32, 32, 4, 0.1, rng)
print("mask grid", m.grid.shape, "ones fraction", m.ones_fraction)
mixed = compose_styled(x, styled, m)
kept = np.all(mixed == x, axis=0)
print("pixels left untouched:", kept.mean())

# the ones fraction tracks 1 - tau over many draws
for tau in (0.1, 0.5, 0.9):
    frac = np.mean([generate_mask(32, 32, 4, tau, rng).ones_fraction for _ in range(2000)])
    print(f"tau={tau}: mean ones fraction {frac:.3f}")
