"""
Component ablation across the synthetic domain gap
==================================================

Baseline vs each component vs the full pipeline, trained on domain A and
scored on domain B over three seeds. The default 2000 iterations take about
ten minutes on a laptop CPU; pass a smaller count to skim.
"""

import sys

from dgseg.experiment import DG_ROWS, DGSetup, run_dg, summarize
from dgseg.metrics import ablation_report

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 2000

# R1 baseline, R2 GSE only, R3 MIM only, R4 style only, R8 everything
scores = run_dg(DG_ROWS, seeds=(0, 1, 2), setup=DGSetup(iterations=iterations), verbose=True)
med = summarize(scores)

report = ablation_report({r: {"B": med[r]} for r in DG_ROWS}, "R1")
print(report.table())

# the reconstruction branch only touches the frozen backbone and its own decoder,
# so R3 reproduces the baseline's segmentation weights exactly
print("R3 == R1:", scores["R3"] == scores["R1"])
