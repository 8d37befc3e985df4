"""
Scoring masks and ranking methods
=================================

Two synthetic iris masks are compared with every segmentation and
localization measure, then a small leaderboard is turned into rank sums.
"""

import numpy as np

from mobile_iris.metrics import (
    ScoreCell,
    boundary_hausdorff,
    boundary_points,
    check_published_sums,
    dice,
    e1,
    e2_batch,
    fp_fn_rates,
    hausdorff,
    rank_sum,
)
from mobile_iris.synthetic import disk

# a ground-truth disk and a prediction shifted by three pixels
gt = disk(100, 100, (50, 50), 20)
pred = disk(100, 100, (50, 53), 20)

print("E1          ", round(e1(pred, gt), 4))
print("fp/fn rates ", tuple(round(v, 4) for v in fp_fn_rates(pred, gt)))
print("E2          ", round(e2_batch([(pred, gt)]), 4))
print("dice        ", round(dice(pred, gt), 4))

# Hausdorff works on boundary pixels; the normalized form divides by the diagonal
print("hausdorff   ", hausdorff(boundary_points(pred), boundary_points(gt)))
print("normalized  ", round(boundary_hausdorff(pred, gt), 4))

# rank sums: lower error ranks first, higher dice ranks first
scores = {"alpha": (0.010, 0.91), "beta": (0.014, 0.93), "gamma": (0.020, 0.88)}
cells = []
for method, (err, dsc) in scores.items():
    cells.append(ScoreCell(method, "E1", "set-a", err, "lower"))
    cells.append(ScoreCell(method, "mDice", "set-a", dsc, "higher"))
table = rank_sum(cells)
print()
print(table.to_csv())

# a claimed total that disagrees with the component ranks is reported, not fixed
for d in check_published_sums(table, {"beta": {"total": 2}}):
    print(f"{d.method}: computed {d.computed:g}, claimed {d.published:g}")

# pixel counts behind E1, for reference
print("disagreeing pixels:", int(np.count_nonzero(pred ^ gt)))
