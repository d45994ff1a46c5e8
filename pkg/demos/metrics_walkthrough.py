"""Score a toy prediction: one hit with a slight offset, one missed target, one false alarm."""

import numpy as np

from irstd.metrics import evaluate, render_report

gt = np.zeros((64, 64), bool)
gt[10:13, 10:13] = True    # detected
gt[40:42, 50:52] = True    # missed
pred = np.zeros_like(gt)
pred[10:13, 11:14] = True  # centroid 1 px away: matched
pred[55:57, 5:7] = True    # nowhere near a target: false alarm

report = evaluate([pred], [gt])
print(render_report(report, "toy")["text"])
print(f"targets={report.n_all_targets} detected={report.n_pred_correct} false_pixels={report.p_false}")
