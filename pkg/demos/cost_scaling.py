"""Print the analytic and measured cost of one bi-direction attention block
across feature-map sizes, plus the deformable fusion cost per pixel."""

import torch

from irstd.queries import bi_attn_cost, measure_bi_attention, measure_deformable

torch.set_num_threads(1)
print(f"{'h=w':>5} {'formula':>14} {'measured':>14} {'bi/px':>10} {'deform/px':>10}")
for s in (8, 16, 32, 64):
    formula = bi_attn_cost(1, 4, 64, s, s).total_ops
    measured = measure_bi_attention(1, 4, 64, s, s)["measured"]
    deform = measure_deformable([32, 64], [(s, s), (s // 2, s // 2)], 64)["total"]
    print(f"{s:>5} {formula:>14} {measured:>14} {measured / s**2:>10.0f} {deform / s**2:>10.0f}")
