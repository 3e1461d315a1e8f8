"""How unseen classes are scored: one joint optimal matching of unseen classes
to output labels, with LU and GU accuracies read off that matching."""
import numpy as np

from fedossl.data import ClassTaxonomy
from fedossl.evaluation import greedy_match, hungarian_match, metrics

# classes 0-1 seen, 2 locally unseen, 3 globally unseen
tax = ClassTaxonomy(frozenset({0, 1}), {0: frozenset({2}), 1: frozenset({2})},
                    {0: frozenset({3}), 1: frozenset()})
cm = np.array([
    [48, 2, 0, 0],
    [3, 47, 0, 0],
    [0, 1, 30, 19],
    [0, 0, 25, 25],
])
r = metrics(cm, tax)
print("confusion (rows true class, columns predicted label):")
print(cm)
print(f"matching {r.matching}")
print(f"seen {r.acc_seen:.3f}  LU {r.acc_lu:.3f}  GU {r.acc_gu:.3f}  all unseen {r.acc_au:.3f}  "
      f"gap {r.lu_gu_gap:+.3f}")

sub = np.array([[10, 9], [8, 0]])
print(f"\noptimal vs greedy on {sub.tolist()}: {hungarian_match(sub)[1] * sub.sum():.0f} "
      f"vs {greedy_match(sub)[1] * sub.sum():.0f} matched")

swapped = cm[:, [0, 1, 3, 2]]
r2 = metrics(swapped, tax)
print(f"after swapping the two unseen output labels: LU {r2.acc_lu:.3f}  GU {r2.acc_gu:.3f}")
