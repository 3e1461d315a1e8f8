"""Build the default synthetic benchmark and show who holds which classes.

Seen classes are labeled everywhere. A locally unseen (LU) class sits in the
unlabeled pool of several clients; a globally unseen (GU) class in exactly one.
"""
import numpy as np

from fedossl.config import ExperimentConfig
from fedossl.federation import build_setup

cfg = ExperimentConfig()
setup = build_setup(cfg)
tax = setup.taxonomy

print(f"seen classes: {sorted(tax.seen)}")
print(f"LU classes:   {sorted(tax.lu_classes)}")
print(f"GU classes:   {sorted(tax.gu_classes)}")
print()
print(f"{'client':>6} {'labeled':>8} {'unlabeled':>10}  LU   GU   unlabeled class counts")
for shard in setup.shards:
    truth = shard.unlabeled_ground_truth()
    counts = dict(zip(*np.unique(truth, return_counts=True)))
    lu = sorted(tax.locally_unseen[shard.client_id])
    gu = sorted(tax.globally_unseen[shard.client_id])
    print(f"{shard.client_id:>6} {shard.labeled_y.size:>8} {truth.size:>10}  {lu!s:<4} {gu!s:<4} "
          + " ".join(f"{int(c)}:{int(n)}" for c, n in counts.items()))
print()
print(f"test set: {len(setup.test)} examples over {len(setup.test.classes)} classes")
view = setup.shards[0].training_view()
print(f"a client's training view exposes only: {sorted(vars(view))}")
