"""Equal-size clustering versus plain k-means on an imbalanced sample.

The transport-based clustering forces every cluster to hold n/L points, which
is what makes each uploaded centroid an average over n/L examples.
"""
import numpy as np

from fedossl.clustering import anonymity_parameter, balanced_cluster, kmeans_cluster, sinkhorn_plan

rng = np.random.default_rng(0)
big = rng.normal(size=(90, 2)) * 0.6 + [4.0, 0.0]
small = rng.normal(size=(30, 2)) * 0.6 - [4.0, 0.0]
x = np.concatenate([big, small])
L = 4

for name, res in (("equal-size", balanced_cluster(x, L)), ("k-means", kmeans_cluster(x, L))):
    sizes = np.bincount(res.assignments, minlength=L)
    print(f"{name:>10}: cluster sizes {sizes.tolist()}")
    for c in res.centroids.centroids:
        print(f"            centroid ({c[0]:+.2f}, {c[1]:+.2f})")

print(f"\neach equal-size centroid averages n/L = {anonymity_parameter(len(x), L):g} points")

cost = rng.uniform(0, 20, size=(6, 3))
for eps in (10.0, 1.0, 0.05):
    tp = sinkhorn_plan(cost, eps, max_iters=5000)
    print(f"eps {eps:>5}: {tp.iterations_used:>4} iterations, converged {tp.converged}, "
          f"plan row 0 = {np.round(tp.plan[0] * 6, 3).tolist()}")
