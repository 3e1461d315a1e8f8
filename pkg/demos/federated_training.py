"""A short federated run on the default benchmark, printing each round's metrics
and the mean loss terms of one client."""
from fedossl.config import ExperimentConfig
from fedossl.federation import run_experiment

cfg = ExperimentConfig().replace(**{"federation.rounds": 10})


def show(rec):
    m = rec.metrics
    loss = rec.losses[0]
    print(f"round {rec.round_index:>2}  all {m.acc_all:.3f}  seen {m.acc_seen:.3f}  LU {m.acc_lu:.3f}  "
          f"GU {m.acc_gu:.3f}  gap {m.lu_gu_gap:+.3f}   client 0: "
          + " ".join(f"{k} {v:.3f}" for k, v in loss.items()) + f"   {rec.duration:.1f}s")


result = run_experiment(cfg, callback=show)
print(f"best round {result.best_index + 1}: all-class {result.best.acc_all:.3f}, "
      f"unseen {result.best.acc_au:.3f}")
