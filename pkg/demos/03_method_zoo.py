"""Run all ten built-in meta-learning methods on the same episode stream.

Every method is the same three choices wearing a different name: what the
meta-parameters are (a shared feature map or a shared initialization), how
the per-task inner loop updates its parameters, and how the meta-gradient
is estimated. This script prints the composition table and then trains
each method briefly on synthetic 3-way 2-shot episodes so you can see that
all ten actually run and learn under one harness.

Feature-map methods get a linear-feature softmax head; initialization
methods get a small MLP. Everything else is held fixed.

Run from the repo root:

    python3 demos/03_method_zoo.py
"""

import time

from bilevelopt import (
    METHOD_NAMES,
    ExperimentConfig,
    build_experiment,
    compose_named_method,
    meta_evaluate,
    meta_train,
)
from bilevelopt.objectives import Paradigm

print(f"{'method':<10} {'meta-params':<12} {'inner rule':<15} {'estimator':<18}")
for name in METHOD_NAMES:
    m = compose_named_method(name)
    kind = "feature map" if m.paradigm is Paradigm.META_FEATURE else "init"
    est = type(m.hypergrad_method).__name__
    print(f"{name:<10} {kind:<12} {m.inner_rule.value:<15} {est:<18}")
print()


def config_for(name):
    m = compose_named_method(name)
    raw = {
        "data": {
            "num_classes": 12,
            "dim": 6,
            "cluster_spread": 3.0,
            "noise_sd": 1.2,
            "way": 5,
            "shot": 1,
            "query": 6,
            "batch_size": 2,
        },
        "inner": {"steps": 4, "step_size": 0.05},
        "meta_opt": {"kind": "momentum", "lr": 0.02},
        "run": {
            "method": name,
            "meta_iterations": 100,
            "eval_every": 100,
            "eval_tasks": 40,
            "seed": 5,
        },
    }
    if m.paradigm is Paradigm.META_FEATURE:
        raw["problem"] = {"kind": "feature_softmax", "dim_feat": 10, "reg": "l2", "reg_coef": 0.1}
    else:
        raw["problem"] = {"kind": "mlp", "hidden": 8, "reg": "l2", "reg_coef": 0.05}
    return ExperimentConfig.from_dict(raw)


print(f"{'method':<10} {'acc before':>10} {'acc after':>10} {'lift':>7} {'secs':>6}")
for name in METHOD_NAMES:
    exp, state = build_experiment(config_for(name))
    _, acc0 = meta_evaluate(exp, state, 40, round_index=0)
    t0 = time.perf_counter()
    state, _ = meta_train(exp, state)
    dt = time.perf_counter() - t0
    _, acc1 = meta_evaluate(exp, state, 40, round_index=0)
    print(f"{name:<10} {acc0:>10.3f} {acc1:>10.3f} {acc1 - acc0:>+7.3f} {dt:>6.1f}")

print()
print("a hundred noisy 5-way 1-shot meta-iterations is a smoke test, not a")
print("benchmark; the point is that every composition trains under the same")
print("data stream and seeds. clusters overlap heavily at this noise level,")
print("so feature-map methods move less than the initialization methods,")
print("which start from a random net and have much more room to gain.")
