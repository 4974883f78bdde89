"""Run the built-in gradient verification suite and read its report.

The suite cross-checks every hypergradient estimator and every inner rule
against independent oracles: central finite differences through the whole
inner loop, a closed-form quadratic, and algebraic identities that must
hold exactly (truncation with a full window equals the full sweep, a unit
mixing weight reduces the aggregated rule to plain descent, and so on).
Each check is one row with a value, a threshold, and a verdict.

The same suite backs the command line entry point:

    bilevelopt verify --profile all --report report.jsonl

Run from the repo root:

    python3 demos/05_gradcheck_report.py
"""

import collections
import json

from bilevelopt import report_to_jsonl, run_gradcheck_suite

rows = run_gradcheck_suite(profile="all", seed=0)

print(f"{'estimator':<12} {'problem':<16} {'rule':<15} {'metric':<28} {'value':>10} {'ok':>4}")
for r in rows:
    print(
        f"{r.estimator:<12} {r.problem:<16} {r.rule:<15} {r.metric:<28} "
        f"{r.value:>10.2e} {'yes' if r.passed else 'NO':>4}"
    )

print()
by_est = collections.Counter(r.estimator for r in rows)
print("rows per estimator:", dict(sorted(by_est.items())))
n_pass = sum(r.passed for r in rows)
print(f"{n_pass}/{len(rows)} checks passed")

# the JSONL form is what the CLI writes with --report; one object per row
line = report_to_jsonl(rows).splitlines()[0]
print()
print("first report line:", json.dumps(json.loads(line), indent=None))
