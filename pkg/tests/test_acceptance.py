"""Acceptance criteria 1-9, each at its stated tolerance and runtime limit.

Runs under pytest (one line per criterion in the terminal summary) or
directly with ``python tests/test_acceptance.py``.
"""

import time

import pytest

from zcd import checks
from zcd.config import RunConfig

# (number, title, check names, runtime limit in seconds, limit applies per check)
CRITERIA = [
    (1, "whole-model parameter totals within 2%",
     ["params.retinanet_r50_total", "params.fcos_r50_total",
      "params.retinanet_r101_total", "params.fcos_r101_total"], 1.0, True),
    (2, "ALS - ALS-Light = 2,950,400 exactly", ["params.als_minus_als_light"], None, False),
    (3, "head parameter counts equal across schemes", ["params.head_scheme_equality"], None, False),
    (4, "parameter ordering and reduction signs",
     ["params.fpn_ordering", "params.reduction_signs"], None, False),
    (5, "FLOP parity across head schemes", ["flops.head_parity"], 1.0, False),
    (6, "latency parity in [0.95, 1.05]", ["bench.latency_parity"], 30.0, False),
    (7, "gradient suite below 1e-4", ["gradcheck.suite"], 60.0, False),
    (8, "attention properties",
     ["attention.simplex", "attention.fixed_point", "attention.zero_init_mean",
      "attention.saturation", "attention.descriptor_permutation"], 10.0, False),
    (9, "structural checks",
     ["structure.branch_casework", "structure.top_down", "structure.fpn_width",
      "structure.init_rules"], 10.0, False),
]


def evaluate(number, title, names, limit, per_check, cfg=None):
    cfg = cfg or RunConfig()
    by_name = {c.name: c for c in checks.CHECKS}
    t0 = time.perf_counter()
    results = [by_name[n].run(cfg) for n in names]
    elapsed = time.perf_counter() - t0
    problems = [f"{r.name} failed: {r.measured}" for r in results if not r.passed]
    if limit is not None:
        slow = [r for r in results if r.seconds >= limit] if per_check else (
            [] if elapsed < limit else results)
        problems += [f"{r.name} took {r.seconds:.2f}s (limit {limit}s)" for r in slow]
    status = "PASS" if not problems else "FAIL"
    line = f"criterion {number}: {status}  {title}  ({elapsed:.2f}s)"
    return not problems, line, problems


@pytest.mark.parametrize("number,title,names,limit,per_check", CRITERIA,
                         ids=[f"criterion{c[0]}" for c in CRITERIA])
def test_criterion(number, title, names, limit, per_check):
    from conftest import ACCEPTANCE_LINES

    ok, line, problems = evaluate(number, title, names, limit, per_check)
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, "; ".join(problems)


if __name__ == "__main__":
    import sys

    failed = 0
    for criterion in CRITERIA:
        ok, line, problems = evaluate(*criterion)
        print(line, flush=True)
        for p in problems:
            print(f"    {p}")
        failed += not ok
    sys.exit(1 if failed else 0)
