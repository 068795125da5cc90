"""Parameter, FLOP, gradient and latency reports.

FLOP convention: every entry is counted in multiply-accumulates (MACs) and
``flops = 2 * macs``. Convs count ``k*k*inC*outC*H'*W'``, linear maps
``in*out``, bilinear resizes 4 per output element (0 for a same-size copy),
pools, adds, norms and scalar multiplies one per element, and branch fusion
one per branch element. ReLU and softmax are not counted.
"""

from __future__ import annotations

import gc
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .safpn import FuseNode
from .tensor import (
    AddNode,
    Conv2dNode,
    GroupNormNode,
    LinearNode,
    PoolNode,
    ResizeNode,
    SumNode,
    Tape,
)

MIN_ROUNDS = 10
WARMUP_ROUNDS = 3


def millions(n: int) -> float:
    return round(n / 1e6, 1)


@dataclass
class ParamReport:
    by_component: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.by_component.values())

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "total_m": millions(self.total),
            "by_component": dict(self.by_component),
            "by_component_m": {k: millions(v) for k, v in self.by_component.items()},
        }


def count_params(model) -> ParamReport:
    """Symbolic count from layer shapes; faithful trunks use the analytic ResNet model."""
    return ParamReport(model.component_param_counts())


def brute_force_param_count(model) -> int:
    """Independent walk: sum of sizes of every materialized parameter array."""
    return sum(int(a.size) for _, a in model.named_params())


@dataclass
class FlopReport:
    layers: list[tuple[str, str, int]]
    input_shape: tuple[int, int, int, int]

    @property
    def total_macs(self) -> int:
        return sum(m for _, _, m in self.layers)

    @property
    def total(self) -> int:
        return 2 * self.total_macs

    def by_kind(self) -> dict[str, int]:
        out: Counter = Counter()
        for _, kind, macs in self.layers:
            out[kind] += macs
        return dict(out)

    def multiset(self) -> Counter:
        """Per-(kind, MACs) multiplicities, independent of layer naming and order."""
        return Counter((kind, macs) for _, kind, macs in self.layers)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "total": self.total,
            "total_macs": self.total_macs,
            "by_kind_macs": self.by_kind(),
            "layers": [{"name": n, "kind": k, "macs": m} for n, k, m in self.layers],
        }


def count_flops(model, input_shape) -> FlopReport:
    """Symbolic FLOP count for ``input_shape = (B, 3, H, W)``; no tensors are built."""
    b, _, h, w = input_shape
    layers = [(name, kind, int(macs)) for name, kind, macs, _ in model.flop_layers(b, h, w)]
    return FlopReport(layers, tuple(input_shape))


def tape_macs(tape: Tape) -> Counter:
    """MAC counts read off an executed tape, by kind; an oracle for :func:`count_flops`."""
    out: Counter = Counter()
    for node, inputs, output, _ in tape.entries:
        y = tape[output]
        if isinstance(node, Conv2dNode):
            w = node.params.weight
            out["conv"] += w.shape[1] * w.shape[2] * w.shape[3] * y.size
        elif isinstance(node, LinearNode):
            out["linear"] += node.params.weight.shape[1] * y.size
        elif isinstance(node, ResizeNode):
            if tape[inputs[0]].shape != y.shape:
                out["resize"] += 4 * y.size
        elif isinstance(node, PoolNode):
            out["pool"] += tape[inputs[0]].size
        elif isinstance(node, SumNode):
            out["add"] += (len(inputs) - 1) * y.size
        elif isinstance(node, AddNode):
            out["add"] += y.size
        elif isinstance(node, FuseNode):
            out["fuse"] += (len(inputs) - 1) * y.size
        elif isinstance(node, GroupNormNode):
            out["norm"] += y.size
        elif node.op == "scale":
            out["scale"] += y.size
    return out


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def relative_error(analytic, numeric) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-8)


@dataclass
class GradCheckReport:
    name: str
    eps: float
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    failure: str | None = None

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.worst < self.tol

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(worst=self.worst, passed=self.passed)
        return d


# run() -> (outputs by name, backward(upstream by name) -> grads by variable name)
GraphFn = Callable[[], tuple[dict[str, np.ndarray], Callable[[dict], dict]]]


def grad_check(run: GraphFn, variables: dict[str, np.ndarray], *, name: str = "graph",
               eps: float = 1e-5, tol: float = 1e-4, max_per_group: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Central differences on ``<R, f(x)>`` for a fixed random projection ``R``.

    ``variables`` are mutated in place while probing and restored afterwards.
    Groups larger than ``max_per_group`` are checked on a seeded random
    subset of their elements.
    """
    report = GradCheckReport(name, eps, tol)
    gen = np.random.default_rng(seed)
    outputs, backward = run()
    for key, out in outputs.items():
        if not np.all(np.isfinite(out)):
            report.failure = f"non-finite forward output {key!r}"
            return report
    proj = {k: gen.standard_normal(v.shape) for k, v in outputs.items()}

    def loss() -> float:
        outs, _ = run()
        return float(sum(np.sum(proj[k] * outs[k]) for k in proj))

    grads = backward(proj)
    for var, arr in variables.items():
        if var not in grads:
            report.failure = f"no analytic gradient for {var!r}"
            return report
        g = np.asarray(grads[var])
        if g.shape != arr.shape:
            report.failure = f"gradient for {var!r} has shape {g.shape}, variable {arr.shape}"
            return report
        if not np.all(np.isfinite(g)):
            report.failure = f"non-finite analytic gradient in {var!r}"
            return report
        idx = np.arange(arr.size)
        if max_per_group is not None and arr.size > max_per_group:
            idx = gen.choice(arr.size, max_per_group, replace=False)
        flat = arr.reshape(-1)
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            down = loss()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                report.failure = f"non-finite loss probing {var}[{np.unravel_index(i, arr.shape)}]"
                return report
            numeric[n] = (up - down) / (2 * eps)
        err = relative_error(g.reshape(-1)[idx], numeric)
        report.max_rel_err[var] = float(err.max()) if err.size else 0.0
        report.checked[var] = len(idx)
    return report


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------


@dataclass
class BenchReport:
    rounds: int
    warmup: int
    times_ns: dict[str, list[int]]
    reference: str

    def median_ns(self, name: str) -> float:
        return float(statistics.median(self.times_ns[name]))

    def mean_ns(self, name: str) -> float:
        return float(statistics.fmean(self.times_ns[name]))

    def ratio(self, name: str) -> float:
        """Median over rounds of ``t_name / t_reference`` timed in the same round.

        Pairing within a round cancels the slow drift of a shared CPU, which
        a ratio of two independent medians does not.
        """
        ref = self.times_ns[self.reference]
        return float(statistics.median(t / r for t, r in zip(self.times_ns[name], ref)))

    def ratio_of_medians(self, name: str) -> float:
        return self.median_ns(name) / self.median_ns(self.reference)

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "warmup": self.warmup,
            "reference": self.reference,
            "median_ns": {k: self.median_ns(k) for k in self.times_ns},
            "mean_ns": {k: self.mean_ns(k) for k in self.times_ns},
            "ratio": {k: self.ratio(k) for k in self.times_ns},
            "ratio_of_medians": {k: self.ratio_of_medians(k) for k in self.times_ns},
            "times_ns": self.times_ns,
        }


def bench(models: dict[str, Callable], inputs, reference: str, rounds: int = MIN_ROUNDS,
          warmup: int = WARMUP_ROUNDS, budget_s: float | None = None) -> BenchReport:
    """Median wall time per model, rounds interleaved across models on one thread.

    ``models`` maps names to callables taking ``inputs``; ratios are against
    ``models[reference]``. With ``budget_s``, rounds beyond ``rounds`` keep
    running while the next one is expected to finish inside the budget
    (counted from the first warmup call).
    """
    if rounds < MIN_ROUNDS:
        raise ValueError(f"bench needs at least {MIN_ROUNDS} rounds, got {rounds}")
    if reference not in models:
        raise ValueError(f"reference {reference!r} is not among {list(models)}")
    from threadpoolctl import threadpool_limits

    times: dict[str, list[int]] = {k: [] for k in models}
    start = time.perf_counter_ns()
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            for fn in models.values():
                fn(inputs)
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            r = 0
            while r < rounds or (budget_s is not None and _fits(times, start, budget_s)):
                # rotate start position so no model always runs first
                names = list(models)
                names = names[r % len(names):] + names[: r % len(names)]
                for name in names:
                    t0 = time.perf_counter_ns()
                    models[name](inputs)
                    times[name].append(time.perf_counter_ns() - t0)
                r += 1
        finally:
            if gc_was_enabled:
                gc.enable()
    return BenchReport(r, warmup, times, reference)


def _fits(times: dict[str, list[int]], start_ns: int, budget_s: float) -> bool:
    worst_round = sum(max(ts) for ts in times.values())
    return time.perf_counter_ns() - start_ns + worst_round < budget_s * 1e9


def bench_pair(model_a: Callable, model_b: Callable, inputs, rounds: int = MIN_ROUNDS) -> BenchReport:
    """Two-model form; ``ratio("a")`` is the median latency of ``a`` over ``b``."""
    return bench({"a": model_a, "b": model_b}, inputs, "b", rounds)
