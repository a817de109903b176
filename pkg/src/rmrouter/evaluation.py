"""Binary accuracy, multi-seed aggregation, timing harnesses and report tables."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import make_rng
from .data import RewardExample, split_by_domain
from .encoder import Vocab, build_vocab
from .pipeline import MethodSettings, TrainingTimes, train_method

TIE_MODES = ("strict", "half")


class CellError(RuntimeError):
    """One (method, seed) cell of an experiment grid failed."""

    def __init__(self, method: str, seed: int, cause: BaseException):
        super().__init__(f"cell method={method} seed={seed} failed: {type(cause).__name__}: {cause}")
        self.method = method
        self.seed = seed


# ---------------------------------------------------------------------------
# accuracy
# ---------------------------------------------------------------------------


def accuracy_from_scores(chosen, rejected, tie_mode: str = "strict", eps: float = 0.0) -> float:
    """Fraction of pairs whose chosen score strictly exceeds the rejected one.

    In ``"half"`` mode a pair with ``|chosen - rejected| < eps`` counts 0.5.

    Raises:
        ValueError: on empty or misaligned inputs, or an unknown tie mode.
    """
    c = np.asarray(chosen, dtype=np.float64)
    r = np.asarray(rejected, dtype=np.float64)
    if c.shape != r.shape or c.ndim != 1:
        raise ValueError(f"score arrays must be aligned 1-D, got {c.shape} and {r.shape}")
    if c.size == 0:
        raise ValueError("accuracy of an empty example set is undefined")
    if tie_mode not in TIE_MODES:
        raise ValueError(f"unknown tie mode {tie_mode!r}")
    delta = c - r
    if tie_mode == "strict":
        return float(np.count_nonzero(delta > 0)) / c.size
    tied = np.abs(delta) < eps
    wins = np.count_nonzero((delta > 0) & ~tied)
    return (wins + 0.5 * np.count_nonzero(tied)) / c.size


@dataclass
class AccuracyResult:
    per_domain: dict[str, float]
    counts: dict[str, int]
    overall: float

    @property
    def macro(self) -> float:
        return float(np.mean(list(self.per_domain.values())))

    @property
    def weighted(self) -> float:
        total = sum(self.counts.values())
        return sum(self.per_domain[d] * self.counts[d] for d in self.per_domain) / total


ScoreFn = Callable[[Sequence[str], Sequence[str]], np.ndarray]


def binary_accuracy(score_fn: ScoreFn, examples: Sequence[RewardExample], tie_mode: str = "strict", eps: float = 0.0) -> AccuracyResult:
    """Per-domain and pooled accuracy of ``score_fn(prompts, responses)``.

    Raises:
        ValueError: if ``examples`` is empty.
    """
    if not examples:
        raise ValueError("accuracy of an empty example set is undefined")
    prompts = [ex.prompt for ex in examples]
    chosen = np.asarray(score_fn(prompts, [ex.chosen for ex in examples]), dtype=np.float64)
    rejected = np.asarray(score_fn(prompts, [ex.rejected for ex in examples]), dtype=np.float64)
    per, counts = {}, {}
    for d in dict.fromkeys(ex.domain for ex in examples):
        idx = [i for i, ex in enumerate(examples) if ex.domain == d]
        per[d] = accuracy_from_scores(chosen[idx], rejected[idx], tie_mode, eps)
        counts[d] = len(idx)
    return AccuracyResult(per, counts, accuracy_from_scores(chosen, rejected, tie_mode, eps))


def router_accuracy(assembly, examples: Sequence[RewardExample]) -> float:
    """Held-out fraction of prompts routed to their true domain."""
    if not examples:
        raise ValueError("router accuracy of an empty example set is undefined")
    decisions = assembly.route_many([ex.prompt for ex in examples])
    return sum(dec.domain == ex.domain for dec, ex in zip(decisions, examples)) / len(examples)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _std(values: Sequence[float]) -> float:
    return statistics.stdev(values) if len(values) > 1 else 0.0


@dataclass
class EvalReport:
    """Accuracies of one method over several seeds.

    ``accuracy[seed][domain]`` holds the raw cells; σ is the sample
    standard deviation (ddof=1) across seeds.
    """

    method: str
    domains: list[str]
    counts: dict[str, int]
    seeds: list[int] = field(default_factory=list)
    accuracy: dict[int, dict[str, float]] = field(default_factory=dict)
    router: dict[int, float] = field(default_factory=dict)

    def add(self, seed: int, result: AccuracyResult, router_acc: float | None = None) -> None:
        if seed in self.accuracy:
            raise ValueError(f"seed {seed} already recorded for {self.method}")
        for v in result.per_domain.values():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {v} outside [0, 1]")
        self.seeds.append(seed)
        self.accuracy[seed] = dict(result.per_domain)
        if router_acc is not None:
            self.router[seed] = router_acc

    def domain_values(self, domain: str) -> list[float]:
        return [self.accuracy[s][domain] for s in self.seeds]

    def macro_values(self) -> list[float]:
        return [float(np.mean([self.accuracy[s][d] for d in self.domains])) for s in self.seeds]

    def weighted_values(self) -> list[float]:
        total = sum(self.counts[d] for d in self.domains)
        return [sum(self.accuracy[s][d] * self.counts[d] for d in self.domains) / total for s in self.seeds]

    def mean_std(self, values: Sequence[float]) -> tuple[float, float]:
        return float(np.mean(values)), _std(values)

    @property
    def macro(self) -> tuple[float, float]:
        return self.mean_std(self.macro_values())

    @property
    def weighted(self) -> tuple[float, float]:
        return self.mean_std(self.weighted_values())

    def to_dict(self) -> dict:
        out = asdict(self)
        out["accuracy"] = {str(k): v for k, v in self.accuracy.items()}
        out["router"] = {str(k): v for k, v in self.router.items()}
        out["summary"] = {
            "per_domain": {d: self.mean_std(self.domain_values(d)) for d in self.domains},
            "macro": self.macro,
            "weighted": self.weighted,
        }
        if self.router:
            out["summary"]["router"] = self.mean_std(list(self.router.values()))
        return out


@dataclass
class InferenceStats:
    method: str
    median: float
    mean: float
    calls: int
    swaps: int
    repeat_medians: list[float] = field(default_factory=list)

    @property
    def swaps_per_call(self) -> float:
        return self.swaps / self.calls if self.calls else 0.0

    def to_dict(self) -> dict:
        return {**asdict(self), "swaps_per_call": self.swaps_per_call}


@dataclass
class TimingReport:
    """Training-time components for one method plus optional inference stats.

    ``epoch_seconds`` holds the mean 1-epoch time per component;
    ``run_seconds`` the full run per component, which must add up to the
    externally measured ``wall_seconds`` (with ``jobs == 1``).
    """

    method: str
    epoch_seconds: dict[str, float] = field(default_factory=dict)
    run_seconds: dict[str, float] = field(default_factory=dict)
    wall_seconds: float = 0.0
    inference: InferenceStats | None = None

    @classmethod
    def from_training(cls, method: str, times: Sequence[TrainingTimes]) -> TimingReport:
        """Average component timings over per-seed runs."""
        if not times:
            return cls(method)
        keys = list(times[0].epoch_seconds)
        return cls(
            method,
            {k: float(np.mean([t.epoch_seconds[k] for t in times])) for k in keys},
            {k: float(np.mean([t.run_seconds[k] for t in times])) for k in keys},
            float(np.mean([t.wall_seconds for t in times])),
        )

    @property
    def total(self) -> float:
        return sum(self.epoch_seconds.values())

    @property
    def run_total(self) -> float:
        return sum(self.run_seconds.values())

    def consistency_error(self) -> float:
        """Relative gap between the component sum and the wall-clock total."""
        return abs(self.run_total - self.wall_seconds) / self.wall_seconds if self.wall_seconds else 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["total"] = self.total
        out["run_total"] = self.run_total
        out["inference"] = self.inference.to_dict() if self.inference else None
        return out


@dataclass
class MatrixResult:
    evals: dict[str, EvalReport]
    timings: dict[str, TimingReport]

    def to_dict(self) -> dict:
        return {
            "evals": {m: r.to_dict() for m, r in self.evals.items()},
            "timings": {m: t.to_dict() for m, t in self.timings.items()},
        }


# ---------------------------------------------------------------------------
# experiment grid
# ---------------------------------------------------------------------------


def corpus_vocab(examples: Sequence[RewardExample], max_size: int) -> Vocab:
    return build_vocab([f"{ex.prompt} {ex.chosen} {ex.rejected}" for ex in examples], max_size)


def run_matrix(
    methods: Sequence[str],
    seeds: Sequence[int],
    train: Sequence[RewardExample],
    test: Sequence[RewardExample],
    settings: MethodSettings | None = None,
    vocab: Vocab | None = None,
    domains: Sequence[str] | None = None,
    sink: Callable[[str], None] | None = None,
    keep: Callable[[str, int, object], None] | None = None,
) -> MatrixResult:
    """Train and evaluate every (method, seed) cell.

    ``keep(method, seed, assembly)`` is called after each cell, e.g. to
    persist or benchmark the trained assembly.

    Raises:
        CellError: naming the first cell that failed.
    """
    settings = settings or MethodSettings()
    domains = list(domains) if domains is not None else list(dict.fromkeys(ex.domain for ex in train))
    vocab = vocab or corpus_vocab(train, settings.encoder.vocab_size)
    counts = {d: len(rows) for d, rows in split_by_domain(test, domains).items()}
    evals, timings = {}, {}
    for method in methods:
        report = EvalReport(method, domains, counts)
        times = []
        for seed in seeds:
            try:
                assembly, t = train_method(method, train, domains, vocab, settings, seed, sink)
                result = binary_accuracy(assembly.score_batch, test)
                r_acc = router_accuracy(assembly, test) if hasattr(assembly, "route_many") else None
            except Exception as exc:
                raise CellError(method, seed, exc) from exc
            report.add(seed, result, r_acc)
            times.append(t)
            if keep is not None:
                keep(method, seed, assembly)
        evals[method] = report
        timings[method] = TimingReport.from_training(method, times)
    return MatrixResult(evals, timings)


# ---------------------------------------------------------------------------
# inference benchmark
# ---------------------------------------------------------------------------


def request_stream(
    test: Sequence[RewardExample], domains: Sequence[str], samples_per_domain: int, seed: int, order: str = "shuffled"
) -> list[RewardExample]:
    """Draw up to ``samples_per_domain`` examples per domain in the given order.

    ``"shuffled"`` interleaves domains at random (worst case for adapter
    switching); ``"sorted"`` keeps each domain contiguous.
    """
    if order not in ("shuffled", "sorted"):
        raise ValueError(f"unknown order {order!r}")
    by = split_by_domain(test, domains)
    calls: list[RewardExample] = []
    for d in domains:
        rows = by.get(d, [])
        pick = make_rng(seed, "bench", d).permutation(len(rows))[:samples_per_domain]
        calls += [rows[i] for i in sorted(pick)]
    if order == "shuffled":
        perm = make_rng(seed, "bench-order").permutation(len(calls))
        calls = [calls[i] for i in perm]
    return calls


def bench_inference(
    assemblies: Mapping[str, object],
    test: Sequence[RewardExample],
    samples_per_domain: int,
    seed: int = 0,
    order: str = "shuffled",
    repeats: int = 3,
    warmup: int = 5,
) -> dict[str, InferenceStats]:
    """Per-call scoring latency for each assembly on one shared request stream.

    Every assembly sees the identical calls. Warm-up calls are excluded.
    Reports the median of per-repeat medians, the mean over all timed
    calls, and the adapter swaps during the last repeat.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out = {}
    for name, assembly in sorted(assemblies.items()):
        calls = request_stream(test, assembly.domains, samples_per_domain, seed, order)
        if not calls:
            raise ValueError("benchmark request stream is empty")
        for ex in calls[:warmup]:
            assembly.score(ex.prompt, ex.chosen)
        medians, every = [], []
        swaps = 0
        for _ in range(repeats):
            before = assembly.swap_count
            durations = []
            for ex in calls:
                t0 = time.perf_counter()
                assembly.score(ex.prompt, ex.chosen)
                durations.append(time.perf_counter() - t0)
            swaps = assembly.swap_count - before
            medians.append(statistics.median(durations))
            every += durations
        out[name] = InferenceStats(name, statistics.median(medians), statistics.fmean(every), len(calls), swaps, medians)
    return out


# ---------------------------------------------------------------------------
# plain-text tables
# ---------------------------------------------------------------------------


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned first column, right-aligned others."""
    cols = [header, *rows]
    widths = [max(len(str(r[i])) for r in cols) for i in range(len(header))]

    def line(r):
        cells = [str(c).ljust(widths[0]) if i == 0 else str(c).rjust(widths[i]) for i, c in enumerate(r)]
        return "  ".join(cells).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), rule, *(line(r) for r in rows)])


def _pm(mean: float, std: float) -> str:
    return f"{mean:.3f}±{std:.3f}"


def accuracy_table(evals: Mapping[str, EvalReport]) -> str:
    """Method × domain grid of mean±σ, with macro and weighted averages."""
    reports = list(evals.values())
    if not reports:
        return ""
    domains = reports[0].domains
    header = ["method", *domains, "macro", "weighted", "router"]
    rows = []
    for r in reports:
        router = _pm(*r.mean_std(list(r.router.values()))) if r.router else "-"
        rows.append([r.method, *(_pm(*r.mean_std(r.domain_values(d))) for d in domains), _pm(*r.macro), _pm(*r.weighted), router])
    return format_table(header, rows)


def training_time_table(timings: Mapping[str, TimingReport]) -> str:
    """Per-component 1-epoch seconds and their total."""
    rows = []
    for t in timings.values():
        parts = " ".join(f"{k}={v:.2f}" for k, v in t.epoch_seconds.items())
        rows.append([t.method, parts, f"{t.total:.2f}", f"{t.run_total:.2f}", f"{t.wall_seconds:.2f}"])
    return format_table(["method", "1-epoch seconds by component", "epoch total", "run total", "wall"], rows)


def inference_table(stats: Mapping[str, InferenceStats]) -> str:
    rows = [
        [s.method, f"{s.median * 1e3:.3f}", f"{s.mean * 1e3:.3f}", str(s.calls), str(s.swaps)]
        for s in sorted(stats.values(), key=lambda s: s.method)
    ]
    return format_table(["method", "median ms", "mean ms", "calls", "swaps"], rows)


def params_table(reports: Sequence) -> str:
    """Total parameters and percent of the reference, one row per method."""
    rows = [[r.method, f"{r.total:,}", f"{r.percent:.1f}%"] for r in reports]
    return format_table(["method", "params", "% of reference"], rows)
