"""Scoring and statistics for termination-prediction runs.

Per-sample scoring is asymmetric with non-termination as the positive class:
correct T earns +2, correct NT earns +1 only when its witness checks out,
unknowns and unconfirmed witnesses earn 0, wrong NT costs -16, and wrong T
costs -32.  Category aggregates combine into the competition-style score

    (1/k) * sum_i(s_i / n_i) * sum_i(n_i)

over the k categories.  Stochastic oracles are summarized by bootstrap
resampling of cached generation pools, either picking one generation per
task or applying consensus test-time scaling (draw n, answer only on
unanimity among the non-unknown votes).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import random
import statistics
from dataclasses import dataclass, field
from enum import Enum

from .witness import Verdict


class SampleOutcome(Enum):
    TN = "TN"
    TP_VALID = "TP_valid"
    TP_INVALID = "TP_invalid"
    FP = "FP"
    FN = "FN"
    UNK = "UNK"


class WitnessStatus(Enum):
    VALID = "valid"
    INVALID = "invalid"
    ABSENT = "absent"


SCORE_TABLE = {
    SampleOutcome.TN: 2,
    SampleOutcome.TP_VALID: 1,
    SampleOutcome.TP_INVALID: 0,
    SampleOutcome.UNK: 0,
    SampleOutcome.FP: -16,
    SampleOutcome.FN: -32,
}


def classify_sample(expected: Verdict, predicted: Verdict,
                    witness_status: WitnessStatus) -> SampleOutcome:
    """Total mapping from (expected, predicted, witness status) to outcome."""
    if expected not in (Verdict.T, Verdict.NT):
        raise ValueError(f"expected verdict must be T or NT, got {expected}")
    if predicted is Verdict.UNK:
        return SampleOutcome.UNK
    if expected is Verdict.T:
        return SampleOutcome.TN if predicted is Verdict.T else SampleOutcome.FP
    # expected NT
    if predicted is Verdict.T:
        return SampleOutcome.FN
    if witness_status is WitnessStatus.VALID:
        return SampleOutcome.TP_VALID
    return SampleOutcome.TP_INVALID


def score_sample(outcome: SampleOutcome) -> int:
    return SCORE_TABLE[outcome]


WORST_CASE = {Verdict.T: SampleOutcome.FP, Verdict.NT: SampleOutcome.FN}
BEST_CASE = {Verdict.T: SampleOutcome.TN, Verdict.NT: SampleOutcome.TP_VALID}


# ---------------------------------------------------------------------------
# Category-weighted score


@dataclass(frozen=True)
class CategoryAggregate:
    category: str
    s_i: float
    n_i: int


def svcomp_score(aggregates: list[CategoryAggregate]) -> float:
    """Category-normalized score; every category weighs the same."""
    if not aggregates:
        raise ValueError("no category aggregates")
    for agg in aggregates:
        if agg.n_i <= 0:
            raise ValueError(f"category {agg.category} has no samples")
    k = len(aggregates)
    total_n = sum(agg.n_i for agg in aggregates)
    return (1.0 / k) * sum(agg.s_i / agg.n_i for agg in aggregates) * total_n


def aggregate_outcomes(outcomes: dict[str, SampleOutcome],
                       categories: dict[str, str]) -> list[CategoryAggregate]:
    """Sum per-sample points into one aggregate per category."""
    sums: dict[str, int] = {}
    counts: dict[str, int] = {}
    for task_id, outcome in outcomes.items():
        cat = categories[task_id]
        sums[cat] = sums.get(cat, 0) + score_sample(outcome)
        counts[cat] = counts.get(cat, 0) + 1
    return [CategoryAggregate(cat, sums[cat], counts[cat])
            for cat in sorted(sums)]


# ---------------------------------------------------------------------------
# Consensus test-time scaling


def consensus_of(votes: list[Verdict]) -> Verdict:
    """Unanimity among the non-unknown votes, otherwise unknown."""
    decided = {v for v in votes if v is not Verdict.UNK}
    if len(decided) == 1:
        return next(iter(decided))
    return Verdict.UNK


def tts_consensus(votes: list[Verdict], n: int, rng: random.Random) -> Verdict:
    """Draw ``n`` votes without replacement and answer only on unanimity."""
    if n > len(votes):
        raise ValueError(f"cannot draw {n} of {len(votes)} votes")
    drawn = [votes[i] for i in sorted(rng.sample(range(len(votes)), n))]
    return consensus_of(drawn)


# ---------------------------------------------------------------------------
# Bootstrap evaluation


@dataclass(frozen=True)
class EvalConfig:
    pool_size: int = 20
    n_bootstrap: int = 100
    tts_n: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.tts_n > self.pool_size:
            raise ValueError("tts_n must not exceed pool_size")
        if self.n_bootstrap < 1:
            raise ValueError("n_bootstrap must be >= 1")


@dataclass(frozen=True)
class PoolEntry:
    """One generation's contribution to scoring.

    Replies that never parsed to a verdict enter as UNK; an NT verdict whose
    witness was malformed or refuted enters with an unconfirmed status.
    """
    verdict: Verdict
    witness_status: WitnessStatus = WitnessStatus.ABSENT


def task_rng(seed: int, run_index: int, task_id: str) -> random.Random:
    """Substream generator for one (bootstrap run, task) pair.

    Hash-derived so results do not depend on iteration order.
    """
    digest = hashlib.sha256(f"{seed}:{run_index}:{task_id}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


@dataclass
class Stats:
    mean: float
    std: float


def _stats(values: list[float]) -> Stats:
    mean = sum(values) / len(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return Stats(mean, std)


@dataclass
class BootstrapResult:
    mode: str
    scores: Stats
    f1_t: Stats
    f1_nt: Stats
    per_run_scores: list[float]
    per_run_f1: list[tuple[float, float]]
    unk_fraction: float  # fraction of (run, task) final answers that were UNK


def bootstrap_eval(pools: dict[str, list[PoolEntry]],
                   expected: dict[str, Verdict],
                   categories: dict[str, str],
                   cfg: EvalConfig, mode: str) -> BootstrapResult:
    """Bootstrap over cached pools.

    ``mode`` is ``"single"`` (one generation per task per run) or ``"tts"``
    (consensus over ``cfg.tts_n`` drawn generations; an NT consensus counts
    as validly witnessed when any drawn NT vote carried a valid witness).
    """
    if mode not in ("single", "tts"):
        raise ValueError(f"unknown mode {mode!r}")
    missing = [t for t in expected if t not in pools]
    if missing:
        raise ValueError(f"tasks without prediction pools: {sorted(missing)[:5]}")
    for task_id, pool in pools.items():
        if len(pool) != cfg.pool_size:
            raise ValueError(
                f"task {task_id} has {len(pool)} generations, expected "
                f"{cfg.pool_size}")

    task_ids = sorted(expected)
    per_run_scores: list[float] = []
    per_run_f1: list[tuple[float, float]] = []
    unk_answers = 0
    for run in range(cfg.n_bootstrap):
        outcomes: dict[str, SampleOutcome] = {}
        verdict_pairs: list[tuple[Verdict, Verdict]] = []
        for task_id in task_ids:
            pool = pools[task_id]
            rng = task_rng(cfg.rng_seed, run, task_id)
            if mode == "single":
                entry = pool[rng.randrange(len(pool))]
                verdict, status = entry.verdict, entry.witness_status
            else:
                drawn = [pool[i] for i in
                         sorted(rng.sample(range(len(pool)), cfg.tts_n))]
                verdict = consensus_of([e.verdict for e in drawn])
                status = WitnessStatus.ABSENT
                if verdict is Verdict.NT:
                    status = (WitnessStatus.VALID if any(
                        e.verdict is Verdict.NT and
                        e.witness_status is WitnessStatus.VALID
                        for e in drawn) else WitnessStatus.INVALID)
            if verdict is Verdict.UNK:
                unk_answers += 1
            outcomes[task_id] = classify_sample(expected[task_id], verdict, status)
            verdict_pairs.append((expected[task_id], verdict))
        per_run_scores.append(svcomp_score(aggregate_outcomes(outcomes, categories)))
        f1 = f1_per_class(verdict_pairs)
        per_run_f1.append((f1["F1_T"], f1["F1_NT"]))

    return BootstrapResult(
        mode=mode,
        scores=_stats(per_run_scores),
        f1_t=_stats([f[0] for f in per_run_f1]),
        f1_nt=_stats([f[1] for f in per_run_f1]),
        per_run_scores=per_run_scores,
        per_run_f1=per_run_f1,
        unk_fraction=unk_answers / (cfg.n_bootstrap * len(task_ids)),
    )


# ---------------------------------------------------------------------------
# F1


def f1_per_class(outcomes: list[tuple[Verdict, Verdict]]) -> dict[str, float]:
    """Per-class F1 where an unknown counts as no prediction: it joins no
    predicted-class tally but its sample still weighs down recall."""
    result = {}
    for cls, key in ((Verdict.T, "F1_T"), (Verdict.NT, "F1_NT")):
        predicted = sum(1 for _, p in outcomes if p is cls)
        expected = sum(1 for e, _ in outcomes if e is cls)
        correct = sum(1 for e, p in outcomes if e is cls and p is cls)
        precision = correct / predicted if predicted else 0.0
        recall = correct / expected if expected else 0.0
        if precision + recall == 0:
            result[key] = 0.0
        else:
            result[key] = 2 * precision * recall / (precision + recall)
    return result


# ---------------------------------------------------------------------------
# Witness metrics


@dataclass
class ConfusionCounts:
    tn: int = 0
    tp_valid: int = 0
    tp_invalid: int = 0
    fp: int = 0
    fn: int = 0
    unk: int = 0
    expected_nt: int = 0

    def add(self, expected: Verdict, outcome: SampleOutcome):
        field_name = {
            SampleOutcome.TN: "tn", SampleOutcome.TP_VALID: "tp_valid",
            SampleOutcome.TP_INVALID: "tp_invalid", SampleOutcome.FP: "fp",
            SampleOutcome.FN: "fn", SampleOutcome.UNK: "unk",
        }[outcome]
        setattr(self, field_name, getattr(self, field_name) + 1)
        if expected is Verdict.NT:
            self.expected_nt += 1

    @property
    def total(self) -> int:
        return self.tn + self.tp_valid + self.tp_invalid + self.fp + self.fn + self.unk


def witness_metrics(c: ConfusionCounts) -> dict[str, float]:
    """Validity, precision, and recall of validated witnesses.

    Validity is relative to correct NT predictions, precision to all parsed
    NT predictions, recall to all NT-expected samples.  Zero denominators
    yield 0.
    """
    def ratio(num: int, den: int) -> float:
        return num / den if den else 0.0

    return {
        "validity": ratio(c.tp_valid, c.tp_valid + c.tp_invalid),
        "precision": ratio(c.tp_valid, c.tp_valid + c.tp_invalid + c.fp),
        "recall": ratio(c.tp_valid, c.expected_nt),
    }


# ---------------------------------------------------------------------------
# Unknown rates


@dataclass
class UnknownRates:
    unk_rate: float
    tts_unk_rate: float


def unknown_rates(pools: dict[str, list[PoolEntry]],
                  cfg: EvalConfig) -> UnknownRates:
    """Raw unknown share over all generations, plus the share of
    (task, bootstrap draw) pairs that resolve to unknown under consensus.

    Draws use the same hash-derived substreams as :func:`bootstrap_eval`,
    so both views describe the same resampling.
    """
    total = sum(len(p) for p in pools.values())
    unk = sum(1 for p in pools.values() for e in p if e.verdict is Verdict.UNK)
    tts_unk = 0
    pairs = 0
    for task_id in sorted(pools):
        votes = [e.verdict for e in pools[task_id]]
        for run in range(cfg.n_bootstrap):
            rng = task_rng(cfg.rng_seed, run, task_id)
            if tts_consensus(votes, cfg.tts_n, rng) is Verdict.UNK:
                tts_unk += 1
            pairs += 1
    return UnknownRates(
        unk_rate=unk / total if total else 0.0,
        tts_unk_rate=tts_unk / pairs if pairs else 0.0,
    )


# ---------------------------------------------------------------------------
# Length-bin scores


def score_by_length_bin(outcomes: list[tuple[str, SampleOutcome]],
                        binning) -> dict[int, float]:
    """Mean per-sample score grouped by the task's length bin."""
    sums: dict[int, int] = {0: 0, 1: 0, 2: 0}
    counts: dict[int, int] = {0: 0, 1: 0, 2: 0}
    for task_id, outcome in outcomes:
        bin_index = binning.assignment[task_id]
        sums[bin_index] += score_sample(outcome)
        counts[bin_index] += 1
    return {b: (sums[b] / counts[b] if counts[b] else 0.0) for b in (0, 1, 2)}


# ---------------------------------------------------------------------------
# Pass@k


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased probability that at least one of k drawn samples (out of n,
    c of them correct) is correct: 1 - C(n-c, k)/C(n, k)."""
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return 1.0
    return 1.0 - math.comb(n - c, k) / math.comb(n, k)


# ---------------------------------------------------------------------------
# Report


@dataclass
class ModelReport:
    model: str
    svcomp_single: Stats
    svcomp_tts: Stats
    f1_t_single: Stats
    f1_nt_single: Stats
    f1_t_tts: Stats
    f1_nt_tts: Stats
    witness: dict[str, float]
    unk_rate: float
    tts_unk_rate: float
    bin_means: dict[int, float] = field(default_factory=dict)
    per_run_single: list[float] = field(default_factory=list)
    per_run_tts: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    models: list[ModelReport]
    config: EvalConfig
    witness_check_mode: str  # "external-validator" or "internal-checker"

    def to_json(self) -> str:
        payload = {
            "config": {
                "pool_size": self.config.pool_size,
                "n_bootstrap": self.config.n_bootstrap,
                "tts_n": self.config.tts_n,
                "rng_seed": self.config.rng_seed,
            },
            "witness_check_mode": self.witness_check_mode,
            "models": [
                {
                    "model": m.model,
                    "svcomp_single": {"mean": m.svcomp_single.mean,
                                      "std": m.svcomp_single.std},
                    "svcomp_tts": {"mean": m.svcomp_tts.mean,
                                   "std": m.svcomp_tts.std},
                    "f1_t_single": {"mean": m.f1_t_single.mean,
                                    "std": m.f1_t_single.std},
                    "f1_nt_single": {"mean": m.f1_nt_single.mean,
                                     "std": m.f1_nt_single.std},
                    "f1_t_tts": {"mean": m.f1_t_tts.mean, "std": m.f1_t_tts.std},
                    "f1_nt_tts": {"mean": m.f1_nt_tts.mean, "std": m.f1_nt_tts.std},
                    "witness": m.witness,
                    "unk_rate": m.unk_rate,
                    "tts_unk_rate": m.tts_unk_rate,
                    "bin_means": {str(k): v for k, v in sorted(m.bin_means.items())},
                }
                for m in self.models
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        header = (f"{'model':<24} {'score-1':>10} {'score-tts':>10} "
                  f"{'F1(T)':>7} {'F1(NT)':>7} {'F1(T)+':>7} {'F1(NT)+':>8} "
                  f"{'wit-P':>7} {'wit-R':>7} "
                  f"{'wit-V':>7} {'unk':>6} {'tts-unk':>8}")
        lines = [
            f"witness check mode: {self.witness_check_mode}",
            f"seed: {self.config.rng_seed}  pool: {self.config.pool_size}  "
            f"bootstraps: {self.config.n_bootstrap}  tts n: {self.config.tts_n}",
            "('+' columns are consensus-mode F1)",
            "",
            header,
            "-" * len(header),
        ]
        for m in self.models:
            lines.append(
                f"{m.model:<24} "
                f"{m.svcomp_single.mean:>10.1f} {m.svcomp_tts.mean:>10.1f} "
                f"{m.f1_t_single.mean:>7.3f} {m.f1_nt_single.mean:>7.3f} "
                f"{m.f1_t_tts.mean:>7.3f} {m.f1_nt_tts.mean:>8.3f} "
                f"{m.witness['precision']:>7.3f} {m.witness['recall']:>7.3f} "
                f"{m.witness['validity']:>7.3f} "
                f"{m.unk_rate:>6.3f} {m.tts_unk_rate:>8.3f}")
        if any(m.bin_means for m in self.models):
            lines.append("")
            lines.append(f"{'model':<24} {'bin0':>10} {'bin1':>10} {'bin2':>10}")
            for m in self.models:
                if m.bin_means:
                    lines.append(f"{m.model:<24} "
                                 f"{m.bin_means.get(0, 0.0):>10.3f} "
                                 f"{m.bin_means.get(1, 0.0):>10.3f} "
                                 f"{m.bin_means.get(2, 0.0):>10.3f}")
        return "\n".join(lines) + "\n"

    def per_run_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "mode", "run", "score"])
        for m in self.models:
            for i, score in enumerate(m.per_run_single):
                writer.writerow([m.model, "single", i, repr(score)])
            for i, score in enumerate(m.per_run_tts):
                writer.writerow([m.model, "tts", i, repr(score)])
        return buf.getvalue()
