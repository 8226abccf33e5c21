"""Evaluation metrics and experiment drivers.

Model traces and human responses are both turned into
:class:`JudgmentRecord` rows (one probability vector per stimulus,
judgment point and condition), and every report is computed from those
rows: the accuracy table (P(g_true) and Brier at the first, median and
last judgment points), Pearson correlations with bootstrap intervals,
a few t-test fields, and the temperature sweep.
"""

from __future__ import annotations

import logging
import math
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .formats import CONDITIONS, Stimulus, normalize_condition
from .inference import GoalPosteriorTrace, InferenceConfig, QSourcePool, run_stimulus
from .planner import PlannerConfig

log = logging.getLogger(__name__)

ALL_GOALS = "ALL"
SOURCES = ("model", "human-mean", "human-individual")
DEFAULT_TEMPERATURES = tuple(2.0**k for k in range(-4, 5))
POINTS = ("first", "median", "last")


class AnalysisError(ValueError):
    pass


class UnknownGoalError(AnalysisError):
    pass


class DegenerateVarianceError(AnalysisError):
    pass


class MissingStimulusError(AnalysisError):
    pass


@dataclass(frozen=True)
class HumanResponse:
    participant_id: str
    stimulus_id: str
    judgment_index: int
    condition: str
    selected: tuple[str, ...] | str

    def __post_init__(self):
        if isinstance(self.selected, str):
            if self.selected != ALL_GOALS:
                raise AnalysisError(f"selection must be a tuple of goals or {ALL_GOALS!r}")
        elif not self.selected:
            raise AnalysisError("a response must select at least one goal")
        object.__setattr__(self, "condition", normalize_condition(self.condition))


@dataclass(frozen=True)
class JudgmentRecord:
    stimulus_id: str
    judgment_index: int
    timestep: int
    source: str
    probs: tuple[float, ...]
    condition: str
    goals: tuple[str, ...]
    true_goal: str
    participant_id: str | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise AnalysisError(f"source must be one of {SOURCES}")
        if self.condition not in CONDITIONS:
            raise AnalysisError(f"condition must be one of {CONDITIONS}")
        if len(self.probs) != len(self.goals):
            raise AnalysisError("probability vector and goal list differ in length")
        if abs(math.fsum(self.probs) - 1) > 1e-6:
            raise AnalysisError(f"probabilities sum to {math.fsum(self.probs)}, not 1")
        if self.true_goal not in self.goals:
            raise UnknownGoalError(f"true goal {self.true_goal!r} is not among {self.goals}")

    @property
    def true_index(self) -> int:
        return self.goals.index(self.true_goal)

    @property
    def p_true(self) -> float:
        return self.probs[self.true_index]

    @property
    def brier(self) -> float:
        return brier(self.probs, self.true_index)

    @property
    def key(self) -> tuple[str, int]:
        return (self.stimulus_id, self.judgment_index)


# ---------------------------------------------------------------- metrics


def response_to_distribution(r: HumanResponse, goals: Sequence[str]) -> tuple[float, ...]:
    """Uniform distribution over the selected goals (all goals for ``ALL``)."""
    goals = list(goals)
    selected = set(goals) if r.selected == ALL_GOALS else set(r.selected)
    unknown = selected - set(goals)
    if unknown:
        raise UnknownGoalError(f"response selects unknown goals {sorted(unknown)}")
    share = Fraction(1, len(selected))
    return tuple(float(share) if g in selected else 0.0 for g in goals)


def brier(pred: Sequence[float], true_index: int) -> float:
    """Mean squared error against the one-hot truth, averaged over goals."""
    return math.fsum((p - (i == true_index)) ** 2 for i, p in enumerate(pred)) / len(pred)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) != len(ys):
        raise AnalysisError("pearson needs sequences of equal length")
    if len(xs) < 2:
        raise AnalysisError("pearson needs at least two points")
    mx = math.fsum(xs) / len(xs)
    my = math.fsum(ys) / len(ys)
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise DegenerateVarianceError("a sequence has zero variance")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _pearson_columns(sample: np.ndarray) -> float:
    return pearson(sample[:, 0].tolist(), sample[:, 1].tolist())


def bootstrap_ci(
    samples,
    statistic: Callable[[np.ndarray], float] = _pearson_columns,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile interval of ``statistic`` over rows resampled with replacement.

    ``samples`` is an array-like whose rows are resampled together (for the
    default statistic, rows are (model, human) pairs). Resamples on which
    the statistic is undefined (e.g. zero variance) are dropped.
    """
    data = np.asarray(samples, dtype=float)
    if data.size == 0 or len(data) == 0:
        raise AnalysisError("cannot bootstrap an empty sample")
    if n_resamples < 1:
        raise AnalysisError("n_resamples must be >= 1")
    if not 0 < level < 1:
        raise AnalysisError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_resamples):
        idx = rng.integers(0, len(data), size=len(data))
        try:
            values.append(statistic(data[idx]))
        except DegenerateVarianceError:
            continue
    if not values:
        raise DegenerateVarianceError("the statistic is undefined on every resample")
    if len(values) < n_resamples:
        log.warning("dropped %d degenerate bootstrap resamples", n_resamples - len(values))
    alpha = (1 - level) / 2
    lo, hi = np.quantile(np.asarray(values), [alpha, 1 - alpha])
    return float(lo), float(hi)


# ---------------------------------------------------------------- records


def _check_condition(mode: str) -> str:
    if mode not in CONDITIONS:
        raise AnalysisError(f"traces in mode {mode!r} have no matching experimental condition")
    return mode


def model_records(traces: Iterable[GoalPosteriorTrace]) -> list[JudgmentRecord]:
    out = []
    for trace in traces:
        cond = _check_condition(trace.mode)
        for idx, t, probs in trace.judgments():
            out.append(JudgmentRecord(trace.stimulus_id, idx, t, "model", tuple(probs), cond,
                                      tuple(trace.goals), trace.true_goal))
    return out


def human_records(responses: Iterable[HumanResponse], stimuli: Mapping[str, Stimulus]) -> list[JudgmentRecord]:
    """One record per individual response."""
    out = []
    for r in responses:
        stim = stimuli.get(r.stimulus_id)
        if stim is None:
            raise MissingStimulusError(f"response refers to unknown stimulus {r.stimulus_id!r}")
        if not 0 <= r.judgment_index < len(stim.judgment_points):
            raise AnalysisError(f"{r.stimulus_id} has no judgment point {r.judgment_index}")
        goals = tuple(g.gem for g in stim.goals)
        out.append(JudgmentRecord(
            r.stimulus_id, r.judgment_index, stim.judgment_points[r.judgment_index], "human-individual",
            response_to_distribution(r, goals), r.condition, goals, stim.true_goal.gem, r.participant_id,
        ))
    return out


def human_mean_records(individual: Iterable[JudgmentRecord]) -> list[JudgmentRecord]:
    groups: dict[tuple, list[JudgmentRecord]] = defaultdict(list)
    for rec in individual:
        groups[(rec.condition, rec.stimulus_id, rec.judgment_index)].append(rec)
    out = []
    for (cond, sid, idx), recs in sorted(groups.items()):
        first = recs[0]
        mean = np.mean([r.probs for r in recs], axis=0)
        out.append(JudgmentRecord(sid, idx, first.timestep, "human-mean", tuple(map(float, mean)), cond,
                                  first.goals, first.true_goal))
    return out


def human_frame_ci(
    individual: Sequence[JudgmentRecord], n_resamples: int = 1000, level: float = 0.95, seed: int = 0
) -> list[tuple[float, float]]:
    """Per-goal bootstrap interval of the mean human judgment, resampling participants."""
    data = np.asarray([r.probs for r in individual], dtype=float)
    return [
        bootstrap_ci(data[:, [g]], lambda s: float(np.mean(s)), n_resamples, level, seed)
        for g in range(data.shape[1])
    ]


# ---------------------------------------------------------------- accuracy table


@dataclass(frozen=True)
class AccuracyRow:
    source: str
    condition: str
    point: str
    p_true_mean: float
    p_true_sd: float
    brier_mean: float
    brier_sd: float
    n_stimuli: int


def _sd(values: Sequence[float]) -> float:
    return statistics.stdev(values) if len(values) > 1 else 0.0


def _point_values(recs: list[JudgmentRecord], point: str) -> tuple[float, float]:
    recs = sorted(recs, key=lambda r: r.judgment_index)
    if point == "first":
        chosen = [recs[0]]
    elif point == "last":
        chosen = [recs[-1]]
    else:
        n = len(recs)
        chosen = [recs[n // 2]] if n % 2 else [recs[n // 2 - 1], recs[n // 2]]
    return (math.fsum(r.p_true for r in chosen) / len(chosen),
            math.fsum(r.brier for r in chosen) / len(chosen))


def accuracy_table(records: Iterable[JudgmentRecord], stimulus_ids: Iterable[str] | None = None) -> list[AccuracyRow]:
    """Mean and SD across stimuli of P(g_true) and Brier at the first, median and last judgment points.

    Individual human records are ignored; pass human-mean records instead.
    When ``stimulus_ids`` is given every (source, condition) group must
    cover all of them.
    """
    groups: dict[tuple[str, str], dict[str, list[JudgmentRecord]]] = defaultdict(lambda: defaultdict(list))
    for rec in records:
        if rec.source != "human-individual":
            groups[(rec.source, rec.condition)][rec.stimulus_id].append(rec)
    wanted = None if stimulus_ids is None else set(stimulus_ids)
    rows = []
    for (source, cond) in sorted(groups):
        by_stim = groups[(source, cond)]
        if wanted is not None:
            missing = wanted - set(by_stim)
            if missing:
                raise MissingStimulusError(f"{source}/{cond} has no judgments for {sorted(missing)}")
        for point in POINTS:
            vals = [_point_values(by_stim[sid], point) for sid in sorted(by_stim)]
            p = [v[0] for v in vals]
            b = [v[1] for v in vals]
            rows.append(AccuracyRow(source, cond, point, math.fsum(p) / len(p), _sd(p),
                                    math.fsum(b) / len(b), _sd(b), len(vals)))
    return rows


# ---------------------------------------------------------------- correlations and tests


@dataclass(frozen=True)
class CorrelationResult:
    label: str
    model_condition: str
    human_condition: str
    r: float
    ci_low: float
    ci_high: float
    n_points: int


def correlation_points(model: Iterable[JudgmentRecord], human: Iterable[JudgmentRecord],
                       model_condition: str, human_condition: str) -> np.ndarray:
    """(model, human) pairs, one per matching stimulus, judgment point and goal."""
    human_by_key = {r.key: r for r in human if r.condition == human_condition and r.source == "human-mean"}
    pairs = []
    for m in sorted((r for r in model if r.condition == model_condition), key=lambda r: r.key):
        h = human_by_key.get(m.key)
        if h is None:
            continue
        if h.goals != m.goals:
            raise AnalysisError(f"goal lists differ for {m.key}")
        pairs.extend(zip(m.probs, h.probs))
    return np.asarray(pairs, dtype=float).reshape(-1, 2)


CORRELATIONS = (
    ("with-instructions", "with-instructions", "with-instructions"),
    ("without-instructions", "without-instructions", "without-instructions"),
    ("model-without-vs-human-with", "without-instructions", "with-instructions"),
)


def correlation_report(model: Sequence[JudgmentRecord], human: Sequence[JudgmentRecord],
                       n_resamples: int = 1000, level: float = 0.95, seed: int = 0) -> list[CorrelationResult]:
    out = []
    for label, mc, hc in CORRELATIONS:
        pts = correlation_points(model, human, mc, hc)
        if len(pts) < 2:
            log.info("skipping %s: fewer than two paired points", label)
            continue
        r = pearson(pts[:, 0].tolist(), pts[:, 1].tolist())
        lo, hi = bootstrap_ci(pts, n_resamples=n_resamples, level=level, seed=seed)
        out.append(CorrelationResult(label, mc, hc, r, lo, hi, len(pts)))
    return out


@dataclass(frozen=True)
class TTestResult:
    label: str
    statistic: float
    p_value: float
    n: int
    mean_a: float
    mean_b: float


def ttest_model_vs_human(model: Sequence[JudgmentRecord], human: Sequence[JudgmentRecord],
                         condition: str) -> TTestResult:
    """Paired t-test on P(g_true), model vs human mean, over all judgment points."""
    human_by_key = {r.key: r for r in human if r.condition == condition and r.source == "human-mean"}
    pairs = [(m.p_true, human_by_key[m.key].p_true)
             for m in model if m.condition == condition and m.key in human_by_key]
    if len(pairs) < 2:
        raise AnalysisError("a paired t-test needs at least two pairs")
    a, b = zip(*pairs)
    res = stats.ttest_rel(a, b)
    return TTestResult(f"model-vs-human/{condition}", float(res.statistic), float(res.pvalue), len(pairs),
                       float(np.mean(a)), float(np.mean(b)))


def ttest_human_spread(individual: Sequence[JudgmentRecord]) -> TTestResult:
    """Compare the across-participant SD of P(g_true) per judgment point between conditions."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in individual:
        if r.source == "human-individual":
            groups[(r.condition, r.key)].append(r.p_true)
    sds = {c: [_sd(v) for (cond, _), v in sorted(groups.items()) if cond == c and len(v) > 1] for c in CONDITIONS}
    a, b = sds["with-instructions"], sds["without-instructions"]
    if len(a) < 2 or len(b) < 2:
        raise AnalysisError("need at least two judgment points per condition")
    res = stats.ttest_ind(a, b)
    return TTestResult("human-sd/with-vs-without", float(res.statistic), float(res.pvalue), len(a) + len(b),
                       float(np.mean(a)), float(np.mean(b)))


# ---------------------------------------------------------------- human data helpers


def participant_scores(individual: Iterable[JudgmentRecord]) -> dict[tuple[str, str], float]:
    """Total Brier skill (against the uniform guess) per (condition, participant)."""
    scores: dict[tuple[str, str], float] = defaultdict(float)
    for r in individual:
        n = len(r.goals)
        reference = brier([1 / n] * n, r.true_index)
        scores[(r.condition, r.participant_id)] += 1 - r.brier / reference
    return dict(scores)


def filter_outliers(responses: Sequence[HumanResponse], stimuli: Mapping[str, Stimulus]) -> tuple[list[HumanResponse], list[tuple[str, str]]]:
    """Drop participants whose total score falls below Q1 - IQR within their condition."""
    scores = participant_scores(human_records(responses, stimuli))
    excluded = []
    for cond in CONDITIONS:
        vals = np.asarray([s for (c, _), s in scores.items() if c == cond])
        if len(vals) < 4:
            continue
        q1, q3 = np.percentile(vals, [25, 75])
        cutoff = q1 - (q3 - q1)
        excluded += [key for key, s in scores.items() if key[0] == cond and s < cutoff]
    dropped = set(excluded)
    kept = [r for r in responses if (r.condition, r.participant_id) not in dropped]
    return kept, sorted(excluded)


def synthesize_responses(
    traces: Iterable[GoalPosteriorTrace],
    n_participants: int = 20,
    noise: float = 0.3,
    seed: int = 0,
) -> list[HumanResponse]:
    """Simulated participants answering from noisy copies of the model's judgments.

    Each participant perturbs the model posterior with log-normal noise, then
    either picks one goal from the perturbed distribution or, one time in
    four, selects every goal within half the probability of the best one.
    """
    rng = np.random.default_rng(seed)
    out = []
    for trace in sorted(traces, key=lambda t: (t.mode, t.stimulus_id)):
        cond = _check_condition(trace.mode)
        for idx, _, probs in trace.judgments():
            p = np.asarray(probs, dtype=float)
            for k in range(n_participants):
                noisy = p * np.exp(noise * rng.standard_normal(len(p)))
                noisy /= noisy.sum()
                if rng.random() < 0.25:
                    chosen = [g for g, q in zip(trace.goals, noisy) if q >= 0.5 * noisy.max()]
                else:
                    chosen = [trace.goals[rng.choice(len(p), p=noisy)]]
                sel = ALL_GOALS if len(chosen) == len(trace.goals) else tuple(chosen)
                out.append(HumanResponse(f"{cond[:4]}-p{k:02d}", trace.stimulus_id, idx, cond, sel))
    return out


# ---------------------------------------------------------------- temperature sweep


@dataclass(frozen=True)
class SweepRow:
    temperature: float
    condition: str
    r: float | None
    ci_low: float | None
    ci_high: float | None
    n_points: int
    p_true_mean: float
    brier_mean: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    best: dict[str, float] = field(default_factory=dict)
    traces: dict[float, list[GoalPosteriorTrace]] = field(default_factory=dict, repr=False)


TraceRunner = Callable[[Sequence[Stimulus], str, float], list[GoalPosteriorTrace]]


def _serial_runner(cfg: InferenceConfig, pool: QSourcePool, scorer) -> TraceRunner:
    def run(stimuli, mode, temperature):
        planner = PlannerConfig(temperature, cfg.planner.budget, cfg.planner.heuristic)
        tcfg = InferenceConfig(planner, cfg.utterance)
        return [run_stimulus(s, mode, tcfg, pool, scorer) for s in stimuli]
    return run


def temperature_sweep(
    stimuli: Sequence[Stimulus],
    human: Sequence[JudgmentRecord] | None = None,
    temperatures: Sequence[float] = DEFAULT_TEMPERATURES,
    conditions: Sequence[str] = CONDITIONS,
    cfg: InferenceConfig | None = None,
    scorer=None,
    runner: TraceRunner | None = None,
    n_resamples: int = 1000,
    seed: int = 0,
) -> SweepResult:
    """Rerun inference at every temperature and correlate with human means.

    Q-values do not depend on the temperature, so one pool of Q sources is
    shared across the whole grid. Without human data the R columns are
    left empty and only the accuracy columns are filled.
    """
    cfg = cfg or InferenceConfig()
    runner = runner or _serial_runner(cfg, QSourcePool(), scorer)
    result = SweepResult(rows=[])
    for T in temperatures:
        traces = []
        for cond in conditions:
            cond_traces = runner(stimuli, cond, T)
            traces += cond_traces
            recs = model_records(cond_traces)
            r = lo = hi = None
            n = 0
            if human:
                pts = correlation_points(recs, human, cond, cond)
                n = len(pts)
                if n >= 2:
                    r = pearson(pts[:, 0].tolist(), pts[:, 1].tolist())
                    lo, hi = bootstrap_ci(pts, n_resamples=n_resamples, seed=seed)
            result.rows.append(SweepRow(
                T, cond, r, lo, hi, n,
                math.fsum(x.p_true for x in recs) / len(recs),
                math.fsum(x.brier for x in recs) / len(recs),
            ))
        result.traces[T] = traces
    for cond in conditions:
        scored = [row for row in result.rows if row.condition == cond and row.r is not None]
        if scored:
            result.best[cond] = max(scored, key=lambda row: row.r).temperature
    if human and all(c in result.best for c in conditions):
        def geo(T):
            rs = [row.r for row in result.rows if row.temperature == T and row.r is not None]
            return math.prod(max(r, 0.0) for r in rs) ** (1 / len(rs))
        result.best["overall"] = max(temperatures, key=geo)
    return result
