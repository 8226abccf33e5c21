"""Exact sequential goal inference from an instruction and joint actions.

Each candidate goal carries an unnormalized log-weight. The weight starts
at the log-prior plus the instruction's log-likelihood under that goal's
optimal plan, and every observed timestep adds the log-probabilities of
the principal's and then the assistant's action under the goal's
Boltzmann policy. Posteriors are the max-shifted, exponentiated and
normalized weights. Nothing is sampled.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .formats import ObservedTimestep, Stimulus
from .gridworld import GridMap, Goal, WorldState, check_action, step
from .planner import GoalUnreachableError, PlannerConfig, QSource, boltzmann_policy, rollout_optimal
from .utterance import (
    Scorer,
    UtteranceModelConfig,
    UtteranceObservation,
    extract_salient,
    serialize_salient,
    utterance_likelihood,
)

log = logging.getLogger(__name__)

MODES = ("with-instructions", "without-instructions", "instructions-only")
_MODE_ALIASES = {"with": "with-instructions", "without": "without-instructions", "instructions": "instructions-only"}


class IllegalObservedActionError(ValueError):
    def __init__(self, message: str, timestep: int):
        super().__init__(f"timestep {timestep}: {message}")
        self.timestep = timestep


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


@dataclass(frozen=True)
class InferenceConfig:
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    utterance: UtteranceModelConfig = field(default_factory=UtteranceModelConfig)


@dataclass
class GoalSpace:
    goals: list[Goal]
    prior: list[float] | None = None

    def __post_init__(self):
        if not self.goals:
            raise ValueError("goal space is empty")
        if self.prior is None:
            self.prior = [1 / len(self.goals)] * len(self.goals)
        if len(self.prior) != len(self.goals):
            raise ValueError("prior and goals differ in length")
        if abs(math.fsum(self.prior) - 1) > 1e-9 or min(self.prior) < 0:
            raise ValueError("prior must be a probability vector")

    @property
    def log_prior(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(np.asarray(self.prior, dtype=float))


def normalize_log_weights(log_weights) -> np.ndarray:
    w = np.asarray(log_weights, dtype=float)
    shifted = np.exp(w - w.max())
    return shifted / shifted.sum()


@dataclass
class TraceRow:
    timestep: int
    log_weights: tuple[float, ...]
    probs: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"timestep": self.timestep, "log_weights": list(self.log_weights), "probs": list(self.probs)}


@dataclass
class GoalPosteriorTrace:
    """Per-goal log-weights and posteriors after each timestep.

    ``prior`` holds the weights before any evidence; ``rows[0]`` is t=0
    (after the instruction, when conditioned on), ``rows[t]`` follows the
    t-th observed timestep.
    """

    goals: list[str]
    prior: TraceRow
    rows: list[TraceRow] = field(default_factory=list)
    mode: str = "with-instructions"
    stimulus_id: str = ""
    true_goal: str | None = None
    judgment_points: list[int] = field(default_factory=list)
    utterance_conditioned: bool = False
    actions_conditioned: int = 0
    salient: dict[str, str] = field(default_factory=dict)
    state: WorldState | None = field(default=None, repr=False)

    @property
    def log_weights(self) -> np.ndarray:
        return np.asarray((self.rows[-1] if self.rows else self.prior).log_weights)

    def append(self, timestep: int, log_weights) -> None:
        log_weights = np.asarray(log_weights, dtype=float)
        probs = normalize_log_weights(log_weights)
        self.rows.append(TraceRow(timestep, tuple(map(float, log_weights)), tuple(map(float, probs))))

    def posterior_at(self, timestep: int) -> tuple[float, ...]:
        """Posterior after the latest recorded row at or before ``timestep``."""
        best = None
        for row in self.rows:
            if row.timestep <= timestep:
                best = row
        if best is None:
            raise KeyError(f"no row at or before timestep {timestep}")
        return best.probs

    def judgments(self) -> list[tuple[int, int, tuple[float, ...]]]:
        return [(i, t, self.posterior_at(t)) for i, t in enumerate(self.judgment_points)]

    def to_dict(self) -> dict:
        return {
            "stimulus_id": self.stimulus_id,
            "mode": self.mode,
            "goals": list(self.goals),
            "true_goal": self.true_goal,
            "judgment_points": list(self.judgment_points),
            "utterance_conditioned": self.utterance_conditioned,
            "actions_conditioned": self.actions_conditioned,
            "salient": dict(self.salient),
            "prior": self.prior.to_dict(),
            "rows": [r.to_dict() for r in self.rows],
        }

    @classmethod
    def from_dict(cls, data: dict) -> GoalPosteriorTrace:
        def row(d):
            return TraceRow(d["timestep"], tuple(d["log_weights"]), tuple(d["probs"]))

        return cls(
            goals=list(data["goals"]),
            prior=row(data["prior"]),
            rows=[row(r) for r in data["rows"]],
            mode=data["mode"],
            stimulus_id=data["stimulus_id"],
            true_goal=data.get("true_goal"),
            judgment_points=list(data.get("judgment_points", [])),
            utterance_conditioned=data.get("utterance_conditioned", False),
            actions_conditioned=data.get("actions_conditioned", 0),
            salient=dict(data.get("salient", {})),
        )

    def csv_rows(self) -> list[tuple]:
        return [
            (self.stimulus_id, row.timestep, goal, p, self.mode)
            for row in self.rows
            for goal, p in zip(self.goals, row.probs)
        ]


TRACE_CSV_HEADER = ("stimulus", "timestep", "goal", "probability", "mode")


def make_qsources(gridmap: GridMap, goals: Sequence[Goal], cfg: PlannerConfig) -> list[QSource]:
    return [QSource(gridmap, goal, heuristic=cfg.heuristic) for goal in goals]


class QSourcePool:
    """QSources shared across stimuli and temperatures (Q-values do not depend on T)."""

    def __init__(self):
        self._pool: dict[tuple, QSource] = {}

    def get(self, gridmap: GridMap, goals: Sequence[Goal], cfg: PlannerConfig) -> list[QSource]:
        out = []
        for goal in goals:
            key = (id(gridmap), goal, cfg.heuristic)
            if key not in self._pool:
                self._pool[key] = QSource(gridmap, goal, heuristic=cfg.heuristic)
            out.append(self._pool[key])
        return out


def plan_salient(q: QSource, start: WorldState, cfg: PlannerConfig):
    try:
        plan = rollout_optimal(q, start, PlannerConfig(0.0, cfg.budget, cfg.heuristic))
    except GoalUnreachableError:
        log.info("goal %s unreachable; treating its plan as having nothing to say", q.goal)
        return []
    return extract_salient(plan, q.gridmap)


def init_weights(
    space: GoalSpace,
    obs: UtteranceObservation | None,
    qsources: Sequence[QSource],
    cfg: InferenceConfig,
    scorer: Scorer | None = None,
) -> GoalPosteriorTrace:
    """Start a trace: log w0 = log P(g) + log P(u, c | g), or just the prior when ``obs`` is None."""
    if len(qsources) != len(space.goals):
        raise ValueError("need one QSource per goal")
    gridmap = qsources[0].gridmap
    start = gridmap.initial_state()
    prior = space.log_prior
    trace = GoalPosteriorTrace(
        goals=[g.gem for g in space.goals],
        prior=TraceRow(-1, tuple(map(float, prior)), tuple(map(float, normalize_log_weights(prior)))),
        state=start,
    )
    weights = prior.copy()
    if obs is not None:
        for i, q in enumerate(qsources):
            salient = plan_salient(q, start, cfg.planner)
            trace.salient[q.goal.gem] = serialize_salient(salient)
            weights[i] += utterance_likelihood(obs, salient, cfg.utterance, scorer)
        trace.utterance_conditioned = True
    trace.append(0, weights)
    return trace


def update_weights(
    trace: GoalPosteriorTrace,
    observed: ObservedTimestep,
    qsources: Sequence[QSource],
    cfg: InferenceConfig,
) -> GoalPosteriorTrace:
    """Fold one timestep's principal and assistant actions into every goal's weight."""
    timestep = trace.rows[-1].timestep + 1
    gridmap = qsources[0].gridmap
    state = trace.state
    weights = trace.log_weights.copy()
    for action in (observed.principal, observed.assistant):
        if action is None:
            continue
        problem = check_action(gridmap, state, action)
        if problem is not None:
            raise IllegalObservedActionError(f"{state.ply.value} cannot {action}: {problem}", timestep)
        for i, q in enumerate(qsources):
            weights[i] += boltzmann_policy(q, state, cfg.planner).log_prob(action)
        state = step(gridmap, state, action)
    trace.state = state
    trace.actions_conditioned += 1
    trace.append(timestep, weights)
    return trace


def run_stimulus(
    stimulus: Stimulus,
    mode: str = "with-instructions",
    cfg: InferenceConfig | None = None,
    pool: QSourcePool | None = None,
    scorer: Scorer | None = None,
    prior: Sequence[float] | None = None,
) -> GoalPosteriorTrace:
    mode = normalize_mode(mode)
    cfg = cfg or InferenceConfig()
    space = GoalSpace(list(stimulus.goals), None if prior is None else list(prior))
    if pool is None:
        qsources = make_qsources(stimulus.gridmap, space.goals, cfg.planner)
    else:
        qsources = pool.get(stimulus.gridmap, space.goals, cfg.planner)
    obs = None if mode == "without-instructions" else UtteranceObservation.from_text(stimulus.instruction)
    trace = init_weights(space, obs, qsources, cfg, scorer)
    trace.mode = mode
    trace.stimulus_id = stimulus.id
    trace.true_goal = stimulus.true_goal.gem
    trace.judgment_points = list(stimulus.judgment_points)
    if mode != "instructions-only":
        for observed in stimulus.trajectory:
            update_weights(trace, observed, qsources, cfg)
    return trace
