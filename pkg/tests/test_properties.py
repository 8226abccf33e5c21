"""Property-based checks of the softmax policy and the goal filter (1000+ cases each)."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from teamgoals.formats import ObservedTimestep
from teamgoals.gridworld import Goal, legal_actions, step
from teamgoals.inference import GoalSpace, InferenceConfig, init_weights, normalize_log_weights, update_weights
from teamgoals.planner import PlannerConfig, QSource, boltzmann_policy, q_value, softmax_log_probs
from teamgoals.utterance import UtteranceModelConfig, UtteranceObservation, score_with_template_backend

from oracles import log_softmax_at, random_maze

CASES = settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])

MAZE_SEEDS = (0, 1, 2, 3, 5, 8)
# Q values are negated costs in whole units of 0.2
Q_VALUES = st.lists(st.integers(-300, 0).map(lambda u: u / 5), min_size=1, max_size=8)
TEMPERATURES = st.floats(0.0625, 16)


@lru_cache(maxsize=None)
def maze(seed):
    return random_maze(seed)


@lru_cache(maxsize=None)
def sources(seed, heuristic="manhattan"):
    m = maze(seed)
    return tuple(QSource(m, Goal(g), heuristic=heuristic) for g in m.gems)


@st.composite
def walks(draw, max_steps=6):
    """A maze seed and a legal joint trajectory of whole timesteps from its start."""
    seed = draw(st.sampled_from(MAZE_SEEDS))
    m = maze(seed)
    state = m.initial_state()
    timesteps = []
    for _ in range(draw(st.integers(1, max_steps))):
        pair = []
        for _ in range(2):
            acts = legal_actions(m, state)
            a = acts[draw(st.integers(0, len(acts) - 1))]
            pair.append(a)
            state = step(m, state, a)
        timesteps.append(ObservedTimestep(*pair))
    return seed, timesteps


# ---------------------------------------------------------------- softmax


@CASES
@given(Q_VALUES, st.one_of(st.just(0.0), TEMPERATURES))
def test_softmax_normalizes(values, temperature):
    p = np.exp(softmax_log_probs(values, temperature))
    assert abs(math.fsum(p) - 1) <= 1e-9
    assert np.all(p >= 0)


@CASES
@given(walks(max_steps=4), TEMPERATURES)
def test_policy_normalizes_at_visited_states(walk, temperature):
    seed, timesteps = walk
    m = maze(seed)
    state = m.initial_state()
    cfg = PlannerConfig(temperature)
    for ts in timesteps:
        for action in (ts.principal, ts.assistant):
            for q in sources(seed):
                pol = boltzmann_policy(q, state, cfg)
                assert abs(math.fsum(pol.probs) - 1) <= 1e-9
                assert list(pol.actions) == legal_actions(m, state)
            state = step(m, state, action)


@CASES
@given(Q_VALUES, st.one_of(st.just(0.0), TEMPERATURES), st.floats(-1000, 1000))
def test_softmax_shift_invariance(values, temperature, shift):
    base = np.exp(softmax_log_probs(values, temperature))
    moved = np.exp(softmax_log_probs([v + shift for v in values], temperature))
    assert np.max(np.abs(base - moved)) <= 1e-9


@CASES
@given(Q_VALUES.filter(lambda v: len(v) >= 2), st.data())
def test_temperature_monotonicity(values, data):
    i = data.draw(st.integers(0, len(values) - 1))
    j = data.draw(st.integers(0, len(values) - 1))
    t1 = data.draw(TEMPERATURES)
    t2 = data.draw(st.floats(t1, 16))
    hi, lo = (i, j) if values[i] >= values[j] else (j, i)
    ratio1 = softmax_log_probs(values, t1)[hi] - softmax_log_probs(values, t1)[lo]
    ratio2 = softmax_log_probs(values, t2)[hi] - softmax_log_probs(values, t2)[lo]
    assert ratio1 >= ratio2 - 1e-9
    assert ratio2 >= -1e-12


# ---------------------------------------------------------------- goal filter


def _oracle_log_posterior(seed, timesteps, temperature, prior_log):
    """Flat product of every factor, each from its own hand-rolled softmax."""
    m = maze(seed)
    qs = sources(seed, "maze")
    terms = [[p] for p in prior_log]
    state = m.initial_state()
    for ts in timesteps:
        for action in (ts.principal, ts.assistant):
            acts = legal_actions(m, state)
            for g, q in enumerate(qs):
                values = [q_value(q, state, a) for a in acts]
                terms[g].append(log_softmax_at(values, acts.index(action), temperature))
            state = step(m, state, action)
    logw = [math.fsum(t) for t in terms]
    top = max(logw)
    z = top + math.log(math.fsum(math.exp(w - top) for w in logw))
    return np.asarray([w - z for w in logw]), terms


@CASES
@given(walks(), TEMPERATURES, st.floats(0.05, 0.95), st.randoms(use_true_random=False))
def test_evidence_order_invariance(walk, temperature, p0, rnd):
    seed, timesteps = walk
    m = maze(seed)
    space = GoalSpace([Goal(g) for g in m.gems], [p0, 1 - p0])
    cfg = InferenceConfig(planner=PlannerConfig(temperature))
    qs = list(sources(seed))
    trace = init_weights(space, None, qs, cfg)
    for ts in timesteps:
        update_weights(trace, ts, qs, cfg)
    sequential = np.log(trace.rows[-1].probs)

    oracle, terms = _oracle_log_posterior(seed, timesteps, temperature, list(space.log_prior))
    assert np.max(np.abs(sequential - oracle)) <= 1e-9
    # any order of folding the factors in gives the same posterior
    shuffled = []
    for t in terms:
        t = list(t)
        rnd.shuffle(t)
        acc = 0.0
        for x in t:
            acc += x
        shuffled.append(acc)
    assert np.max(np.abs(np.log(normalize_log_weights(shuffled)) - oracle)) <= 1e-9


@CASES
@given(st.lists(st.floats(-50, 0), min_size=2, max_size=6), st.lists(st.floats(-30, 0), min_size=1, max_size=10))
def test_common_factors_cancel(log_weights, common):
    w = np.asarray(log_weights)
    shifted = w.copy()
    for c in common:
        shifted = shifted + c
    assert np.max(np.abs(normalize_log_weights(w) - normalize_log_weights(shifted))) <= 1e-9


@lru_cache(maxsize=None)
def _fig1_sources():
    from teamgoals import data_path
    from teamgoals.formats import load_environment

    m = load_environment(data_path("maps", "fig1.map"))
    return tuple(QSource(m, Goal(g)) for g in m.gems)


INSTRUCTIONS = st.sampled_from([
    "Can you unlock the blue door for me?",
    "Pass me the red key.",
    "Open the yellow door and hand me the green key.",
    "Hello there.",
])


@CASES
@given(INSTRUCTIONS, st.floats(-40, 40), st.floats(0.05, 0.95))
def test_scaling_every_utterance_likelihood_cancels(text, offset, p_comm):
    qs = list(_fig1_sources())
    space = GoalSpace([q.goal for q in qs])
    cfg = InferenceConfig(utterance=UtteranceModelConfig(p_comm))
    obs = UtteranceObservation.from_text(text)
    base = init_weights(space, obs, qs, cfg, score_with_template_backend).rows[0].probs
    scaled = init_weights(space, obs, qs, cfg, lambda u, s: score_with_template_backend(u, s) + offset).rows[0].probs
    assert np.max(np.abs(np.asarray(base) - np.asarray(scaled))) <= 1e-9
