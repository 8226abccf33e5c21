"""Acceptance criteria 1-9, one test each.

Every test prints ``criterion N: PASS`` or ``criterion N: FAIL`` and the
lines are repeated in the terminal summary.
"""

from __future__ import annotations

import json
import time
from contextlib import contextmanager

import numpy as np

from teamgoals import data_path
from teamgoals.analysis import (
    accuracy_table,
    bootstrap_ci,
    brier,
    model_records,
    pearson,
    synthesize_responses,
)
from teamgoals.cli import main
from teamgoals.formats import write_human_csv
from teamgoals.gridworld import Agent, Goal, legal_actions
from teamgoals.inference import InferenceConfig, run_stimulus
from teamgoals.planner import PlannerConfig, QSource, plan_cost, q_value, rollout_optimal
from teamgoals.utterance import (
    COLOR_WORDS,
    HANDOVER_VERBS,
    UNLOCK_VERBS,
    SalientAction,
    content_words,
    parse_serialized,
    serialize_salient,
)

import test_properties
from oracles import cost_to_go_table, monolithic_log_posterior, oracle_q, random_maze

RESULTS: dict[int, str] = {}


@contextmanager
def criterion(n: int, title: str):
    try:
        yield
    except BaseException:
        RESULTS[n] = f"criterion {n}: FAIL  {title}"
        print(RESULTS[n])
        raise
    RESULTS[n] = f"criterion {n}: PASS  {title}"
    print(RESULTS[n])


# ---------------------------------------------------------------- 1


def test_criterion_1_filter_matches_monolithic_oracle(stimuli, dataset_traces):
    with criterion(1, "sequential filter equals the monolithic product within 1e-9 (log space)"):
        worst = 0.0
        slowest = 0.0
        for mode in ("with-instructions", "without-instructions", "instructions-only"):
            for stim, trace in zip(stimuli, dataset_traces[mode]):
                start = time.perf_counter()
                oracle = monolithic_log_posterior(stim, mode, 1.0)
                slowest = max(slowest, time.perf_counter() - start)
                gap = float(np.max(np.abs(np.log(trace.rows[-1].probs) - oracle)))
                worst = max(worst, gap)
                assert gap < 1e-9, (stim.id, mode, gap)
        print(f"  max |log P - log P_oracle| = {worst:.2e}; slowest oracle run {slowest:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_planner_matches_exhaustive_dijkstra():
    with criterion(2, "q_value equals exhaustive Dijkstra on 20+ random mazes"):
        start_time = time.perf_counter()
        n_mazes = n_checks = 0
        for seed in range(1000, 1024):
            m = random_maze(seed)
            assert m.width <= 7 and m.height <= 7 and len(m.gems) == 2
            n_mazes += 1
            for goal in map(Goal, m.gems):
                dist, edges = cost_to_go_table(m, goal)
                q = QSource(m, goal)
                start = m.initial_state()
                if start in dist:
                    assert round(plan_cost(rollout_optimal(q, start)) * 5) == dist[start]
                states = [s for s in edges if goal.gem not in s.gems]
                for s in [start] + states[:: max(1, len(states) // 40)]:
                    for a in legal_actions(m, s):
                        assert q_value(q, s, a) == oracle_q(dist, m, s, a)
                        n_checks += 1
        elapsed = time.perf_counter() - start_time
        print(f"  {n_mazes} mazes, {n_checks} (state, action) pairs, {elapsed:.1f}s")
        assert n_mazes >= 20
        assert elapsed < 60


# ---------------------------------------------------------------- 3


def test_criterion_3_uniform_prior_row(dataset_traces):
    with criterion(3, "without instructions at t=first: P(g_true)=0.25 (SD 0), Brier=0.1875"):
        rows = accuracy_table(model_records(dataset_traces["without-instructions"]))
        first = next(r for r in rows if r.point == "first")
        print(f"  P(g_true) {first.p_true_mean} ({first.p_true_sd}), Brier {first.brier_mean} ({first.brier_sd})")
        assert first.p_true_mean == 0.25 and first.p_true_sd == 0.0
        assert first.brier_mean == 0.1875 and first.brier_sd == 0.0
        assert first.n_stimuli == 20


# ---------------------------------------------------------------- 4


def test_criterion_4_final_judgments_converge(dataset_traces):
    with criterion(4, "mean final-judgment P(g_true) >= 0.9 in both modes at T=1"):
        means = {}
        for mode in ("with-instructions", "without-instructions"):
            rows = accuracy_table(model_records(dataset_traces[mode]))
            last = next(r for r in rows if r.point == "last")
            means[mode] = last.p_true_mean
            print(f"  {mode}: P(g_true) {last.p_true_mean:.4f} ({last.p_true_sd:.4f}), Brier {last.brier_mean:.4f}")
        assert all(v >= 0.9 for v in means.values())


# ---------------------------------------------------------------- 5


def _instruction_demands(text: str) -> tuple[set[str], set[str]]:
    words = content_words(text)
    colors = {w for w in words if w in COLOR_WORDS}
    kinds = {"handover" for w in words if w in HANDOVER_VERBS} | {"unlock" for w in words if w in UNLOCK_VERBS}
    return colors, kinds


def _consistent(serialized: str, colors: set[str], kinds: set[str]) -> bool:
    steps = parse_serialized(serialized)
    bound = {c for _, items in steps for c in items.values()}
    plan_kinds = {kind for kind, _ in steps}
    return colors <= bound and kinds <= plan_kinds


def test_criterion_5_instructions_are_informative(stimuli, dataset_traces):
    with criterion(5, "instruction raises P(g_true) above 0.25 and puts top mass on consistent goals"):
        checked = 0
        for stim, trace, without in zip(stimuli, dataset_traces["with-instructions"],
                                        dataset_traces["without-instructions"]):
            if not stim.instruction:
                continue
            colors, kinds = _instruction_demands(stim.instruction)
            consistent = {g for g in trace.goals if _consistent(trace.salient[g], colors, kinds)}
            if not consistent or len(consistent) == len(trace.goals):
                continue
            checked += 1
            probs = dict(zip(trace.goals, trace.rows[0].probs))
            p_without = dict(zip(without.goals, without.rows[0].probs))[stim.true_goal.gem]
            top = sorted(trace.goals, key=lambda g: -probs[g])[: min(2, len(consistent))]
            print(f"  {stim.id}: P0(true)={probs[stim.true_goal.gem]:.3f} consistent={sorted(consistent)} top={top}")
            assert probs[stim.true_goal.gem] > p_without == 0.25, stim.id
            assert set(top) <= consistent, stim.id
        assert checked >= 10


# ---------------------------------------------------------------- 6


def test_criterion_6_serialization_goldens():
    with criterion(6, "three worked serializations reproduce byte-exactly"):
        r = Agent.ASSISTANT

        def handover(key, color):
            return SalientAction("handover", r, (key,), ((key, color),))

        cases = [
            ([handover("key2", "blue")], "(handover robot human key2) where (iscolor key2 blue)"),
            ([SalientAction("unlock", r, ("key1", "door1"), (("door1", "red"),))],
             "(unlockr robot key1 door1) where (iscolor door1 red)"),
            ([handover("key1", "green"), handover("key2", "red")],
             "(handover robot human key1) (handover robot human key2) where (iscolor key1 green) (iscolor key2 red)"),
        ]
        for salient, expected in cases:
            assert serialize_salient(salient).encode() == expected.encode()


# ---------------------------------------------------------------- 7


PROPERTIES = (
    "test_softmax_normalizes",
    "test_policy_normalizes_at_visited_states",
    "test_softmax_shift_invariance",
    "test_temperature_monotonicity",
    "test_evidence_order_invariance",
    "test_common_factors_cancel",
    "test_scaling_every_utterance_likelihood_cancels",
)


def test_criterion_7_property_suite():
    with criterion(7, "softmax and filter properties hold on 1000 generated cases each"):
        for name in PROPERTIES:
            prop = getattr(test_properties, name)
            assert prop._hypothesis_internal_use_settings.max_examples >= 1000
            prop()
            print(f"  {name}: ok")


# ---------------------------------------------------------------- 8


def test_criterion_8_metrics():
    with criterion(8, "Brier, Pearson and seeded bootstrap reference checks"):
        assert brier([0.25] * 4, 0) == 0.1875
        xs = [0.2, 0.4, 0.1, 0.8]
        assert abs(pearson(xs, xs) - 1.0) <= 1e-3
        assert abs(pearson(xs, [1 - x for x in xs]) + 1.0) <= 1e-3
        assert abs(pearson([1, 2, 3], [2, 2, 4]) - 0.866) <= 1e-3
        rng = np.random.default_rng(7)
        x = rng.random(60)
        pts = np.column_stack([x, x + 0.3 * rng.random(60)])
        a = bootstrap_ci(pts, seed=5)
        b = bootstrap_ci(pts.copy(), seed=5)
        assert np.asarray(a).tobytes() == np.asarray(b).tobytes()
        print(f"  bootstrap interval {a}")


# ---------------------------------------------------------------- 9


def test_criterion_9_eval_pipeline_on_synthetic_humans(stimuli, shared_pool, tmp_path, capsys):
    with criterion(9, "eval end to end: synthetic T=2 humans vs T=1 model, R > 0.9"):
        cfg = InferenceConfig(planner=PlannerConfig(2.0))
        noisy_model = [run_stimulus(s, mode, cfg, shared_pool)
                       for mode in ("with-instructions", "without-instructions") for s in stimuli]
        human_csv = tmp_path / "synthetic_humans.csv"
        write_human_csv(human_csv, synthesize_responses(noisy_model, n_participants=20, noise=0.3, seed=0))
        out = tmp_path / "eval"
        code = main(["eval", str(data_path("stimuli")), "--human", str(human_csv), "--temperature", "1.0",
                     "--out", str(out)])
        captured = capsys.readouterr()
        assert code == 0, captured.err
        report = json.loads((out / "report.json").read_text())
        rs = {c["label"]: c for c in report["correlations"]}
        for label, c in rs.items():
            print(f"  R {label}: {c['r']:.3f} [{c['ci_low']:.3f}, {c['ci_high']:.3f}] n={c['n_points']}")
        assert report["temperature"] == 1.0
        assert rs["with-instructions"]["r"] > 0.9
        assert rs["without-instructions"]["r"] > 0.9
        for name in ("accuracy_table.csv", "correlations.csv", "scatter.csv", "manifest.json"):
            assert (out / name).exists()
