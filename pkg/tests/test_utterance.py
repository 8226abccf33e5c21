from __future__ import annotations

import math
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teamgoals.gridworld import WAIT, Action, Agent
from teamgoals.utterance import (
    VOCABULARY,
    SalientAction,
    UtteranceModelConfig,
    UtteranceObservation,
    communicate_log_prob,
    content_words,
    extract_salient,
    load_default_examples,
    score_with_template_backend,
    serialize_salient,
    templates,
    utterance_likelihood,
)

from oracles import make_map

R, H = Agent.ASSISTANT, Agent.PRINCIPAL

# keys numbered row-major: key1 green, key2 red, key3 blue; one red door
GOLDEN_MAP = make_map(
    ["#######", "#hgxR1#", "#b...r#", "#######"],
    {"g": "green", "x": "red", "b": "blue", "R": "red", "1": "red"},
)


def handover(key, color):
    return SalientAction("handover", R, (key,), ((key, color),))


def unlock(key, door, color):
    return SalientAction("unlock", R, (key, door), ((door, color),))


# ------------------------------------------------------------------ goldens


def test_golden_single_handover():
    assert serialize_salient([handover("key2", "blue")]) == "(handover robot human key2) where (iscolor key2 blue)"


def test_golden_unlock():
    assert serialize_salient([unlock("key1", "door1", "red")]) == "(unlockr robot key1 door1) where (iscolor door1 red)"


def test_golden_two_handovers():
    text = serialize_salient([handover("key1", "green"), handover("key2", "red")])
    assert text == (
        "(handover robot human key1) (handover robot human key2) "
        "where (iscolor key1 green) (iscolor key2 red)"
    )


def test_empty_list_serializes_to_empty_string():
    assert serialize_salient([]) == ""


def test_repeated_item_gets_one_color_clause():
    text = serialize_salient([handover("key1", "red"), unlock("key1", "door1", "red"), handover("key1", "red")])
    assert text.count("(iscolor key1 red)") == 1


# ---------------------------------------------------------- salient extraction


def test_movement_only_plan_has_nothing_salient():
    plan = [(H, Action("right")), (R, WAIT), (H, Action("down")), (R, Action("left"))]
    assert extract_salient(plan, GOLDEN_MAP) == []


def test_extract_handover_with_color():
    plan = [(H, WAIT), (R, Action("handover", ("key3",))), (H, Action("right"))]
    assert extract_salient(plan, GOLDEN_MAP) == [handover("key3", "blue")]


def test_extract_keeps_plan_order_and_drops_principal_steps():
    plan = [
        (H, Action("handover", ("key3",))),  # principal handovers are not salient
        (R, Action("handover", ("key1",))),
        (H, WAIT),
        (R, Action("pickup", ("key2",))),
        (R, Action("handover", ("key2",))),
        (H, Action("unlock", ("key2", "door1"))),
    ]
    sal = extract_salient(plan, GOLDEN_MAP)
    assert sal == [handover("key1", "green"), handover("key2", "red")]
    assert serialize_salient(sal).endswith("where (iscolor key1 green) (iscolor key2 red)")


def test_unlock_binds_the_door_color():
    sal = extract_salient([(R, Action("unlock", ("key2", "door1")))], GOLDEN_MAP)
    assert sal == [unlock("key2", "door1", "red")]


# ------------------------------------------------------------------ round trip

_PRED = re.compile(r"\((handover|unlockr) robot human (\S+)\)|\(unlockr robot (\S+) (\S+)\)")


def _parse_back(text: str) -> list[SalientAction]:
    """Test-only inverse of serialize_salient."""
    if not text:
        return []
    body, where = text.split(" where ")
    colors = dict(re.findall(r"\(iscolor (\S+) (\S+)\)", where))
    out = []
    for verb, key, ukey, udoor in _PRED.findall(body):
        if verb == "handover":
            out.append(handover(key, colors[key]))
        else:
            out.append(unlock(ukey, udoor, colors[udoor]))
    return out


_COLORS = st.sampled_from(["red", "blue", "yellow", "green"])


@st.composite
def salient_lists(draw):
    n = draw(st.integers(0, 4))
    colors: dict[str, str] = {}
    out = []
    for _ in range(n):
        key = f"key{draw(st.integers(1, 3))}"
        if draw(st.booleans()):
            color = colors.setdefault(key, draw(_COLORS))
            out.append(handover(key, color))
        else:
            door = f"door{draw(st.integers(1, 3))}"
            color = colors.setdefault(door, draw(_COLORS))
            out.append(unlock(key, door, color))
    return out


@settings(max_examples=300, deadline=None)
@given(salient_lists())
def test_serialization_round_trip(sal):
    assert _parse_back(serialize_salient(sal)) == sal


# ------------------------------------------------------------- template scorer

BLUE_DOOR = "(unlockr robot key1 door1) where (iscolor door1 blue)"
RED_DOOR = "(unlockr robot key1 door1) where (iscolor door1 red)"


def test_blue_door_instruction_prefers_blue_unlock():
    u = "Can you unlock the blue door for me?"
    assert score_with_template_backend(u, BLUE_DOOR) > score_with_template_backend(u, RED_DOOR)


def test_blue_mention_scores_below_under_red_only_plan():
    u = "Pass me the blue key."
    red = "(handover robot human key1) where (iscolor key1 red)"
    blue = "(handover robot human key1) where (iscolor key1 blue)"
    assert score_with_template_backend(u, red) < score_with_template_backend(u, blue)


def test_exact_template_is_maximal_for_its_input():
    serialized = "(handover robot human key1) (handover robot human key2) where (iscolor key1 green) (iscolor key2 red)"
    rivals = [
        "(handover robot human key1) where (iscolor key1 green)",
        "(handover robot human key1) where (iscolor key1 blue)",
        "(unlockr robot key1 door1) where (iscolor door1 red)",
        BLUE_DOOR,
        "",
    ]
    for t in templates(serialized):
        own = score_with_template_backend(t, serialized)
        assert all(own > score_with_template_backend(t, r) for r in rivals)


def test_empty_input_gives_the_smoothing_floor():
    u = "Hand me the blue key and open the red door."
    n = len(content_words(u))
    floor = n * math.log(1 / len(VOCABULARY))
    assert score_with_template_backend(u, "") == pytest.approx(floor, abs=1e-12)
    # any non-empty plan that mentions matching words beats the floor
    assert score_with_template_backend(u, "(handover robot human key1) where (iscolor key1 blue)") > floor


def test_content_words_ignore_function_words_and_plurals():
    assert content_words("Could you PLEASE hand me the keys, then the doors?") == ["hand", "key", "door"]


def test_template_scorer_is_deterministic():
    u = "Please open the blue door."
    assert score_with_template_backend(u, BLUE_DOOR) == score_with_template_backend(u, BLUE_DOOR)


# ------------------------------------------------------------- full likelihood


def test_silent_branch_with_salient_steps():
    cfg = UtteranceModelConfig(0.95)
    obs = UtteranceObservation(False)
    sal = [handover("key1", "green"), handover("key2", "red")]
    assert utterance_likelihood(obs, sal, cfg) == pytest.approx(math.log(0.05), abs=1e-15)


def test_speaking_with_nothing_salient():
    cfg = UtteranceModelConfig(0.95)
    u = "Pass me the red key."
    got = utterance_likelihood(UtteranceObservation.from_text(u), [], cfg)
    assert got == pytest.approx(math.log(0.05) + score_with_template_backend(u, ""), abs=1e-12)


def test_speaking_adds_the_scorer_term():
    cfg = UtteranceModelConfig(0.9)
    calls = []

    def scorer(u, serialized):
        calls.append((u, serialized))
        return -2.5

    sal = [unlock("key1", "door1", "red")]
    got = utterance_likelihood(UtteranceObservation.from_text("open it"), sal, cfg, scorer)
    assert got == pytest.approx(math.log(0.9) - 2.5)
    assert calls == [("open it", RED_DOOR)]


@pytest.mark.parametrize("k", [0, 1, 3])
@pytest.mark.parametrize("p", [0.05, 0.5, 0.95])
def test_communicate_branches_sum_to_one(k, p):
    total = math.exp(communicate_log_prob(True, k, p)) + math.exp(communicate_log_prob(False, k, p))
    assert total == pytest.approx(1.0, abs=1e-15)


def test_observation_invariants():
    assert UtteranceObservation.from_text("") == UtteranceObservation(False)
    assert UtteranceObservation.from_text(None) == UtteranceObservation(False)
    with pytest.raises(ValueError):
        UtteranceObservation(False, "hello")


def test_config_validation():
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            UtteranceModelConfig(bad)
    with pytest.raises(ValueError):
        UtteranceModelConfig(backend="gpt")
    with pytest.raises(ValueError):
        UtteranceModelConfig(backend="external-lm", examples=())
    with pytest.raises(ValueError, match="explicit scorer"):
        utterance_likelihood(UtteranceObservation.from_text("hi"), [], UtteranceModelConfig(backend="external-lm"))


def test_default_examples_include_the_three_reference_pairs():
    examples = load_default_examples()
    assert len(examples) == 7
    inputs = [i for i, _ in examples]
    assert "(handover robot human key2) where (iscolor key2 blue)" in inputs
    assert "(unlockr robot key1 door1) where (iscolor door1 red)" in inputs
    assert (
        "(handover robot human key1) (handover robot human key2) where (iscolor key1 green) (iscolor key2 red)"
        in inputs
    )
