"""Regenerate the bundled stimulus set from the bundled maps.

Each stimulus pairs an instruction with the team's zero-temperature joint
plan for the true goal, cut into timesteps (principal action, assistant
action). Judgment points are spread evenly over the trajectory.

    python scripts/build_dataset.py [--out src/teamgoals/data/stimuli]
"""

from __future__ import annotations

import argparse
from pathlib import Path

from teamgoals.formats import ObservedTimestep, Stimulus, dump_stimulus, load_environment
from teamgoals.gridworld import Goal
from teamgoals.planner import QSource, rollout_optimal

DATA = Path(__file__).resolve().parents[1] / "src" / "teamgoals" / "data"

# id, map, true gem, number of judgment points, instruction
STIMULI = [
    ("s01", "fig1", "gem2", 5, "Can you unlock the blue door for me?"),
    ("s02", "fig1", "gem1", 4, "Please open the blue door."),
    ("s03", "fig1", "gem4", 4, "Unlock the red door for me."),
    ("s04", "corridor", "gem1", 4, "Pass me the red key."),
    ("s05", "corridor", "gem4", 5, "Can you hand me the green key?"),
    ("s06", "corridor", "gem2", 4, "Give me the blue key, please."),
    ("s07", "layered", "gem2", 5, "Can you pass me the red and the blue key?"),
    ("s08", "layered", "gem3", 4, "Bring me the yellow key."),
    ("s09", "layered", "gem4", 5, "Could you get me the yellow key and the green key?"),
    ("s10", "layered", "gem1", 4, "Pass me the red key."),
    ("s11", "handover", "gem1", 4, "Hand me the red key."),
    ("s12", "handover", "gem2", 5, "Can you pass me the blue key?"),
    ("s13", "handover", "gem4", 4, "Open the green door for me."),
    ("s14", "twins", "gem1", 5, "Can you pass me the blue key?"),
    ("s15", "twins", "gem3", 4, "Hand me the red key."),
    ("s16", "twins", "gem4", 4, "Bring me the red key, please."),
    ("s17", "mixed", "gem1", 4, "Pass me the red key."),
    ("s18", "mixed", "gem2", 5, "Can you give me the green key?"),
    ("s19", "mixed", "gem3", 5, "Hand me the green key and then the blue key."),
    ("s20", "corridor", "gem3", 4, "Pass me the yellow key."),
]


def judgment_points(n: int, k: int) -> list[int]:
    points = sorted({round(i * n / (k - 1)) for i in range(k)})
    if len(points) != k:
        raise ValueError(f"trajectory of {n} timesteps is too short for {k} judgment points")
    return points


def build(stim_id: str, map_name: str, gem: str, k: int, instruction: str, out: Path) -> Stimulus:
    map_path = DATA / "maps" / f"{map_name}.map"
    gridmap = load_environment(map_path)
    plan = rollout_optimal(QSource(gridmap, Goal(gem)), gridmap.initial_state())
    actions = [a for _, a in plan]
    trajectory = [
        ObservedTimestep(actions[i], actions[i + 1] if i + 1 < len(actions) else None)
        for i in range(0, len(actions), 2)
    ]
    return Stimulus(
        id=stim_id,
        gridmap=gridmap,
        map_path=f"../maps/{map_name}.map",
        instruction=instruction,
        trajectory=trajectory,
        judgment_points=judgment_points(len(trajectory), k),
        true_goal=Goal(gem),
    )


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=DATA / "stimuli")
    args = parser.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    for row in STIMULI:
        stim = build(*row, out=args.out)
        (args.out / f"{stim.id}.json").write_text(dump_stimulus(stim), encoding="utf-8")
        print(f"{stim.id}: {len(stim.trajectory)} timesteps, judgments at {stim.judgment_points}")


if __name__ == "__main__":
    main()
