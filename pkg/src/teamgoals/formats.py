"""ASCII maps, stimulus JSON and human-response CSV: parsing, validation, writing.

Map files are a grid block, a blank line, then a legend block::

    ; comment lines start with a semicolon
    #########
    #h..B..1#
    #...#...#
    #r.b#..2#
    #########

    B blue
    b blue
    1 yellow
    2 red

Grid symbols: ``#`` wall, ``.`` floor, ``h`` principal start, ``r`` assistant
start, an uppercase letter a door, a lowercase letter (other than h/r) a key,
a digit ``n`` the gem ``gem<n>``. Every letter and digit used in the grid
needs a ``<symbol> <color>`` legend line. Keys and doors are numbered in
row-major order (``key1``, ``door1``, ...).
"""

from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .gridworld import (
    Action,
    Agent,
    GridMap,
    Goal,
    IllegalActionError,
    Item,
    ItemKind,
    WorldState,
    neighbors,
    step,
)

log = logging.getLogger(__name__)

RESERVED = {"#", ".", "h", "r"}


class FormatError(ValueError):
    pass


class MapParseError(FormatError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class MapValidationError(FormatError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid map: " + "; ".join(problems))
        self.problems = problems


class ReplayError(FormatError):
    def __init__(self, message: str, timestep: int):
        super().__init__(f"timestep {timestep}: {message}")
        self.timestep = timestep


# --------------------------------------------------------------------------- maps


def parse_map(text: str, name: str = "") -> GridMap:
    lines = text.splitlines()
    grid: list[tuple[int, str]] = []
    legend: list[tuple[int, str]] = []
    section = "grid"
    for lineno, raw in enumerate(lines, start=1):
        stripped = raw.strip()
        if stripped.startswith(";"):
            continue
        if not stripped:
            if grid:
                section = "legend"
            continue
        (grid if section == "grid" else legend).append((lineno, raw.rstrip()))
    if not grid:
        raise MapParseError("no grid rows found", 1, 1)

    colors: dict[str, str] = {}
    for lineno, raw in legend:
        parts = raw.split()
        if len(parts) != 2 or len(parts[0]) != 1:
            raise MapParseError(f"legend lines are '<symbol> <color>', got {raw.strip()!r}", lineno, 1)
        sym, color = parts
        if sym in RESERVED or not sym.isalnum():
            raise MapParseError(f"symbol {sym!r} cannot carry a color", lineno, 1)
        if sym in colors:
            raise MapParseError(f"duplicate legend symbol {sym!r}", lineno, 1)
        colors[sym] = color.lower()

    width = len(grid[0][1])
    walls = set()
    starts: dict[Agent, tuple[int, int]] = {}
    items: dict[str, Item] = {}
    cells: dict[str, tuple[int, int]] = {}
    symbols: dict[str, str] = {}
    counts = {ItemKind.KEY: 0, ItemKind.DOOR: 0}
    duplicates: list[str] = []
    for y, (lineno, row) in enumerate(grid):
        if len(row) != width:
            raise MapParseError(f"row has {len(row)} cells, expected {width}", lineno, min(len(row), width) + 1)
        for x, ch in enumerate(row):
            col = x + 1
            if ch == "#":
                walls.add((x, y))
            elif ch == ".":
                pass
            elif ch in ("h", "r"):
                agent = Agent.PRINCIPAL if ch == "h" else Agent.ASSISTANT
                if agent in starts:
                    raise MapParseError(f"second start for {agent.value}", lineno, col)
                starts[agent] = (x, y)
            elif ch.isdigit() or ch.isalpha():
                if ch not in colors:
                    raise MapParseError(f"symbol {ch!r} has no legend entry", lineno, col)
                if ch.isdigit():
                    kind, item_id = ItemKind.GEM, f"gem{ch}"
                    if item_id in items:
                        duplicates.append(f"duplicate item id {item_id} at line {lineno}, column {col}")
                        continue
                else:
                    kind = ItemKind.DOOR if ch.isupper() else ItemKind.KEY
                    counts[kind] += 1
                    item_id = f"{kind.value}{counts[kind]}"
                items[item_id] = Item(item_id, kind, colors[ch])
                cells[item_id] = (x, y)
                symbols[item_id] = ch
            else:
                raise MapParseError(f"unexpected character {ch!r}", lineno, col)
    for agent in Agent:
        if agent not in starts:
            raise MapParseError(f"no start cell for {agent.value}", grid[0][0], 1)
    gridmap = GridMap(
        width=width,
        height=len(grid),
        walls=frozenset(walls),
        items=items,
        item_cells=cells,
        starts=(starts[Agent.PRINCIPAL], starts[Agent.ASSISTANT]),
        name=name,
        symbols=symbols,
    )
    problems = duplicates + gridmap.validate()
    if problems:
        raise MapValidationError(problems)
    return gridmap


def load_environment(path: str | Path) -> GridMap:
    path = Path(path)
    gridmap = parse_map(path.read_text(encoding="utf-8"), name=path.stem)
    for note in reachability_report(gridmap):
        log.info("%s: %s", path.name, note)
    return gridmap


def dump_map(gridmap: GridMap) -> str:
    symbols = dict(gridmap.symbols)
    if set(symbols) != set(gridmap.items):
        symbols = _default_symbols(gridmap)
    rows = []
    by_cell = {cell: item for item, cell in gridmap.item_cells.items()}
    for y in range(gridmap.height):
        row = []
        for x in range(gridmap.width):
            cell = (x, y)
            if cell in gridmap.walls:
                row.append("#")
            elif cell == gridmap.starts[0]:
                row.append("h")
            elif cell == gridmap.starts[1]:
                row.append("r")
            elif cell in by_cell:
                row.append(symbols[by_cell[cell]])
            else:
                row.append(".")
        rows.append("".join(row))
    legend = sorted({(symbols[i], gridmap.items[i].color) for i in gridmap.items})
    return "\n".join(rows) + "\n\n" + "\n".join(f"{s} {c}" for s, c in legend) + "\n"


def _default_symbols(gridmap: GridMap) -> dict[str, str]:
    letters = iter(c for c in "abcdefgijklmnopqstuvwxyz")
    by_color: dict[str, str] = {}
    symbols = {}
    for item_id, item in sorted(gridmap.items.items()):
        if item.kind is ItemKind.GEM:
            symbols[item_id] = item_id[len("gem"):]
            continue
        if item.color not in by_color:
            by_color[item.color] = next(letters)
        letter = by_color[item.color]
        symbols[item_id] = letter.upper() if item.kind is ItemKind.DOOR else letter
    return symbols


def maps_equal(a: GridMap, b: GridMap) -> bool:
    return (
        a.width == b.width
        and a.height == b.height
        and a.walls == b.walls
        and dict(a.items) == dict(b.items)
        and dict(a.item_cells) == dict(b.item_cells)
        and a.starts == b.starts
    )


def reachability_report(gridmap: GridMap) -> list[str]:
    """Human-readable notes on how each gem can be reached.

    Flags gems the principal cannot reach alone, and door colors with no
    key on the map.
    """
    notes = []
    key_colors = {gridmap.color(k) for k in gridmap.ids(ItemKind.KEY)}
    for door in gridmap.ids(ItemKind.DOOR):
        if gridmap.color(door) not in key_colors:
            notes.append(f"warning: {door} ({gridmap.color(door)}) has no same-colored key")
    open_cells = _region(gridmap, gridmap.starts[0], through_doors=False)
    robot_cells = _region(gridmap, gridmap.starts[1], through_doors=False)
    for gem in gridmap.gems:
        cell = gridmap.item_cells[gem]
        if cell in open_cells:
            notes.append(f"{gem} ({gridmap.color(gem)}) is directly reachable by the principal")
            continue
        if cell not in _region(gridmap, gridmap.starts[0], through_doors=True):
            notes.append(f"warning: {gem} ({gridmap.color(gem)}) is walled off")
            continue
        own_keys = [k for k in gridmap.ids(ItemKind.KEY) if gridmap.item_cells[k] in open_cells]
        robot_keys = [k for k in gridmap.ids(ItemKind.KEY) if gridmap.item_cells[k] in robot_cells]
        if robot_keys and not own_keys:
            notes.append(
                f"{gem} ({gridmap.color(gem)}) lies behind doors and needs assistant cooperation "
                f"(keys on the assistant side only: {', '.join(robot_keys)})"
            )
        else:
            notes.append(f"{gem} ({gridmap.color(gem)}) lies behind doors")
    return notes


def _region(gridmap: GridMap, start, through_doors: bool) -> set:
    seen = {start}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        for nb in neighbors(cell):
            if nb in seen or not gridmap.in_bounds(nb) or nb in gridmap.walls:
                continue
            if not through_doors and nb in gridmap.door_at:
                continue
            seen.add(nb)
            queue.append(nb)
    return seen


# ---------------------------------------------------------------------- stimuli


@dataclass(frozen=True)
class ObservedTimestep:
    """One timestep: a principal ply then an assistant ply.

    The assistant action may be missing only on the final timestep.
    """

    principal: Action
    assistant: Action | None


@dataclass
class Stimulus:
    id: str
    gridmap: GridMap
    map_path: str
    instruction: str | None
    trajectory: list[ObservedTimestep]
    judgment_points: list[int]
    true_goal: Goal
    goals: list[Goal] = field(default_factory=list)

    def __post_init__(self):
        if not self.goals:
            self.goals = [Goal(g) for g in self.gridmap.gems]

    def states(self) -> list[WorldState]:
        """World states at the start of every timestep, plus the final state."""
        return replay(self.gridmap, self.trajectory)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "map": self.map_path,
            "instruction": self.instruction,
            "goal": self.true_goal.gem,
            "goals": [g.gem for g in self.goals],
            "judgment_points": list(self.judgment_points),
            "trajectory": [
                [str(ts.principal), None if ts.assistant is None else str(ts.assistant)]
                for ts in self.trajectory
            ],
        }


def replay(gridmap: GridMap, trajectory: Iterable[ObservedTimestep]) -> list[WorldState]:
    trajectory = list(trajectory)
    state = gridmap.initial_state()
    states = [state]
    for t, ts in enumerate(trajectory, start=1):
        if ts.assistant is None and t != len(trajectory):
            raise ReplayError("assistant action missing before the final timestep", t)
        try:
            state = step(gridmap, state, ts.principal)
            if ts.assistant is not None:
                state = step(gridmap, state, ts.assistant)
        except IllegalActionError as exc:
            raise ReplayError(str(exc), t) from None
        states.append(state)
    return states


def stimulus_from_dict(data: dict, base_dir: str | Path = ".", gridmap: GridMap | None = None) -> Stimulus:
    for key in ("id", "map", "goal", "trajectory", "judgment_points"):
        if key not in data:
            raise FormatError(f"stimulus is missing {key!r}")
    if gridmap is None:
        gridmap = load_environment(Path(base_dir) / data["map"])
    trajectory = []
    for t, pair in enumerate(data["trajectory"], start=1):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise FormatError(f"timestep {t} must be a [principal, assistant] pair")
        try:
            principal = Action.parse(pair[0])
            assistant = None if pair[1] is None else Action.parse(pair[1])
        except ValueError as exc:
            raise ReplayError(str(exc), t) from None
        trajectory.append(ObservedTimestep(principal, assistant))
    goals = [Goal(g) for g in data.get("goals") or gridmap.gems]
    for goal in goals:
        if goal.gem not in gridmap.gems:
            raise FormatError(f"goal {goal.gem} is not a gem on map {data['map']}")
    true_goal = Goal(data["goal"])
    if true_goal not in goals:
        raise FormatError(f"true goal {true_goal.gem} is not among the candidate goals")
    points = [int(p) for p in data["judgment_points"]]
    if not points:
        raise FormatError("stimulus needs at least one judgment point")
    if any(b <= a for a, b in zip(points, points[1:])):
        raise FormatError(f"judgment points must be strictly increasing: {points}")
    if points[0] < 0 or points[-1] > len(trajectory):
        raise FormatError(f"judgment points {points} fall outside timesteps 0..{len(trajectory)}")
    if not 4 <= len(points) <= 5:
        log.warning("stimulus %s has %d judgment points (4-5 expected)", data["id"], len(points))
    stim = Stimulus(
        id=str(data["id"]),
        gridmap=gridmap,
        map_path=data["map"],
        instruction=data.get("instruction") or None,
        trajectory=trajectory,
        judgment_points=points,
        true_goal=true_goal,
        goals=goals,
    )
    stim.states()
    return stim


def load_stimulus(path: str | Path, map_cache: dict | None = None) -> Stimulus:
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    gridmap = None
    if map_cache is not None and "map" in data:
        map_path = (path.parent / data["map"]).resolve()
        gridmap = map_cache.get(map_path)
        if gridmap is None:
            gridmap = map_cache[map_path] = load_environment(map_path)
    return stimulus_from_dict(data, base_dir=path.parent, gridmap=gridmap)


def load_stimuli(path: str | Path) -> list[Stimulus]:
    """Load one stimulus file, or every ``*.json`` stimulus in a directory (sorted by id)."""
    path = Path(path)
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    cache: dict = {}
    stimuli = [load_stimulus(f, cache) for f in files]
    return sorted(stimuli, key=lambda s: s.id)


def dump_stimulus(stim: Stimulus) -> str:
    return json.dumps(stim.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- human responses


HUMAN_CSV_FIELDS = ("participant_id", "stimulus_id", "judgment_index", "condition", "selected_goals")
CONDITIONS = ("with-instructions", "without-instructions")
_CONDITION_ALIASES = {
    "with": "with-instructions",
    "with-instructions": "with-instructions",
    "without": "without-instructions",
    "without-instructions": "without-instructions",
}


def normalize_condition(text: str) -> str:
    try:
        return _CONDITION_ALIASES[text.strip().lower()]
    except KeyError:
        raise FormatError(f"unknown condition {text!r}") from None


def read_human_csv(path: str | Path):
    from .analysis import ALL_GOALS, HumanResponse

    responses = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(HUMAN_CSV_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"human CSV is missing columns: {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            raw = row["selected_goals"].strip()
            if not raw:
                raise FormatError(f"line {lineno}: empty selection")
            selected = ALL_GOALS if raw.upper() == "ALL" else tuple(s.strip() for s in raw.split(";") if s.strip())
            responses.append(
                HumanResponse(
                    participant_id=row["participant_id"],
                    stimulus_id=row["stimulus_id"],
                    judgment_index=int(row["judgment_index"]),
                    condition=normalize_condition(row["condition"]),
                    selected=selected,
                )
            )
    return responses


def write_human_csv(path: str | Path, responses) -> None:
    from .analysis import ALL_GOALS

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HUMAN_CSV_FIELDS)
        for r in responses:
            sel = "ALL" if r.selected == ALL_GOALS else ";".join(r.selected)
            writer.writerow([r.participant_id, r.stimulus_id, r.judgment_index, r.condition, sel])
