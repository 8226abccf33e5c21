"""Multi-agent Doors, Keys & Gems gridworld.

Two agents share the grid: a principal (the human, who may collect gems)
and an assistant (the robot, who may not). They act in strict turns,
principal first. Doors are unlocked with a same-colored key, which is
consumed; keys can be passed between agents on adjacent cells.

Coordinates are ``(x, y)`` with ``y`` growing downward, matching the
row-major ASCII map layout.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

Cell = tuple[int, int]


class Agent(str, enum.Enum):
    PRINCIPAL = "human"
    ASSISTANT = "robot"

    @property
    def index(self) -> int:
        return 0 if self is Agent.PRINCIPAL else 1

    @property
    def other(self) -> Agent:
        return Agent.ASSISTANT if self is Agent.PRINCIPAL else Agent.PRINCIPAL


class ItemKind(str, enum.Enum):
    KEY = "key"
    DOOR = "door"
    GEM = "gem"


VERBS = ("up", "down", "left", "right", "pickup", "unlock", "handover", "wait")
MOVES = {"up": (0, -1), "down": (0, 1), "left": (-1, 0), "right": (1, 0)}
_ARITY = {"up": 0, "down": 0, "left": 0, "right": 0, "pickup": 1, "unlock": 2, "handover": 1, "wait": 0}
_VERB_RANK = {verb: i for i, verb in enumerate(VERBS)}

# Costs are kept as integers in units of 0.2 so that plan costs add up exactly.
COST_SCALE = 5
_COST_UNITS = {"wait": 3}
_DEFAULT_COST_UNITS = 5


class IllegalActionError(ValueError):
    """Raised by :func:`step` when an action's precondition does not hold."""


@dataclass(frozen=True)
class Item:
    id: str
    kind: ItemKind
    color: str


@dataclass(frozen=True, order=True)
class Action:
    verb: str
    args: tuple[str, ...] = ()

    def __post_init__(self):
        if self.verb not in _ARITY:
            raise ValueError(f"unknown verb {self.verb!r}")
        if len(self.args) != _ARITY[self.verb]:
            raise ValueError(f"{self.verb} takes {_ARITY[self.verb]} argument(s), got {len(self.args)}")

    @property
    def sort_key(self) -> tuple:
        return (_VERB_RANK[self.verb], self.args)

    @classmethod
    def parse(cls, text: str) -> Action:
        """Parse ``"unlock key1 door1"``-style text."""
        parts = text.split()
        if not parts:
            raise ValueError("empty action")
        return cls(parts[0], tuple(parts[1:]))

    def __str__(self) -> str:
        return " ".join((self.verb,) + self.args)


WAIT = Action("wait")


@dataclass(frozen=True)
class Goal:
    gem: str

    def __str__(self) -> str:
        return self.gem


@dataclass(eq=False)
class GridMap:
    """Static layout: walls, where every item starts, and agent start cells."""

    width: int
    height: int
    walls: frozenset[Cell]
    items: Mapping[str, Item]
    item_cells: Mapping[str, Cell]
    starts: tuple[Cell, Cell]
    name: str = ""
    symbols: dict[str, str] = field(default_factory=dict, repr=False)
    door_at: dict[Cell, str] = field(init=False, repr=False)
    item_at: dict[Cell, str] = field(init=False, repr=False)

    def __post_init__(self):
        self.items = dict(self.items)
        self.item_cells = dict(self.item_cells)
        self.door_at = {}
        self.item_at = {}
        for item_id, cell in self.item_cells.items():
            if self.items[item_id].kind is ItemKind.DOOR:
                self.door_at[cell] = item_id
            else:
                self.item_at[cell] = item_id

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def ids(self, kind: ItemKind) -> list[str]:
        return sorted(i for i, item in self.items.items() if item.kind is kind)

    @property
    def gems(self) -> list[str]:
        return self.ids(ItemKind.GEM)

    def color(self, item_id: str) -> str:
        return self.items[item_id].color

    def validate(self) -> list[str]:
        """Return a list of violated invariants (empty when the map is valid)."""
        problems = []
        for cell in self.walls:
            if not self.in_bounds(cell):
                problems.append(f"wall {cell} out of bounds")
        seen: dict[Cell, str] = {}
        for item_id, cell in self.item_cells.items():
            if not self.in_bounds(cell):
                problems.append(f"{item_id} at {cell} out of bounds")
            if cell in self.walls:
                problems.append(f"{item_id} at {cell} is inside a wall")
            if cell in seen:
                problems.append(f"{item_id} shares cell {cell} with {seen[cell]}")
            seen[cell] = item_id
        for agent, cell in zip(Agent, self.starts):
            if not self.in_bounds(cell) or cell in self.walls:
                problems.append(f"{agent.value} starts on a blocked cell {cell}")
            if cell in self.item_cells:
                problems.append(f"{agent.value} starts on item {self.item_at.get(cell) or self.door_at.get(cell)}")
        if self.starts[0] == self.starts[1]:
            problems.append("agents share a start cell")
        if not self.gems:
            problems.append("map has no gems")
        return problems

    def initial_state(self) -> WorldState:
        return WorldState(
            positions=self.starts,
            held=(frozenset(), frozenset()),
            unlocked=frozenset(),
            floor=frozenset(i for i, it in self.items.items() if it.kind is not ItemKind.DOOR),
            gems=frozenset(),
            ply=Agent.PRINCIPAL,
        )


@dataclass(frozen=True)
class WorldState:
    """Immutable snapshot of everything that changes during an episode.

    Keys not on the floor and in nobody's hand have been consumed by an unlock.
    """

    positions: tuple[Cell, Cell]
    held: tuple[frozenset[str], frozenset[str]]
    unlocked: frozenset[str]
    floor: frozenset[str]
    gems: frozenset[str]
    ply: Agent

    def position(self, agent: Agent) -> Cell:
        return self.positions[agent.index]

    def keys_of(self, agent: Agent) -> frozenset[str]:
        return self.held[agent.index]

    def to_dict(self) -> dict:
        return {
            "positions": {a.value: list(self.positions[a.index]) for a in Agent},
            "held": {a.value: sorted(self.held[a.index]) for a in Agent},
            "unlocked": sorted(self.unlocked),
            "floor": sorted(self.floor),
            "gems": sorted(self.gems),
            "ply": self.ply.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> WorldState:
        return cls(
            positions=tuple(tuple(data["positions"][a.value]) for a in Agent),
            held=tuple(frozenset(data["held"][a.value]) for a in Agent),
            unlocked=frozenset(data["unlocked"]),
            floor=frozenset(data["floor"]),
            gems=frozenset(data["gems"]),
            ply=Agent(data["ply"]),
        )


def is_terminal(state: WorldState, goal: Goal) -> bool:
    return goal.gem in state.gems


def action_cost(action: Action) -> float:
    return action_cost_units(action) / COST_SCALE


def action_cost_units(action: Action) -> int:
    return _COST_UNITS.get(action.verb, _DEFAULT_COST_UNITS)


def _adjacent(a: Cell, b: Cell) -> bool:
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1


def neighbors(cell: Cell) -> Iterable[Cell]:
    x, y = cell
    for dx, dy in MOVES.values():
        yield (x + dx, y + dy)


def _blocked(gridmap: GridMap, state: WorldState, cell: Cell, mover: Agent) -> str | None:
    if not gridmap.in_bounds(cell):
        return "target cell is outside the grid"
    if cell in gridmap.walls:
        return "target cell is a wall"
    door = gridmap.door_at.get(cell)
    if door is not None and door not in state.unlocked:
        return f"target cell holds locked {door}"
    if state.positions[mover.other.index] == cell:
        return "target cell is occupied by the other agent"
    return None


def legal_actions(gridmap: GridMap, state: WorldState, agent: Agent | None = None) -> list[Action]:
    """All actions available to the agent whose ply it is, in canonical order."""
    agent = state.ply if agent is None else agent
    if agent is not state.ply:
        raise ValueError(f"it is {state.ply.value}'s ply, not {agent.value}'s")
    me = agent.index
    pos = state.positions[me]
    x, y = pos
    actions = []
    for verb, (dx, dy) in MOVES.items():
        if _blocked(gridmap, state, (x + dx, y + dy), agent) is None:
            actions.append(Action(verb))
    item = gridmap.item_at.get(pos)
    if item is not None and item in state.floor:
        if gridmap.items[item].kind is ItemKind.KEY or agent is Agent.PRINCIPAL:
            actions.append(Action("pickup", (item,)))
    held = sorted(state.held[me])
    if held:
        unlocks = []
        for cell in neighbors(pos):
            door = gridmap.door_at.get(cell)
            if door is None or door in state.unlocked:
                continue
            color = gridmap.items[door].color
            unlocks.extend(Action("unlock", (k, door)) for k in held if gridmap.items[k].color == color)
        actions.extend(sorted(unlocks))
        if _adjacent(pos, state.positions[1 - me]):
            actions.extend(Action("handover", (k,)) for k in held)
    actions.append(WAIT)
    return actions


def check_action(gridmap: GridMap, state: WorldState, action: Action) -> str | None:
    """Return the violated precondition of ``action`` for the acting agent, or None."""
    agent = state.ply
    me = agent.index
    pos = state.positions[me]
    verb = action.verb
    if verb in MOVES:
        dx, dy = MOVES[verb]
        return _blocked(gridmap, state, (pos[0] + dx, pos[1] + dy), agent)
    if verb == "wait":
        return None
    if verb == "pickup":
        (item,) = action.args
        if item not in gridmap.items:
            return f"unknown item {item}"
        if item not in state.floor:
            return f"{item} is not on the floor"
        if gridmap.item_cells[item] != pos:
            return f"{item} is not on {agent.value}'s cell"
        if gridmap.items[item].kind is ItemKind.GEM and agent is Agent.ASSISTANT:
            return "the assistant may not pick up gems"
        if gridmap.items[item].kind is ItemKind.DOOR:
            return "doors cannot be picked up"
        return None
    if verb == "unlock":
        key, door = action.args
        if key not in state.held[me]:
            return f"{agent.value} does not hold {key}"
        if door not in gridmap.items or gridmap.items[door].kind is not ItemKind.DOOR:
            return f"{door} is not a door"
        if door in state.unlocked:
            return f"{door} is already unlocked"
        if not _adjacent(pos, gridmap.item_cells[door]):
            return f"{door} is not adjacent to {agent.value}"
        if gridmap.items[key].color != gridmap.items[door].color:
            return f"{key} ({gridmap.items[key].color}) does not match {door} ({gridmap.items[door].color})"
        return None
    if verb == "handover":
        (key,) = action.args
        if key not in state.held[me]:
            return f"{agent.value} does not hold {key}"
        if not _adjacent(pos, state.positions[1 - me]):
            return "agents are not on adjacent cells"
        return None
    return f"unknown verb {verb}"


def step(gridmap: GridMap, state: WorldState, action: Action) -> WorldState:
    """Apply ``action`` for the agent whose ply it is and pass the ply on."""
    problem = check_action(gridmap, state, action)
    if problem is not None:
        raise IllegalActionError(f"{state.ply.value} cannot {action}: {problem}")
    return apply_unchecked(gridmap, state, action)


def apply_unchecked(gridmap: GridMap, state: WorldState, action: Action) -> WorldState:
    """Transition without precondition checks; only for actions from :func:`legal_actions`."""
    me = state.ply.index
    nxt = state.ply.other
    verb = action.verb
    if verb == "wait":
        return replace(state, ply=nxt)
    if verb in MOVES:
        dx, dy = MOVES[verb]
        x, y = state.positions[me]
        positions = list(state.positions)
        positions[me] = (x + dx, y + dy)
        return replace(state, positions=tuple(positions), ply=nxt)
    held = list(state.held)
    if verb == "pickup":
        (item,) = action.args
        floor = state.floor - {item}
        if gridmap.items[item].kind is ItemKind.GEM:
            return replace(state, floor=floor, gems=state.gems | {item}, ply=nxt)
        held[me] = held[me] | {item}
        return replace(state, floor=floor, held=tuple(held), ply=nxt)
    if verb == "unlock":
        key, door = action.args
        held[me] = held[me] - {key}
        return replace(state, held=tuple(held), unlocked=state.unlocked | {door}, ply=nxt)
    if verb == "handover":
        (key,) = action.args
        held[me] = held[me] - {key}
        held[1 - me] = held[1 - me] | {key}
        return replace(state, held=tuple(held), ply=nxt)
    raise IllegalActionError(f"unknown verb {verb}")


def key_location(state: WorldState, key: str) -> str:
    """Where a key currently is: 'floor', 'human', 'robot' or 'consumed'."""
    if key in state.floor:
        return "floor"
    for agent in Agent:
        if key in state.held[agent.index]:
            return agent.value
    return "consumed"
