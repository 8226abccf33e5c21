"""Online Q-values for the joint turn-taking team, and the Boltzmann policy over them.

Each goal gets its own :class:`QSource`. Q-values are answered by an A*
search over joint states (one agent moves per node), and every search
leaves behind what it learned:

* heuristic memory: after a search with optimal cost ``C``, every expanded
  state ``s`` has ``h(s)`` raised to ``C - g(s)`` (or to ``f_min - g(s)`` when
  the expansion budget runs out, as in real-time adaptive A*). The update
  keeps the heuristic admissible and consistent, so later searches are
  faster but still optimal.
* exact cost-to-go for states on the optimal path, and dead-end marks for
  every state of an exhausted search. Later searches stop as soon as they
  pop a state whose cost-to-go is already known exactly.

All costs inside the search are integers in units of 0.2 (see
``gridworld.COST_SCALE``), so equal plans compare equal exactly.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import weakref
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .gridworld import (
    COST_SCALE,
    Action,
    Agent,
    Cell,
    MOVES,
    GridMap,
    Goal,
    ItemKind,
    WorldState,
    action_cost_units,
    apply_unchecked,
    check_action,
    is_terminal,
    legal_actions,
    neighbors,
)

log = logging.getLogger(__name__)

UNREACHABLE_Q = -1e6
DEFAULT_BUDGET = 100_000
HEURISTICS = ("manhattan", "maze")

_MOVE_UNITS = 5
_WAIT_UNITS = 3


class GoalUnreachableError(RuntimeError):
    pass


class SearchBudgetExceeded(RuntimeError):
    """The expansion budget ran out before the search finished.

    ``q_estimate`` is the Q-value implied by the best lower bound on the
    remaining cost; callers that can live with an estimate use it directly.
    """

    def __init__(self, lower_bound: float, q_estimate: float):
        super().__init__(f"search budget exhausted (remaining cost >= {lower_bound})")
        self.lower_bound = lower_bound
        self.q_estimate = q_estimate


@dataclass(frozen=True)
class PlannerConfig:
    temperature: float = 1.0
    budget: int = DEFAULT_BUDGET
    heuristic: str = "manhattan"

    def __post_init__(self):
        if not self.temperature >= 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.budget < 1:
            raise ValueError(f"budget must be >= 1, got {self.budget}")
        if self.heuristic not in HEURISTICS:
            raise ValueError(f"heuristic must be one of {HEURISTICS}")


@dataclass
class PolicyQuery:
    state: WorldState
    agent: Agent
    actions: tuple[Action, ...]
    q_values: tuple[float, ...]
    log_probs: tuple[float, ...]

    @property
    def probs(self) -> tuple[float, ...]:
        return tuple(math.exp(lp) for lp in self.log_probs)

    def log_prob(self, action: Action) -> float:
        try:
            return self.log_probs[self.actions.index(action)]
        except ValueError:
            raise KeyError(f"{action} is not legal here") from None

    def prob(self, action: Action) -> float:
        return math.exp(self.log_prob(action))

    def as_dict(self) -> dict[str, float]:
        return {str(a): p for a, p in zip(self.actions, self.probs)}


class SearchDomain:
    """Packed copy of the transition system used inside the search loop.

    A packed state is ``(p0, p1, held0, held1, floor_keys, unlocked, gems, ply)``:
    cell indices ``y * width + x`` for both agents and bitmasks over keys,
    doors and gems. It mirrors :func:`gridworld.legal_actions` and
    :func:`gridworld.apply_unchecked` exactly (checked in the test suite).
    """

    def __init__(self, gridmap: GridMap):
        w = gridmap.width
        self.width = w
        keys = gridmap.ids(ItemKind.KEY)
        doors = gridmap.ids(ItemKind.DOOR)
        gems = gridmap.gems
        self.key_bit = {k: 1 << i for i, k in enumerate(keys)}
        self.door_bit = {d: 1 << i for i, d in enumerate(doors)}
        self.gem_bit = {g: 1 << i for i, g in enumerate(gems)}
        self.bit_key = {b: k for k, b in self.key_bit.items()}
        n = w * gridmap.height
        self.moves: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        self.adjacent: list[frozenset[int]] = [frozenset()] * n
        self.key_at = [0] * n
        self.gem_at = [0] * n
        self.adj_doors: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        key_mask_by_color: dict[str, int] = {}
        for k in keys:
            c = gridmap.color(k)
            key_mask_by_color[c] = key_mask_by_color.get(c, 0) | self.key_bit[k]
        for item, cell in gridmap.item_cells.items():
            idx = self.index(cell)
            if item in self.key_bit:
                self.key_at[idx] = self.key_bit[item]
            elif item in self.gem_bit:
                self.gem_at[idx] = self.gem_bit[item]
        for y in range(gridmap.height):
            for x in range(w):
                if (x, y) in gridmap.walls:
                    continue
                idx = self.index((x, y))
                adj = []
                for dx, dy in MOVES.values():
                    nb = (x + dx, y + dy)
                    if not gridmap.in_bounds(nb) or nb in gridmap.walls:
                        continue
                    door = gridmap.door_at.get(nb)
                    self.moves[idx].append((self.index(nb), self.door_bit[door] if door else 0))
                    adj.append(self.index(nb))
                    if door:
                        mask = key_mask_by_color.get(gridmap.color(door), 0)
                        self.adj_doors[idx].append((self.door_bit[door], mask))
                self.adjacent[idx] = frozenset(adj)

    def index(self, cell: Cell) -> int:
        return cell[1] * self.width + cell[0]

    def cell(self, index: int) -> Cell:
        return (index % self.width, index // self.width)

    def pack(self, state: WorldState) -> tuple:
        kb, db, gb = self.key_bit, self.door_bit, self.gem_bit
        return (
            self.index(state.positions[0]),
            self.index(state.positions[1]),
            sum(kb[k] for k in state.held[0]),
            sum(kb[k] for k in state.held[1]),
            sum(kb[k] for k in state.floor if k in kb),
            sum(db[d] for d in state.unlocked),
            sum(gb[g] for g in state.gems),
            state.ply.index,
        )

    def successors(self, s: tuple) -> list[tuple[int, tuple]]:
        p0, p1, h0, h1, fk, u, hg, ply = s
        out = []
        if ply == 0:
            me, other, held = p0, p1, h0
            for target, door in self.moves[me]:
                if target != other and (not door or u & door):
                    out.append((_MOVE_UNITS, (target, p1, h0, h1, fk, u, hg, 1)))
            kb = self.key_at[me]
            if kb and fk & kb:
                out.append((_MOVE_UNITS, (p0, p1, h0 | kb, h1, fk & ~kb, u, hg, 1)))
            gb = self.gem_at[me]
            if gb and not hg & gb:
                out.append((_MOVE_UNITS, (p0, p1, h0, h1, fk, u, hg | gb, 1)))
            if held:
                for door, mask in self.adj_doors[me]:
                    if not u & door:
                        usable = held & mask
                        while usable:
                            bit = usable & -usable
                            usable ^= bit
                            out.append((_MOVE_UNITS, (p0, p1, h0 & ~bit, h1, fk, u | door, hg, 1)))
                if other in self.adjacent[me]:
                    rest = held
                    while rest:
                        bit = rest & -rest
                        rest ^= bit
                        out.append((_MOVE_UNITS, (p0, p1, h0 & ~bit, h1 | bit, fk, u, hg, 1)))
            out.append((_WAIT_UNITS, (p0, p1, h0, h1, fk, u, hg, 1)))
        else:
            me, other, held = p1, p0, h1
            for target, door in self.moves[me]:
                if target != other and (not door or u & door):
                    out.append((_MOVE_UNITS, (p0, target, h0, h1, fk, u, hg, 0)))
            kb = self.key_at[me]
            if kb and fk & kb:
                out.append((_MOVE_UNITS, (p0, p1, h0, h1 | kb, fk & ~kb, u, hg, 0)))
            if held:
                for door, mask in self.adj_doors[me]:
                    if not u & door:
                        usable = held & mask
                        while usable:
                            bit = usable & -usable
                            usable ^= bit
                            out.append((_MOVE_UNITS, (p0, p1, h0, h1 & ~bit, fk, u | door, hg, 0)))
                if other in self.adjacent[me]:
                    rest = held
                    while rest:
                        bit = rest & -rest
                        rest ^= bit
                        out.append((_MOVE_UNITS, (p0, p1, h0 | bit, h1 & ~bit, fk, u, hg, 0)))
            out.append((_WAIT_UNITS, (p0, p1, h0, h1, fk, u, hg, 0)))
        return out


@dataclass
class QSource:
    """Incremental Q-value provider for one goal on one map.

    Not thread-safe: callers serialize access per instance. Separate goals
    should use separate instances and may run in parallel.
    """

    gridmap: GridMap
    goal: Goal
    heuristic: str = "manhattan"
    h_memory: dict[tuple, int] = field(default_factory=dict, repr=False)
    exact: dict[tuple, float] = field(default_factory=dict, repr=False)
    q_cache: dict[tuple[WorldState, Action], float] = field(default_factory=dict, repr=False)
    expansions: int = 0
    searches: int = 0

    def __post_init__(self):
        if self.goal.gem not in self.gridmap.items:
            raise ValueError(f"goal gem {self.goal.gem} is not on the map")
        if self.heuristic not in HEURISTICS:
            raise ValueError(f"heuristic must be one of {HEURISTICS}")
        self.domain = _domain_for(self.gridmap)
        gem_cell = self.gridmap.item_cells[self.goal.gem]
        self._goal_bit = self.domain.gem_bit[self.goal.gem]
        if self.heuristic == "maze":
            dist = _wall_distances(self.gridmap, gem_cell)
        else:
            dist = {
                (x, y): abs(x - gem_cell[0]) + abs(y - gem_cell[1])
                for x in range(self.gridmap.width)
                for y in range(self.gridmap.height)
            }
        # per-cell principal bound, indexed [ply][cell]
        n = self.gridmap.width * self.gridmap.height
        self._h_table = [[math.inf] * n, [math.inf] * n]
        for cell, d in dist.items():
            idx = self.domain.index(cell)
            self._h_table[0][idx] = _MOVE_UNITS * (d + 1) + _WAIT_UNITS * d
            self._h_table[1][idx] = _MOVE_UNITS * (d + 1) + _WAIT_UNITS * (d + 1)

    def base_heuristic(self, state: WorldState | tuple) -> float:
        """Lower bound (in cost units) from the principal's distance to the gem.

        The principal needs ``d`` moves plus a pickup, and the assistant takes
        a ply (at least a wait) between consecutive principal actions.
        """
        s = self.domain.pack(state) if isinstance(state, WorldState) else state
        if s[6] & self._goal_bit:
            return 0
        return self._h_table[s[7]][s[0]]

    def heuristic_value(self, state: WorldState | tuple) -> float:
        s = self.domain.pack(state) if isinstance(state, WorldState) else state
        known = self.exact.get(s)
        if known is not None:
            return known
        return max(self.base_heuristic(s), self.h_memory.get(s, 0))

    def cost_to_go(self, state: WorldState, budget: int = DEFAULT_BUDGET) -> float:
        """Optimal remaining cost in units (``math.inf`` if the goal is unreachable)."""
        s = self.domain.pack(state)
        if s[6] & self._goal_bit:
            return 0
        known = self.exact.get(s)
        if known is not None:
            return known
        return self._search(s, budget)

    def _search(self, start: tuple, budget: int) -> float:
        self.searches += 1
        successors = self.domain.successors
        goal_bit = self._goal_bit
        exact = self.exact
        memory = self.h_memory
        h_table = self._h_table
        h0 = self.heuristic_value(start)
        if h0 == math.inf:
            exact[start] = math.inf
            return math.inf
        counter = itertools.count()
        g = {start: 0}
        parent: dict[tuple, tuple | None] = {start: None}
        heap = [(h0, 0, next(counter), start)]
        closed: list[tuple] = []
        closed_set = set()
        expanded = 0
        while heap:
            f, neg_g, _, state = heapq.heappop(heap)
            if state in closed_set or -neg_g != g[state]:
                continue
            gs = g[state]
            reached = state[6] & goal_bit
            if reached or state in exact:
                total = gs + (0 if reached else exact[state])
                self._learn(closed, g, total)
                self.expansions += expanded
                node = state
                while node is not None:
                    exact.setdefault(node, total - g[node])
                    node = parent[node]
                return total
            if expanded >= budget:
                self._learn(closed, g, f)
                self.expansions += expanded
                raise SearchBudgetExceeded(lower_bound=f / COST_SCALE, q_estimate=-f / COST_SCALE)
            closed.append(state)
            closed_set.add(state)
            expanded += 1
            for cost, child in successors(state):
                if child in closed_set:
                    continue
                cg = gs + cost
                if cg >= g.get(child, math.inf):
                    continue
                hc = exact.get(child)
                if hc is None:
                    hc = 0 if child[6] & goal_bit else h_table[child[7]][child[0]]
                    learned = memory.get(child)
                    if learned is not None and learned > hc:
                        hc = learned
                if hc == math.inf:
                    continue
                g[child] = cg
                parent[child] = state
                heapq.heappush(heap, (cg + hc, -cg, next(counter), child))
        self.expansions += expanded
        for state in closed:
            exact[state] = math.inf
        return math.inf

    def _learn(self, closed: list[tuple], g: dict[tuple, int], bound: float) -> None:
        memory = self.h_memory
        for state in closed:
            raised = bound - g[state]
            if raised > memory.get(state, 0):
                memory[state] = raised


_DOMAINS: "weakref.WeakKeyDictionary[GridMap, SearchDomain]" = weakref.WeakKeyDictionary()


def _domain_for(gridmap: GridMap) -> SearchDomain:
    domain = _DOMAINS.get(gridmap)
    if domain is None:
        domain = _DOMAINS[gridmap] = SearchDomain(gridmap)
    return domain


def _wall_distances(gridmap: GridMap, target: Cell) -> dict[Cell, int]:
    """BFS distances to ``target`` through everything except walls."""
    dist = {target: 0}
    queue = deque([target])
    while queue:
        cell = queue.popleft()
        for nb in neighbors(cell):
            if nb not in dist and gridmap.in_bounds(nb) and nb not in gridmap.walls:
                dist[nb] = dist[cell] + 1
                queue.append(nb)
    return dist


def q_value(q: QSource, state: WorldState, action: Action, cfg: PlannerConfig | None = None) -> float:
    """Negated cost of the cheapest plan to the goal that starts with ``action``.

    Returns ``UNREACHABLE_Q`` when the goal cannot be reached after the action.
    Raises :class:`SearchBudgetExceeded` when the search is cut short.
    """
    cfg = cfg or PlannerConfig()
    cached = q.q_cache.get((state, action))
    if cached is not None:
        return cached
    problem = check_action(q.gridmap, state, action)
    if problem is not None:
        raise ValueError(f"{action} is not legal: {problem}")
    child = apply_unchecked(q.gridmap, state, action)
    try:
        remaining = q.cost_to_go(child, cfg.budget)
    except SearchBudgetExceeded as exc:
        bound = exc.lower_bound + action_cost_units(action) / COST_SCALE
        raise SearchBudgetExceeded(lower_bound=bound, q_estimate=-bound) from None
    if remaining == math.inf:
        value = UNREACHABLE_Q
    else:
        value = -(action_cost_units(action) + remaining) / COST_SCALE
    q.q_cache[(state, action)] = value
    return value


def softmax_log_probs(q_values, temperature: float) -> np.ndarray:
    """Log of the Boltzmann distribution over ``q_values``; T=0 is uniform over the argmax set."""
    q = np.asarray(q_values, dtype=float)
    if temperature == 0:
        best = q == q.max()
        out = np.full(q.shape, -np.inf)
        out[best] = -math.log(int(best.sum()))
        return out
    z = q / temperature
    z = z - z.max()
    return z - math.log(np.exp(z).sum())


def boltzmann_policy(q: QSource, state: WorldState, cfg: PlannerConfig | None = None) -> PolicyQuery:
    cfg = cfg or PlannerConfig()
    actions = tuple(legal_actions(q.gridmap, state))
    values = []
    for action in actions:
        try:
            values.append(q_value(q, state, action, cfg))
        except SearchBudgetExceeded as exc:
            log.warning("budget exhausted for %s at goal %s; using lower bound", action, q.goal)
            values.append(exc.q_estimate)
    log_probs = softmax_log_probs(values, cfg.temperature)
    return PolicyQuery(state, state.ply, actions, tuple(values), tuple(float(x) for x in log_probs))


def rollout_optimal(q: QSource, start: WorldState, cfg: PlannerConfig | None = None) -> list[tuple[Agent, Action]]:
    """Deterministic optimal joint plan from ``start``; ties go to the earliest action in canonical order."""
    cfg = cfg or PlannerConfig()
    if q.cost_to_go(start, cfg.budget) == math.inf:
        raise GoalUnreachableError(f"goal {q.goal} is unreachable from the start state")
    plan = []
    state = start
    while not is_terminal(state, q.goal):
        best_action, best_q = None, -math.inf
        for action in legal_actions(q.gridmap, state):
            value = q_value(q, state, action, cfg)
            if value > best_q:
                best_action, best_q = action, value
        plan.append((state.ply, best_action))
        state = apply_unchecked(q.gridmap, state, best_action)
    return plan


def plan_cost(plan: list[tuple[Agent, Action]]) -> float:
    return sum(action_cost_units(a) for _, a in plan) / COST_SCALE
