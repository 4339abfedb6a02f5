"""LifeGate: a small gridworld with a barrier, a goal region and a dead-end zone.

Coordinates are ``(x, y)`` with ``x`` growing to the right and ``y`` growing
upward. Outside the zone moves are deterministic; inside it the agent's action
is ignored and it drifts right with probability ``push_prob`` per step until it
falls onto the negative edge.

Default layout (``G`` goal, ``#`` barrier, ``z`` zone, ``X`` negative edge)::

    y=9  . . . . G G z z z X
    y=8  . . . . . . z z z X
    y=7  . . . . . . z z z X
    y=6  . . . . . . z z z X
    y=5  . # # # # # z z z X
    y=4  . . . . . . z z z X
    y=3  . . . . . . z z z X
    y=2  . . . . . . z z z X
    y=1  . S S . . . z z z X
    y=0  . . . . . . z z z X
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .records import Outcome, TrajectoryRecord

UP, DOWN, LEFT, RIGHT, STAY = range(5)
ACTIONS = ("up", "down", "left", "right", "stay")
N_ACTIONS = len(ACTIONS)
_MOVES = {UP: (0, 1), DOWN: (0, -1), LEFT: (-1, 0), RIGHT: (1, 0), STAY: (0, 0)}

Cell = tuple[int, int]


class ConfigError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


def _cells(seq) -> frozenset:
    return frozenset((int(x), int(y)) for x, y in seq)


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    barrier_cells: frozenset
    deadend_zone_cells: frozenset
    goal_cells: frozenset
    negative_edge_cells: frozenset
    start_cells: frozenset
    push_prob: float = 0.4
    max_steps: int = 100

    def __post_init__(self):
        for name in ("barrier_cells", "deadend_zone_cells", "goal_cells", "negative_edge_cells", "start_cells"):
            object.__setattr__(self, name, _cells(getattr(self, name)))
        self.validate()

    def validate(self):
        groups = [self.barrier_cells, self.deadend_zone_cells, self.goal_cells, self.negative_edge_cells]
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                if groups[i] & groups[j]:
                    raise ConfigError("barrier, zone, goal and negative-edge cells must be disjoint")
        for x, y in set().union(*groups, self.start_cells):
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ConfigError(f"cell {(x, y)} outside the {self.width}x{self.height} grid")
        if not (0.0 < self.push_prob < 1.0):
            raise ConfigError("push_prob must lie in (0, 1)")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        for x, y in self.deadend_zone_cells:
            cx = x
            while (cx, y) in self.deadend_zone_cells:
                cx += 1
            if (cx, y) not in self.negative_edge_cells:
                raise ConfigError(f"zone cell {(x, y)} does not drift onto the negative edge")
        if self.start_cells & (self.barrier_cells | self.goal_cells | self.negative_edge_cells):
            raise ConfigError("start cells must be non-terminal and outside the barrier")

    @property
    def terminal_cells(self) -> frozenset:
        return self.goal_cells | self.negative_edge_cells

    @property
    def free_cells(self) -> list[Cell]:
        """Non-terminal, non-barrier cells in row-major order."""
        blocked = self.barrier_cells | self.terminal_cells
        return [(x, y) for y in range(self.height) for x in range(self.width) if (x, y) not in blocked]

    def features(self, cell) -> np.ndarray:
        x, y = cell
        return np.array([x / (self.width - 1), y / (self.height - 1)])

    def cell_of(self, features) -> Cell:
        f = np.asarray(features)
        return int(round(f[0] * (self.width - 1))), int(round(f[1] * (self.height - 1)))

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "barrier_cells": sorted(map(list, self.barrier_cells)),
            "deadend_zone_cells": sorted(map(list, self.deadend_zone_cells)),
            "goal_cells": sorted(map(list, self.goal_cells)),
            "negative_edge_cells": sorted(map(list, self.negative_edge_cells)),
            "start_cells": sorted(map(list, self.start_cells)),
            "push_prob": self.push_prob,
            "max_steps": self.max_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def default_spec(**overrides) -> GridSpec:
    w, h = 10, 10
    kw = dict(
        width=w,
        height=h,
        barrier_cells=[(x, 5) for x in range(1, 6)],
        deadend_zone_cells=[(x, y) for x in range(6, 9) for y in range(h)],
        goal_cells=[(4, 9), (5, 9)],
        negative_edge_cells=[(9, y) for y in range(h)],
        start_cells=[(1, 1), (2, 1)],
        push_prob=0.4,
        max_steps=100,
    )
    kw.update(overrides)
    return GridSpec(**kw)


def load_spec(path) -> GridSpec:
    return GridSpec.from_dict(json.loads(Path(path).read_text()))


def save_spec(spec: GridSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class EnvState:
    x: int
    y: int
    t: int = 0

    @property
    def cell(self) -> Cell:
        return (self.x, self.y)


def reset(spec: GridSpec, rng: np.random.Generator, anywhere=False) -> EnvState:
    """Draw a start state; ``anywhere`` samples every free cell (data-collection mode)."""
    pool = spec.free_cells if anywhere else sorted(spec.start_cells)
    if not pool:
        raise ConfigError("empty start distribution")
    x, y = pool[int(rng.integers(len(pool)))]
    return EnvState(x, y, 0)


def step(spec: GridSpec, state: EnvState, action: int, rng: np.random.Generator):
    """Advance one step; returns ``(next_state, terminal, outcome)``."""
    if state.cell in spec.terminal_cells or state.t >= spec.max_steps:
        raise UsageError("cannot step a terminal state")
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"invalid action {action}")
    x, y = state.cell
    if state.cell in spec.deadend_zone_cells:
        if rng.random() < spec.push_prob:
            x += 1
    else:
        dx, dy = _MOVES[action]
        nx, ny = x + dx, y + dy
        if 0 <= nx < spec.width and 0 <= ny < spec.height and (nx, ny) not in spec.barrier_cells:
            x, y = nx, ny
    nxt = EnvState(x, y, state.t + 1)
    if nxt.cell in spec.goal_cells:
        return nxt, True, Outcome.POSITIVE
    if nxt.cell in spec.negative_edge_cells:
        return nxt, True, Outcome.NEGATIVE
    if nxt.t >= spec.max_steps:
        return nxt, True, Outcome.TIMEOUT
    return nxt, False, None


@dataclass
class FixedPolicy:
    name: str
    action_map: dict
    stochasticity: float = 0.0

    def act(self, cell: Cell, rng: np.random.Generator) -> int:
        if self.stochasticity > 0.0 and rng.random() < self.stochasticity:
            return int(rng.integers(N_ACTIONS))
        return self.action_map[cell]


def _policy(spec: GridSpec, name, rule, stochasticity) -> FixedPolicy:
    cells = spec.free_cells
    return FixedPolicy(name, {c: rule(*c) for c in cells}, stochasticity)


def hand_policies(spec: GridSpec | None = None, stochasticity=0.0) -> dict[str, FixedPolicy]:
    """The three hand-designed policies for the default layout.

    ``safe`` goes left around the barrier and up to the goal. ``bottom`` walks
    straight right into the zone; ``barrier`` climbs to the row under the
    barrier first and then heads right into the zone.
    """
    spec = spec or default_spec()

    def safe(x, y):
        if y <= 5:
            return LEFT if x > 0 else UP
        return RIGHT if x < 4 else UP

    def bottom(x, y):
        return RIGHT

    def barrier(x, y):
        if y < 4:
            return UP
        if y == 5 and x == 0:
            return DOWN
        return RIGHT

    return {
        "safe": _policy(spec, "safe", safe, stochasticity),
        "bottom": _policy(spec, "bottom", bottom, stochasticity),
        "barrier": _policy(spec, "barrier", barrier, stochasticity),
    }


def suboptimal_policies(spec: GridSpec | None = None, stochasticity=0.0) -> list[FixedPolicy]:
    p = hand_policies(spec, stochasticity)
    return [p["bottom"], p["barrier"]]


def rollout(spec: GridSpec, policy: FixedPolicy, rng: np.random.Generator,
            start: Optional[EnvState] = None) -> TrajectoryRecord:
    state = start if start is not None else reset(spec, rng)
    cells = [state.cell]
    actions = []
    zone_entry = 0 if state.cell in spec.deadend_zone_cells else None
    while True:
        a = policy.act(state.cell, rng)
        state, terminal, outcome = step(spec, state, a, rng)
        actions.append(a)
        cells.append(state.cell)
        if zone_entry is None and state.cell in spec.deadend_zone_cells:
            zone_entry = len(cells) - 1
        if terminal:
            break
    feats = np.array([spec.features(c) for c in cells])
    return TrajectoryRecord(feats, np.array(actions), outcome, zone_entry)


def random_episode(spec: GridSpec, rng: np.random.Generator, anywhere=True) -> TrajectoryRecord:
    """One episode under the uniform-random policy."""
    return rollout(spec, FixedPolicy("random", {}, 1.0), rng, reset(spec, rng, anywhere=anywhere))
