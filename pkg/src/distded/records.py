"""Transition and trajectory records shared by the simulator and the dataset."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np


class Outcome(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class Transition:
    state: tuple
    action: int
    next_state: tuple
    terminal: bool
    outcome: Optional[Outcome] = None

    def __post_init__(self):
        if self.terminal != (self.outcome is not None):
            raise ValueError("a transition carries an outcome exactly when it is terminal")


@dataclass
class TrajectoryRecord:
    """One episode stored compactly as its state sequence and actions.

    ``states`` has one more row than ``actions``: row ``t+1`` is the state
    reached by taking ``actions[t]`` in row ``t``. Only the last transition is
    terminal. ``zone_entry_index`` is the first row lying inside the dead-end
    zone, if any.
    """

    states: np.ndarray
    actions: np.ndarray
    outcome: Outcome
    zone_entry_index: Optional[int] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.outcome = Outcome(self.outcome)
        if self.states.ndim != 2 or len(self.states) != len(self.actions) + 1:
            raise ValueError("need len(states) == len(actions) + 1")
        if len(self.actions) == 0:
            raise ValueError("a trajectory needs at least one transition")

    def __len__(self):
        return len(self.actions)

    @property
    def transitions(self) -> list[Transition]:
        last = len(self.actions) - 1
        return [
            Transition(tuple(self.states[t]), int(a), tuple(self.states[t + 1]), t == last,
                       self.outcome if t == last else None)
            for t, a in enumerate(self.actions)
        ]

    @property
    def decision_states(self) -> np.ndarray:
        """States at which an action was taken (the terminal state excluded)."""
        return self.states[:-1]
