"""Deterministic gridworlds with a single movable square.

``basic``: 4 actions (up, down, left, right), square always at intensity 1.
``extended``: 8 actions, with a duplicated "down", a diagonal move and two
actions that brighten or darken the square.

Moves into a wall are clamped: the square stays where it is.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

BASIC_ACTIONS = ("up", "down", "left", "right")
EXTENDED_ACTIONS = ("down", "down_dup", "up", "left", "right", "down_right", "color_inc", "color_dec")

# (d_row, d_col, d_color_steps)
_EFFECTS = {
    "up": (-1, 0, 0),
    "down": (1, 0, 0),
    "down_dup": (1, 0, 0),
    "left": (0, -1, 0),
    "right": (0, 1, 0),
    "down_right": (1, 1, 0),
    "color_inc": (0, 0, 1),
    "color_dec": (0, 0, -1),
}

SPAWN_MODES = ("uniform", "edge")


class EnvConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    grid_height: int = 10
    grid_width: int = 10
    square_size: int = 2
    variant: str = "basic"
    color_step: float = 0.125
    color_min: float = 0.25
    color_max: float = 1.0
    seed: int = 0
    # "edge" spawns the square touching at least one wall
    spawn: str = "uniform"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in ("basic", "extended"):
            raise EnvConfigError(f"unknown variant {self.variant!r}")
        if self.grid_height < 1 or self.grid_width < 1 or self.square_size < 1:
            raise EnvConfigError("grid extents and square_size must be positive")
        if self.square_size > min(self.grid_height, self.grid_width):
            raise EnvConfigError(
                f"square_size {self.square_size} exceeds grid {self.grid_height}x{self.grid_width}")
        if not 0.0 <= self.color_min < self.color_max <= 1.0:
            raise EnvConfigError("need 0 <= color_min < color_max <= 1")
        if self.color_step <= 0:
            raise EnvConfigError("color_step must be positive")
        if self.seed < 0:
            raise EnvConfigError("seed must be non-negative")
        if self.spawn not in SPAWN_MODES:
            raise EnvConfigError(f"unknown spawn mode {self.spawn!r}")

    @property
    def actions(self) -> tuple[str, ...]:
        return BASIC_ACTIONS if self.variant == "basic" else EXTENDED_ACTIONS

    @property
    def num_actions(self) -> int:
        return len(self.actions)

    @property
    def max_row(self) -> int:
        return self.grid_height - self.square_size

    @property
    def max_col(self) -> int:
        return self.grid_width - self.square_size

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (1, self.grid_height, self.grid_width)

    def color_levels(self) -> np.ndarray:
        if self.variant == "basic":
            return np.array([1.0])
        n = int(np.floor((self.color_max - self.color_min) / self.color_step + 1e-9))
        levels = self.color_min + self.color_step * np.arange(n + 1)
        if levels[-1] < self.color_max - 1e-12:
            levels = np.append(levels, self.color_max)
        return levels

    @property
    def factor_names(self) -> tuple[str, ...]:
        return ("row", "col") if self.variant == "basic" else ("row", "col", "color")


@dataclass(frozen=True)
class GridState:
    row: int
    col: int
    color: float
    observation: np.ndarray = field(repr=False, compare=False)

    def __eq__(self, other):
        if not isinstance(other, GridState):
            return NotImplemented
        return (self.row, self.col, self.color) == (other.row, other.col, other.color)

    def __hash__(self):
        return hash((self.row, self.col, self.color))


def render(config: EnvConfig, row: int, col: int, color: float) -> np.ndarray:
    obs = np.zeros(config.obs_shape)
    k = config.square_size
    obs[0, row:row + k, col:col + k] = color
    obs.setflags(write=False)
    return obs


def make_state(config: EnvConfig, row: int, col: int, color: float | None = None) -> GridState:
    if color is None:
        color = 1.0 if config.variant == "basic" else config.color_max
    if not (0 <= row <= config.max_row and 0 <= col <= config.max_col):
        raise EnvConfigError(f"position ({row}, {col}) outside the valid range")
    return GridState(row, col, float(color), render(config, row, col, color))


def reset(config: EnvConfig, rng: np.random.Generator) -> GridState:
    """Sample a start state: position uniform, color uniform over its levels."""
    config.validate()
    if config.spawn == "uniform":
        row = int(rng.integers(0, config.max_row + 1))
        col = int(rng.integers(0, config.max_col + 1))
    else:
        edges = [(r, c) for r in range(config.max_row + 1) for c in range(config.max_col + 1)
                 if r in (0, config.max_row) or c in (0, config.max_col)]
        row, col = edges[int(rng.integers(0, len(edges)))]
    if config.variant == "basic":
        color = 1.0
    else:
        levels = config.color_levels()
        color = float(levels[int(rng.integers(0, len(levels)))])
    return make_state(config, row, col, color)


def step(config: EnvConfig, state: GridState, action: int) -> GridState:
    """Pure transition; the input state is left untouched."""
    actions = config.actions
    if not 0 <= action < len(actions):
        raise IndexError(f"action {action} out of range for {len(actions)} actions")
    dr, dc, dcol = _EFFECTS[actions[action]]
    row = min(max(state.row + dr, 0), config.max_row)
    col = min(max(state.col + dc, 0), config.max_col)
    color = state.color
    if dcol:
        color = min(max(color + dcol * config.color_step, config.color_min), config.color_max)
    return make_state(config, row, col, color)


def successors(config: EnvConfig, state: GridState) -> list[GridState]:
    return [step(config, state, a) for a in range(config.num_actions)]


def ground_truth_factors(config: EnvConfig, state: GridState) -> np.ndarray:
    """(row, col) for basic, (row, col, color) for extended. Evaluation only."""
    if config.variant == "basic":
        return np.array([state.row, state.col], dtype=np.float64)
    return np.array([state.row, state.col, state.color], dtype=np.float64)


def all_states(config: EnvConfig) -> list[GridState]:
    levels = config.color_levels()
    return [make_state(config, r, c, float(v))
            for r in range(config.max_row + 1)
            for c in range(config.max_col + 1)
            for v in levels]


class GridWorld:
    """Thin stateful wrapper, convenient for the trainer and the CLI."""

    def __init__(self, config: EnvConfig):
        config.validate()
        self.config = config

    @property
    def num_actions(self) -> int:
        return self.config.num_actions

    @property
    def actions(self) -> tuple[str, ...]:
        return self.config.actions

    def reset(self, rng: np.random.Generator) -> GridState:
        return reset(self.config, rng)

    def step(self, state: GridState, action: int) -> GridState:
        return step(self.config, state, action)

    def successors(self, state: GridState) -> list[GridState]:
        return successors(self.config, state)

    def factors(self, state: GridState) -> np.ndarray:
        return ground_truth_factors(self.config, state)


# replay log rows -------------------------------------------------------

CSV_FIELDS = ("variant", "row", "col", "color")


def state_to_row(config: EnvConfig, state: GridState) -> list[str]:
    return [config.variant, str(state.row), str(state.col), repr(float(state.color))]


def state_from_row(config: EnvConfig, row: Sequence[str]) -> GridState:
    variant, r, c, color = row
    if variant != config.variant:
        raise EnvConfigError(f"row variant {variant!r} does not match config {config.variant!r}")
    return make_state(config, int(r), int(c), float(color))


def write_states_csv(path, config: EnvConfig, states: Iterable[GridState]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for s in states:
            w.writerow(state_to_row(config, s))


def read_states_csv(path, config: EnvConfig) -> list[GridState]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_FIELDS:
        raise EnvConfigError(f"{path}: missing header {','.join(CSV_FIELDS)}")
    return [state_from_row(config, r) for r in rows[1:]]
