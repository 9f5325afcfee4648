"""Deterministic gridworld that manufactures scene changes, stalls, repetition
loops and execution failures on a schedule.

Scenarios are ASCII maps::

    #  wall             h  hidden wall (invisible until bumped)
    S  agent start      G  target
    i  pickup item      .  floor

Event step indices refer to observation indices: observation 1 is produced by
``reset()`` and observation ``t`` by the ``(t-1)``-th call to ``step()``.  An
event scheduled at step ``t`` shapes the transition that produces observation
``t``.
"""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .trigger import RunnerFeedback
from .visual import Frame

Cell = tuple[int, int]

DIRECTIONS: dict[str, Cell] = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}
EVENT_KINDS = ("scene_change", "stall_zone", "repetition_trap", "hard_failure")
DEFAULT_DURATION = {"scene_change": 1, "stall_zone": 4, "repetition_trap": 2, "hard_failure": 1}
CELL_PX = 8

# RGB palette; the night theme is the photographic negative of the day theme.
DAY_PALETTE = {
    "floor": (196, 200, 184),
    "wall": (58, 62, 74),
    "target": (206, 170, 64),
    "item": (120, 170, 110),
    "agent": (150, 150, 170),
}
NIGHT_PALETTE = {k: tuple(255 - c for c in v) for k, v in DAY_PALETTE.items()}


class EnvFailure(RuntimeError):
    """Terminal environment failure; the episode cannot continue."""


@dataclass(frozen=True)
class ScriptedEvent:
    step: int
    kind: str
    duration: int = 1

    def active(self, t: int) -> bool:
        return self.step <= t < self.step + self.duration


@dataclass
class GridWorld:
    name: str
    size: tuple[int, int]
    walls: frozenset[Cell]
    start: Cell
    target: Cell
    facing: str = "right"
    hidden_walls: frozenset[Cell] = frozenset()
    items: frozenset[Cell] = frozenset()
    tools: tuple[str, ...] = ()
    required_tool: str | None = None
    selected_tool: str | None = None
    scripted_events: list[ScriptedEvent] = field(default_factory=list)
    rng_seed: int = 42
    difficulty: str | None = None

    def __post_init__(self) -> None:
        blocked = self.walls | self.hidden_walls
        for label, cell in (("agent", self.start), ("target", self.target)):
            if cell in blocked or not self.in_bounds(cell):
                raise ValueError(f"{label} must start on a free cell, got {cell}")
        if self.required_tool is not None and self.required_tool not in self.tools:
            raise ValueError(f"required tool {self.required_tool!r} is not selectable")
        seen = set()
        for ev in self.scripted_events:
            if ev.kind not in EVENT_KINDS:
                raise ValueError(f"unknown event kind {ev.kind!r}")
            if (ev.kind, ev.step) in seen:
                raise ValueError(f"duplicate event {ev.kind} at step {ev.step}")
            seen.add((ev.kind, ev.step))
        self.scripted_events.sort(key=lambda e: (e.step, e.kind))
        if self.difficulty is None:
            self.difficulty = difficulty_for_size(self.size)

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.size[0] and 0 <= cell[1] < self.size[1]

    def inject_event(self, kind: str, at_step: int, duration: int | None = None) -> GridWorld:
        ev = ScriptedEvent(at_step, kind, duration or DEFAULT_DURATION.get(kind, 1))
        return replace(self, scripted_events=list(self.scripted_events) + [ev])

    # scenario files ---------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> GridWorld:
        rows = data["grid"]
        walls, hidden, items = set(), set(), set()
        start = target = None
        width = max(len(r) for r in rows)
        for i, row in enumerate(rows):
            for j, ch in enumerate(row.ljust(width, "#")):
                if ch == "#":
                    walls.add((i, j))
                elif ch == "h":
                    hidden.add((i, j))
                elif ch == "i":
                    items.add((i, j))
                elif ch == "S":
                    start = (i, j)
                elif ch == "G":
                    target = (i, j)
                elif ch != ".":
                    raise ValueError(f"unknown map symbol {ch!r} at row {i}, col {j}")
        if start is None or target is None:
            raise ValueError("scenario map needs exactly one S and one G")
        events = [
            ScriptedEvent(int(e["step"]), e["kind"], int(e.get("duration", DEFAULT_DURATION.get(e["kind"], 1))))
            for e in data.get("events", [])
        ]
        return cls(
            name=data.get("name", "scenario"),
            size=(len(rows), width),
            walls=frozenset(walls),
            hidden_walls=frozenset(hidden),
            items=frozenset(items),
            start=start,
            target=target,
            facing=data.get("facing", "right"),
            tools=tuple(data.get("tools", ())),
            required_tool=data.get("required_tool"),
            selected_tool=data.get("selected_tool"),
            scripted_events=events,
            rng_seed=int(data.get("seed", 42)),
            difficulty=data.get("difficulty"),
        )

    def to_dict(self) -> dict:
        rows = []
        for i in range(self.size[0]):
            row = []
            for j in range(self.size[1]):
                c = (i, j)
                row.append(
                    "#" if c in self.walls else "h" if c in self.hidden_walls else
                    "S" if c == self.start else "G" if c == self.target else
                    "i" if c in self.items else "."
                )
            rows.append("".join(row))
        return {
            "name": self.name,
            "grid": rows,
            "facing": self.facing,
            "tools": list(self.tools),
            "required_tool": self.required_tool,
            "selected_tool": self.selected_tool,
            "events": [{"step": e.step, "kind": e.kind, "duration": e.duration} for e in self.scripted_events],
            "seed": self.rng_seed,
            "difficulty": self.difficulty,
        }


def difficulty_for_size(size: tuple[int, int]) -> str:
    n = max(size)
    if n <= 8:
        return "easy"
    if n <= 12:
        return "medium"
    return "hard"


def load_scenario(path: str | Path) -> GridWorld:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return GridWorld.from_dict(data)


def shortest_path(size: tuple[int, int], blocked: set[Cell] | frozenset[Cell], start: Cell,
                  goal: Cell) -> list[Cell] | None:
    """BFS path from start to goal (inclusive) with a fixed direction order."""
    if start == goal:
        return [start]
    prev: dict[Cell, Cell] = {start: start}
    frontier = deque([start])
    while frontier:
        cur = frontier.popleft()
        for dr, dc in DIRECTIONS.values():
            nxt = (cur[0] + dr, cur[1] + dc)
            if nxt in prev or nxt in blocked:
                continue
            if not (0 <= nxt[0] < size[0] and 0 <= nxt[1] < size[1]):
                continue
            prev[nxt] = cur
            if nxt == goal:
                path = [nxt]
                while path[-1] != start:
                    path.append(prev[path[-1]])
                return path[::-1]
            frontier.append(nxt)
    return None


def bfs_distances(size: tuple[int, int], blocked, goal: Cell) -> dict[Cell, int]:
    dist = {goal: 0}
    frontier = deque([goal])
    while frontier:
        cur = frontier.popleft()
        for dr, dc in DIRECTIONS.values():
            nxt = (cur[0] + dr, cur[1] + dc)
            if nxt in dist or nxt in blocked:
                continue
            if not (0 <= nxt[0] < size[0] and 0 <= nxt[1] < size[1]):
                continue
            dist[nxt] = dist[cur] + 1
            frontier.append(nxt)
    return dist


def move_action(src: Cell, dst: Cell) -> str:
    delta = (dst[0] - src[0], dst[1] - src[1])
    for name, d in DIRECTIONS.items():
        if d == delta:
            return f"move:{name}"
    raise ValueError(f"cells {src} and {dst} are not adjacent")


@dataclass(frozen=True)
class Observation:
    """Structured facts the runner extracts for the controllers."""

    step: int
    position: Cell
    facing: str
    selected_tool: str | None
    tools: tuple[str, ...]
    required_tool: str | None
    target: Cell
    size: tuple[int, int]
    known_walls: frozenset[Cell]
    inventory: int
    theme: str
    ui_text: str

    def state_text(self) -> str:
        r, c = self.position
        tr, tc = self.target
        tool = self.selected_tool or "none"
        return f"at r{r} c{c} facing {self.facing} holding {tool} target r{tr} c{tc} {self.theme}"

    def free(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.size[0] and 0 <= cell[1] < self.size[1] and cell not in self.known_walls


@dataclass(frozen=True)
class EnvStep:
    frame: Frame
    ui_text: str
    feedback: RunnerFeedback
    observation: Observation
    done: bool = False


class GridEnv:
    def __init__(self, world: GridWorld):
        self.world = world
        self.reset()

    # schema -------------------------------------------------------------

    def valid_actions(self) -> list[str]:
        acts = [f"move:{d}" for d in DIRECTIONS] + [f"face:{d}" for d in DIRECTIONS]
        acts += [f"select:{t}" for t in self.world.tools]
        acts.append("interact")
        return acts

    # lifecycle ------------------------------------------------------------

    def reset(self) -> EnvStep:
        w = self.world
        self.t = 1
        self.pos = w.start
        self.facing = w.facing
        self.tool = w.selected_tool
        self.items = set(w.items)
        self.inventory = 0
        self.discovered: set[Cell] = set()
        self.theme = "day"
        self.events = list(w.scripted_events)
        self.success = False
        self.rng = random.Random(w.rng_seed)
        return self._emit(RunnerFeedback(structured_message="reset"))

    def inject_event(self, kind: str, at_step: int, duration: int | None = None) -> None:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        if at_step <= self.t:
            raise ValueError(f"event step {at_step} is not after the current step {self.t}")
        if any(e.kind == kind and e.step == at_step for e in self.events):
            raise ValueError(f"duplicate event {kind} at step {at_step}")
        self.events.append(ScriptedEvent(at_step, kind, duration or DEFAULT_DURATION[kind]))
        self.events.sort(key=lambda e: (e.step, e.kind))

    def _active(self, kind: str) -> bool:
        return any(e.kind == kind and e.active(self.t) for e in self.events)

    def step(self, action: str | None) -> EnvStep:
        if self.success:
            raise EnvFailure("episode already finished")
        self.t += 1
        scene = self._active("scene_change")
        if scene:
            self.theme = "night" if self.theme == "day" else "day"

        if self._active("hard_failure"):
            fb = RunnerFeedback(execution_error=True, structured_message="execution_error")
        else:
            fb = self._apply(action)
            if self._active("stall_zone"):
                fb = RunnerFeedback(structured_message="no_observable_change")

        self.success = self.evaluate_success()
        fb = replace(
            fb,
            task_or_subgoal_completed=fb.task_or_subgoal_completed or self.success,
            menu_or_dialogue_transition=fb.menu_or_dialogue_transition or scene,
        )
        return self._emit(fb)

    def _apply(self, action: str | None) -> RunnerFeedback:
        if not action:
            return RunnerFeedback(invalid_action=True, structured_message="empty_action")
        name, _, arg = action.partition(":")
        if name == "move" and arg in DIRECTIONS:
            if self._active("repetition_trap"):
                return RunnerFeedback(structured_message="slipped_back")
            dr, dc = DIRECTIONS[arg]
            nxt = (self.pos[0] + dr, self.pos[1] + dc)
            if not self.world.in_bounds(nxt) or nxt in self.world.walls:
                return RunnerFeedback(invalid_action=True, structured_message="move_blocked")
            if nxt in self.world.hidden_walls:
                self.discovered.add(nxt)
                return RunnerFeedback(invalid_action=True, structured_message="move_blocked")
            self.pos = nxt
            self.facing = arg
            picked = nxt in self.items
            if picked:
                self.items.discard(nxt)
                self.inventory += 1
            return RunnerFeedback(position_or_facing_changed=True, inventory_delta=picked,
                                  structured_message="moved")
        if name == "face" and arg in DIRECTIONS:
            if arg == self.facing:
                return RunnerFeedback(structured_message="already_facing")
            self.facing = arg
            return RunnerFeedback(position_or_facing_changed=True, structured_message="turned")
        if name == "select":
            if arg not in self.world.tools:
                return RunnerFeedback(invalid_action=True, structured_message="unknown_tool")
            if arg == self.tool:
                return RunnerFeedback(structured_message="already_selected")
            self.tool = arg
            return RunnerFeedback(selected_item_changed=True, structured_message="selected")
        if name == "interact" and not arg:
            dr, dc = DIRECTIONS[self.facing]
            front = (self.pos[0] + dr, self.pos[1] + dc)
            if front in self.items:
                self.items.discard(front)
                self.inventory += 1
                return RunnerFeedback(inventory_delta=True, productive_execution_confirmed=True,
                                      structured_message="collected")
            return RunnerFeedback(structured_message="nothing_to_interact")
        return RunnerFeedback(invalid_action=True, structured_message="unknown_action")

    def evaluate_success(self) -> bool:
        w = self.world
        return self.pos == w.target and (w.required_tool is None or self.tool == w.required_tool)

    # observation ----------------------------------------------------------

    def observation(self) -> Observation:
        return Observation(
            step=self.t,
            position=self.pos,
            facing=self.facing,
            selected_tool=self.tool,
            tools=self.world.tools,
            required_tool=self.world.required_tool,
            target=self.world.target,
            size=self.world.size,
            known_walls=frozenset(self.world.walls | self.discovered),
            inventory=self.inventory,
            theme=self.theme,
            ui_text=self.ui_text(),
        )

    def ui_text(self) -> str:
        return (f"step {self.t} pos {self.pos[0]},{self.pos[1]} facing {self.facing} "
                f"tool {self.tool or 'none'} inventory {self.inventory} theme {self.theme}")

    def render(self) -> Frame:
        w = self.world
        pal = DAY_PALETTE if self.theme == "day" else NIGHT_PALETTE
        cells = np.empty((w.size[0], w.size[1], 3), dtype=np.uint8)
        cells[:] = pal["floor"]
        for c in w.walls | self.discovered:
            cells[c] = pal["wall"]
        for c in self.items:
            cells[c] = pal["item"]
        cells[w.target] = pal["target"]
        cells[self.pos] = pal["agent"]
        pixels = np.repeat(np.repeat(cells, CELL_PX, axis=0), CELL_PX, axis=1)
        return Frame(pixels)

    def _emit(self, fb: RunnerFeedback) -> EnvStep:
        return EnvStep(self.render(), self.ui_text(), fb, self.observation(), done=self.success)


def random_world(seed: int, side: int = 8, wall_density: float = 0.18, n_hidden: int = 2,
                 n_events: int = 2, horizon: int = 20, tools: tuple[str, ...] = ("hoe", "axe"),
                 name: str | None = None) -> GridWorld:
    """Sample a solvable bordered world with hidden walls and random scripted events."""
    rng = random.Random(seed)
    while True:
        border = {(i, j) for i in range(side) for j in range(side)
                  if i in (0, side - 1) or j in (0, side - 1)}
        interior = [(i, j) for i in range(1, side - 1) for j in range(1, side - 1)]
        rng.shuffle(interior)
        start, target = interior[0], interior[1]
        rest = interior[2:]
        n_walls = int(wall_density * len(interior))
        walls = border | set(rest[:n_walls])
        hidden = set(rest[n_walls:n_walls + n_hidden])
        items = set(rest[n_walls + n_hidden:n_walls + n_hidden + 2])
        if shortest_path((side, side), walls | hidden, start, target) is None:
            continue
        events: list[ScriptedEvent] = []
        used = set()
        for _ in range(n_events):
            kind = rng.choice(EVENT_KINDS)
            step = rng.randint(2, horizon)
            if (kind, step) in used:
                continue
            used.add((kind, step))
            events.append(ScriptedEvent(step, kind, DEFAULT_DURATION[kind]))
        return GridWorld(
            name=name or f"random-{seed}",
            size=(side, side),
            walls=frozenset(walls),
            hidden_walls=frozenset(hidden),
            items=frozenset(items),
            start=start,
            target=target,
            tools=tools,
            required_tool=rng.choice(tools) if tools else None,
            scripted_events=events,
            rng_seed=seed,
        )
