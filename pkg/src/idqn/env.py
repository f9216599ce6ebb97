"""PelletWorld: a deterministic pellet-collection gridworld with image observations.

The agent moves Up/Down/Left/Right on a grid; walking onto a pellet eats it
for +1 reward.  An episode ends once every pellet is gone or the step cap is
reached.  States are immutable values, and :func:`edit` produces modified
copies for out-of-sample probes.
"""

from __future__ import annotations

import dataclasses
import enum
import re
from collections import deque
from pathlib import Path
from typing import Iterable

import numpy as np

from idqn.errors import ConfigError, ContractError, EditError

Cell = tuple[int, int]

EMPTY, WALL, PELLET, AGENT = 0.0, 1.0, 0.5, 0.8
PALETTE = np.array([EMPTY, PELLET, AGENT, WALL])


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


MOVES = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}


@dataclasses.dataclass(frozen=True)
class LayoutConfig:
    """How to build the initial state.

    ``pellets=None`` means "place ``n_pellets`` pellets at seeded positions";
    ``agent=None`` puts the agent at the first free cell in row-major order.
    """

    width: int = 8
    height: int = 8
    n_pellets: int = 8
    walls: frozenset[Cell] = frozenset()
    pellets: frozenset[Cell] | None = None
    agent: Cell | None = None
    cell_px: int = 4
    frames: int = 2
    step_cap: int = 200

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"grid must be at least 1×1, got {self.height}×{self.width}")
        if self.cell_px < 2:
            raise ConfigError(f"cell_px must be >= 2, got {self.cell_px}")
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if self.step_cap < 1:
            raise ConfigError(f"step_cap must be >= 1, got {self.step_cap}")
        if self.n_pellets < 0:
            raise ConfigError(f"n_pellets must be >= 0, got {self.n_pellets}")

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.height * self.cell_px, self.width * self.cell_px

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.frames,) + self.image_shape

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width


@dataclasses.dataclass(frozen=True)
class GridState:
    width: int
    height: int
    agent: Cell
    pellets: frozenset[Cell]
    walls: frozenset[Cell]
    step_count: int = 0
    rng_seed: int = 0

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def violations(self) -> list[str]:
        bad = []
        if not self.in_bounds(self.agent):
            bad.append("agent in bounds")
        if self.agent in self.walls:
            bad.append("agent not on a wall")
        if self.pellets & self.walls:
            bad.append("pellets disjoint from walls")
        if any(not self.in_bounds(c) for c in self.pellets | self.walls):
            bad.append("coordinates in bounds")
        return bad


# ---------------------------------------------------------------------------
# layouts


def seeded_cells(seed: int, free: list[Cell], k: int) -> list[Cell]:
    """Draw ``k`` distinct cells from ``free`` (row-major order) using PCG64(seed).

    Draw j takes raw 64-bit output u_j and removes ``free[u_j % len(free)]``.
    """
    if k > len(free):
        raise ConfigError(f"cannot place {k} pellets in {len(free)} free cells")
    pool = list(free)
    raw = np.random.PCG64(seed).random_raw(k) if k else []
    picked = []
    for u in raw:
        picked.append(pool.pop(int(u) % len(pool)))
    return picked


def _reachable(start: Cell, walls: frozenset[Cell], layout: LayoutConfig) -> set[Cell]:
    seen = {start}
    todo = [start]
    while todo:
        r, c = todo.pop()
        for dr, dc in MOVES.values():
            nxt = (r + dr, c + dc)
            if layout.in_bounds(nxt) and nxt not in walls and nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    return seen


def initial_state(seed: int, layout: LayoutConfig) -> GridState:
    walls = frozenset(layout.walls)
    if any(not layout.in_bounds(w) for w in walls):
        raise ConfigError("wall outside the grid")
    cells = [(r, c) for r in range(layout.height) for c in range(layout.width) if (r, c) not in walls]
    if not cells:
        raise ConfigError("layout has no free cell for the agent")
    agent = layout.agent if layout.agent is not None else cells[0]
    if not layout.in_bounds(agent) or agent in walls:
        raise ConfigError(f"agent spawn {agent} is outside the grid or on a wall")
    reach = _reachable(agent, walls, layout)
    if len(reach) == 1 and len(cells) > 1:
        raise ConfigError(f"agent spawn {agent} is walled in")
    if layout.pellets is not None:
        pellets = frozenset(layout.pellets)
        if pellets & walls or agent in pellets or any(not layout.in_bounds(p) for p in pellets):
            raise ConfigError("explicit pellets overlap walls/agent or leave the grid")
    else:
        free = [c for c in cells if c != agent]
        pellets = frozenset(seeded_cells(seed, free, layout.n_pellets))
    return GridState(layout.width, layout.height, agent, pellets, walls, 0, int(seed))


def parse_layout(text: str, **overrides) -> LayoutConfig:
    """Parse a text grid ('#' wall, '.' pellet, 'A' agent, ' ' empty)."""
    rows = text.split("\n")
    while rows and rows[-1] == "":
        rows.pop()
    if not rows:
        raise ConfigError("empty layout")
    width = max(len(r) for r in rows)
    walls, pellets, agents = set(), set(), []
    for r, line in enumerate(rows):
        for c, ch in enumerate(line):
            if ch == "#":
                walls.add((r, c))
            elif ch == ".":
                pellets.add((r, c))
            elif ch == "A":
                agents.append((r, c))
            elif ch != " ":
                raise ConfigError(f"unknown layout character {ch!r} at row {r}, col {c}")
    if len(agents) != 1:
        raise ConfigError(f"layout needs exactly one agent 'A', found {len(agents)}")
    return LayoutConfig(
        width=width,
        height=len(rows),
        n_pellets=len(pellets),
        walls=frozenset(walls),
        pellets=frozenset(pellets),
        agent=agents[0],
        **overrides,
    )


def load_layout(path: str | Path, **overrides) -> LayoutConfig:
    return parse_layout(Path(path).read_text(), **overrides)


def format_layout(state: GridState) -> str:
    lines = []
    for r in range(state.height):
        row = []
        for c in range(state.width):
            cell = (r, c)
            if cell == state.agent:
                row.append("A")
            elif cell in state.walls:
                row.append("#")
            elif cell in state.pellets:
                row.append(".")
            else:
                row.append(" ")
        lines.append("".join(row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# dynamics and rendering


def transition(state: GridState, action: Action, step_cap: int) -> tuple[GridState, float, bool]:
    dr, dc = MOVES[Action(action)]
    nxt = (state.agent[0] + dr, state.agent[1] + dc)
    if not state.in_bounds(nxt) or nxt in state.walls:
        nxt = state.agent
    reward = 0.0
    pellets = state.pellets
    if nxt in pellets:
        pellets = pellets - {nxt}
        reward = 1.0
    new = dataclasses.replace(state, agent=nxt, pellets=pellets, step_count=state.step_count + 1)
    done = not pellets or new.step_count >= step_cap
    return new, reward, done


def render(state: GridState, cell_px: int = 4) -> np.ndarray:
    """Grayscale image with one ``cell_px``×``cell_px`` block per grid cell."""
    grid = np.zeros((state.height, state.width))
    for cell in state.walls:
        grid[cell] = WALL
    for cell in state.pellets:
        grid[cell] = PELLET
    grid[state.agent] = AGENT
    return np.kron(grid, np.ones((cell_px, cell_px)))


class PelletWorld:
    """Environment wrapper that owns the frame stack for one episode at a time."""

    def __init__(self, layout: LayoutConfig | None = None):
        self.layout = layout or LayoutConfig()
        self._frames: deque[np.ndarray] = deque(maxlen=self.layout.frames)
        self._done = True
        self.state: GridState | None = None

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return self.layout.obs_shape

    @property
    def n_actions(self) -> int:
        return len(Action)

    def _observe(self) -> np.ndarray:
        return np.stack(self._frames)

    def reset(self, seed: int = 0) -> tuple[GridState, np.ndarray]:
        return self.reset_to(initial_state(seed, self.layout))

    def reset_to(self, state: GridState) -> tuple[GridState, np.ndarray]:
        """Start an episode from an arbitrary (e.g. edited) state."""
        bad = state.violations()
        if bad:
            raise ContractError(f"invalid start state: {', '.join(bad)}")
        frame = render(state, self.layout.cell_px)
        self._frames.clear()
        for _ in range(self.layout.frames):
            self._frames.append(frame)
        self.state = state
        self._done = False
        return state, self._observe()

    def step(self, state: GridState, action) -> tuple[GridState, np.ndarray, float, bool]:
        if self._done:
            raise ContractError("step() called on a finished episode; call reset() first")
        if state != self.state:
            raise ContractError("step() state does not match the environment's current state")
        new, reward, done = transition(state, action, self.layout.step_cap)
        self._frames.append(render(new, self.layout.cell_px))
        self.state = new
        self._done = done
        return new, self._observe(), reward, done


# ---------------------------------------------------------------------------
# state edits


@dataclasses.dataclass(frozen=True)
class EditCommand:
    kind: str
    row: int | None = None
    col: int | None = None

    KINDS = ("add_pellet", "remove_pellet", "move_agent", "mirror_horizontal")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown edit {self.kind!r}; expected one of {', '.join(self.KINDS)}")
        needs_cell = self.kind != "mirror_horizontal"
        if needs_cell and (self.row is None or self.col is None):
            raise ConfigError(f"edit {self.kind} needs a row and column")

    @property
    def cell(self) -> Cell:
        return (self.row, self.col)

    def __str__(self) -> str:
        if self.kind == "mirror_horizontal":
            return self.kind
        return f"{self.kind} {self.row} {self.col}"

    @classmethod
    def parse(cls, line: str) -> "EditCommand":
        parts = line.split()
        if not parts:
            raise ConfigError("empty edit line")
        if parts[0] == "mirror_horizontal":
            if len(parts) != 1:
                raise ConfigError(f"mirror_horizontal takes no arguments: {line!r}")
            return cls("mirror_horizontal")
        if len(parts) != 3:
            raise ConfigError(f"expected '<edit> <row> <col>', got {line!r}")
        try:
            return cls(parts[0], int(parts[1]), int(parts[2]))
        except ValueError as exc:
            raise ConfigError(f"bad coordinates in edit {line!r}") from exc


def parse_edits(text: str) -> list[EditCommand]:
    edits = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            edits.append(EditCommand.parse(line))
    return edits


def edit(state: GridState, cmd: EditCommand) -> GridState:
    if cmd.kind == "mirror_horizontal":
        w = state.width

        def flip(cell: Cell) -> Cell:
            return (cell[0], w - 1 - cell[1])

        return dataclasses.replace(
            state,
            agent=flip(state.agent),
            pellets=frozenset(flip(p) for p in state.pellets),
            walls=frozenset(flip(x) for x in state.walls),
        )
    cell = cmd.cell
    if not state.in_bounds(cell):
        raise EditError("coordinates in bounds", f"{cell} outside {state.height}×{state.width}")
    if cmd.kind == "add_pellet":
        if cell in state.walls:
            raise EditError("pellets disjoint from walls", f"{cell} is a wall")
        if cell == state.agent:
            raise EditError("pellet not under agent", f"agent stands on {cell}")
        if cell in state.pellets:
            raise EditError("pellet cells unique", f"{cell} already has a pellet")
        return dataclasses.replace(state, pellets=state.pellets | {cell})
    if cmd.kind == "remove_pellet":
        if cell not in state.pellets:
            raise EditError("pellet present", f"no pellet at {cell}")
        return dataclasses.replace(state, pellets=state.pellets - {cell})
    # move_agent
    if cell in state.walls:
        raise EditError("agent not on a wall", f"{cell} is a wall")
    if cell in state.pellets:
        raise EditError("pellet not under agent", f"{cell} holds a pellet")
    return dataclasses.replace(state, agent=cell)


def apply_edits(state: GridState, edits: Iterable[EditCommand]) -> GridState:
    for cmd in edits:
        state = edit(state, cmd)
    return state


def to_pgm(image: np.ndarray) -> bytes:
    """Binary PGM (P5, maxval 255) for a 2-D image with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError(f"PGM export needs a 2-D image, got shape {img.shape}")
    px = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(to_pgm(image))


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ContractError(f"{path} is not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    data = np.frombuffer(raw[m.end() : m.end() + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ContractError(f"{path} is truncated")
    return data.reshape(h, w).astype(np.float64) / maxval
