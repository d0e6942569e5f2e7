"""Ground-truth gridworld: map generation, kinematics, sensing, frontiers.

Grids are stored as numpy arrays indexed ``[y, x]`` (row-major); public
coordinates are ``(x, y)`` tuples. Heading North points towards ``y - 1``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ActionArityMismatch, InfeasibleScenario

Coord = tuple[int, int]


class CellKind(IntEnum):
    FREE = 0
    OBSTACLE = 1
    TARGET = 2


class Heading(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    @property
    def delta(self) -> Coord:
        return HEADING_DELTAS[self]

    def turned_right(self) -> "Heading":
        return Heading((self + 1) % 4)

    def turned_left(self) -> "Heading":
        return Heading((self - 1) % 4)


HEADING_DELTAS = {
    Heading.NORTH: (0, -1),
    Heading.EAST: (1, 0),
    Heading.SOUTH: (0, 1),
    Heading.WEST: (-1, 0),
}


class PrimitiveAction(IntEnum):
    MOVE_FORWARD = 0
    TURN_RIGHT = 1
    MOVE_BACKWARD = 2
    TURN_LEFT = 3
    STOP = 4


N_PRIMITIVES = len(PrimitiveAction)


@dataclass(frozen=True)
class ScenarioConfig:
    width: int = 25
    height: int = 25
    n_obstacles: int = 250
    n_targets: int = 100
    n_robots: int = 4
    r_fov: int = 4
    r_comm: float = 10.0
    rad_e: float | None = None  # defaults to r_fov
    episode_len: int = 128
    seed: int = 0
    spawn: str = "cluster"  # "cluster" or "uniform"

    @property
    def exploration_radius(self) -> float:
        return float(self.r_fov if self.rad_e is None else self.rad_e)

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise InfeasibleScenario(f"grid must be non-empty, got {self.width}x{self.height}")
        if min(self.n_obstacles, self.n_targets, self.n_robots) < 0:
            raise InfeasibleScenario("counts must be nonnegative")
        if self.n_obstacles + self.n_targets + self.n_robots > self.width * self.height:
            raise InfeasibleScenario(
                f"{self.n_obstacles} obstacles + {self.n_targets} targets + {self.n_robots} robots "
                f"do not fit on {self.width}x{self.height}"
            )
        if self.n_obstacles >= self.width * self.height:
            raise InfeasibleScenario("at least one free cell is required")
        if self.r_fov < 1:
            raise InfeasibleScenario("r_fov must be >= 1")
        if self.r_comm < 0:
            raise InfeasibleScenario("r_comm must be >= 0")
        if self.episode_len < 1:
            raise InfeasibleScenario("episode length must be >= 1")
        if self.spawn not in ("cluster", "uniform"):
            raise InfeasibleScenario(f"unknown spawn mode {self.spawn!r}")

    def replace(self, **changes) -> "ScenarioConfig":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass
class RobotPose:
    id: int
    x: int
    y: int
    heading: Heading = Heading.NORTH

    @property
    def position(self) -> Coord:
        return (self.x, self.y)


@dataclass
class StepEvents:
    newly_explored: list[int]
    targets_covered: list[int]
    collisions: list[bool]
    explored_cells: list[list[Coord]] = field(default_factory=list)
    covered_cells: list[Coord] = field(default_factory=list)


@dataclass
class GridWorld:
    kind: np.ndarray  # (H, W) int8 of CellKind
    robots: list[RobotPose]
    r_fov: int = 4
    r_comm: float = 10.0
    explored: np.ndarray | None = None
    covered: np.ndarray | None = None
    step_count: int = 0
    seen: np.ndarray | None = None  # (N, H, W) per-robot sensing history
    covered_by: np.ndarray | None = None  # (H, W) robot id or -1

    def __post_init__(self):
        self.kind = np.asarray(self.kind, dtype=np.int8)
        shape = self.kind.shape
        if self.explored is None:
            self.explored = np.zeros(shape, dtype=bool)
        if self.covered is None:
            self.covered = np.zeros(shape, dtype=bool)
        if self.seen is None:
            self.seen = np.zeros((len(self.robots),) + shape, dtype=bool)
        if self.covered_by is None:
            self.covered_by = np.full(shape, -1, dtype=np.int16)

    @property
    def height(self) -> int:
        return self.kind.shape[0]

    @property
    def width(self) -> int:
        return self.kind.shape[1]

    @property
    def n_robots(self) -> int:
        return len(self.robots)

    @property
    def obstacles(self) -> np.ndarray:
        return self.kind == CellKind.OBSTACLE

    @property
    def targets(self) -> np.ndarray:
        return self.kind == CellKind.TARGET

    @property
    def n_free(self) -> int:
        return int(np.count_nonzero(self.kind != CellKind.OBSTACLE))

    @property
    def n_targets(self) -> int:
        return int(np.count_nonzero(self.kind == CellKind.TARGET))

    def explored_free_count(self) -> int:
        return int(np.count_nonzero(self.explored & (self.kind != CellKind.OBSTACLE)))

    def covered_count(self) -> int:
        return int(np.count_nonzero(self.covered))

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def copy(self) -> "GridWorld":
        return copy.deepcopy(self)

    def positions(self) -> list[Coord]:
        return [r.position for r in self.robots]

    def is_done(self) -> bool:
        free = self.kind != CellKind.OBSTACLE
        return bool(np.all(self.explored[free]) and np.all(self.covered[self.targets]))


def _disc_mask(world: GridWorld, x: int, y: int) -> tuple[slice, slice, np.ndarray]:
    r = world.r_fov
    y0, y1 = max(0, y - r), min(world.height, y + r + 1)
    x0, x1 = max(0, x - r), min(world.width, x + r + 1)
    yy, xx = np.ogrid[y0 - y : y1 - y, x0 - x : x1 - x]
    return slice(y0, y1), slice(x0, x1), (xx * xx + yy * yy) <= r * r


def sense(world: GridWorld, robot_id: int) -> set[Coord]:
    """Unexplored in-bounds cells inside the robot's sensing disc."""
    robot = world.robots[robot_id]
    ys, xs, disc = _disc_mask(world, robot.x, robot.y)
    fresh = disc & ~world.explored[ys, xs]
    dy, dx = np.nonzero(fresh)
    return {(int(x + xs.start), int(y + ys.start)) for y, x in zip(dy, dx)}


def _apply_sensing(world: GridWorld) -> list[list[Coord]]:
    # lower robot ids are credited first, so shared cells go to the lowest id
    credited = []
    for robot in world.robots:
        ys, xs, disc = _disc_mask(world, robot.x, robot.y)
        fresh = disc & ~world.explored[ys, xs]
        dy, dx = np.nonzero(fresh)
        world.explored[ys, xs] |= disc
        world.seen[robot.id, ys, xs] |= disc
        credited.append([(int(x + xs.start), int(y + ys.start)) for y, x in zip(dy, dx)])
    return credited


def initial_sense(world: GridWorld) -> StepEvents:
    """Explore the starting discs (and cover any target under a robot) without moving."""
    cells = _apply_sensing(world)
    covered_counts, covered_cells = _apply_coverage(world)
    n = world.n_robots
    return StepEvents([len(c) for c in cells], covered_counts, [False] * n, cells, covered_cells)


def _apply_coverage(world: GridWorld) -> tuple[list[int], list[Coord]]:
    counts, cells = [], []
    for robot in world.robots:
        if world.kind[robot.y, robot.x] == CellKind.TARGET and not world.covered[robot.y, robot.x]:
            world.covered[robot.y, robot.x] = True
            world.covered_by[robot.y, robot.x] = robot.id
            counts.append(1)
            cells.append(robot.position)
        else:
            counts.append(0)
    return counts, cells


def step(world: GridWorld, actions) -> tuple[GridWorld, StepEvents]:
    """Advance the world one timestep in place.

    Robots act sequentially by id: a move is cancelled when it would leave the
    grid, enter an obstacle, or enter a cell occupied by another robot (already
    moved lower ids, not-yet-moved higher ids).
    """
    actions = [PrimitiveAction(int(a)) for a in actions]
    if len(actions) != world.n_robots:
        raise ActionArityMismatch(f"expected {world.n_robots} actions, got {len(actions)}")

    occupied = {r.position for r in world.robots}
    collisions = []
    for robot, action in zip(world.robots, actions):
        hit = False
        if action == PrimitiveAction.TURN_RIGHT:
            robot.heading = robot.heading.turned_right()
        elif action == PrimitiveAction.TURN_LEFT:
            robot.heading = robot.heading.turned_left()
        elif action in (PrimitiveAction.MOVE_FORWARD, PrimitiveAction.MOVE_BACKWARD):
            dx, dy = robot.heading.delta
            if action == PrimitiveAction.MOVE_BACKWARD:
                dx, dy = -dx, -dy
            nx, ny = robot.x + dx, robot.y + dy
            if (
                not world.in_bounds(nx, ny)
                or world.kind[ny, nx] == CellKind.OBSTACLE
                or (nx, ny) in occupied
            ):
                hit = True
            else:
                occupied.discard(robot.position)
                robot.x, robot.y = nx, ny
                occupied.add((nx, ny))
        collisions.append(hit)

    cells = _apply_sensing(world)
    covered_counts, covered_cells = _apply_coverage(world)
    world.step_count += 1
    events = StepEvents([len(c) for c in cells], covered_counts, collisions, cells, covered_cells)
    return world, events


def frontier_mask(world: GridWorld) -> np.ndarray:
    explored = world.explored
    unexplored = ~explored
    touches = np.zeros_like(explored)
    touches[1:, :] |= unexplored[:-1, :]
    touches[:-1, :] |= unexplored[1:, :]
    touches[:, 1:] |= unexplored[:, :-1]
    touches[:, :-1] |= unexplored[:, 1:]
    return explored & (world.kind != CellKind.OBSTACLE) & touches


def frontier_cells(world: GridWorld) -> set[Coord]:
    """Explored non-obstacle cells 4-adjacent to at least one unexplored cell."""
    ys, xs = np.nonzero(frontier_mask(world))
    return {(int(x), int(y)) for y, x in zip(ys, xs)}


def comm_graph(world: GridWorld) -> list[list[int]]:
    """Adjacency lists: i ~ j iff Euclidean distance <= r_comm (inclusive)."""
    pos = np.array(world.positions(), dtype=float).reshape(-1, 2)
    n = len(pos)
    adj: list[list[int]] = [[] for _ in range(n)]
    if n < 2:
        return adj
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    r2 = float(world.r_comm) ** 2
    for i in range(n):
        for j in range(n):
            if i != j and d2[i, j] <= r2:
                adj[i].append(j)
    return adj


# ---------------------------------------------------------------------------
# map generation

_RING = ((0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1))


def _removal_keeps_connected(free: np.ndarray, y: int, x: int) -> bool:
    H, W = free.shape
    ring = []
    for dx, dy in _RING:
        nx, ny = x + dx, y + dy
        ring.append(0 <= nx < W and 0 <= ny < H and bool(free[ny, nx]))
    orth = [ring[i] for i in (0, 2, 4, 6)]
    n_orth = sum(orth)
    if n_orth == 0:
        # an isolated cell would only exist if it were the last free cell
        return False
    if n_orth == 1:
        return True
    # label runs of free cells around the ring; a single run holding every
    # free orthogonal neighbour proves local (hence global) connectivity
    runs = [-1] * 8
    label = -1
    for i in range(8):
        if ring[i]:
            if i == 0 or not ring[i - 1]:
                label += 1
            runs[i] = label
    if ring[0] and ring[7] and runs[7] != runs[0]:
        last = runs[7]
        runs = [runs[0] if r == last else r for r in runs]
    if len({runs[i] for i in (0, 2, 4, 6) if ring[i]}) == 1:
        return True
    trial = free.copy()
    trial[y, x] = False
    _, n_comp = ndimage.label(trial)
    return n_comp == 1


def connected_obstacles(width: int, height: int, n_obstacles: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean (H, W) obstacle mask with a single 4-connected free component.

    Cells are visited in a random order and turned into obstacles only when the
    remaining free space stays connected; rejected cells are revisited in later
    passes so any count up to ``W*H - 1`` is reachable.
    """
    free = np.ones((height, width), dtype=bool)
    order = [int(i) for i in rng.permutation(width * height)]
    placed = 0
    while placed < n_obstacles:
        deferred = []
        for idx in order:
            if placed == n_obstacles:
                break
            y, x = divmod(idx, width)
            if _removal_keeps_connected(free, y, x):
                free[y, x] = False
                placed += 1
            else:
                deferred.append(idx)
        if len(deferred) == len(order):
            raise InfeasibleScenario(f"could not place {n_obstacles} obstacles with connected free space")
        order = deferred
    return ~free


def generate_map(config: ScenarioConfig) -> GridWorld:
    config.validate()
    rng = np.random.default_rng(config.seed)
    W, H = config.width, config.height
    obstacles = connected_obstacles(W, H, config.n_obstacles, rng)
    kind = np.where(obstacles, CellKind.OBSTACLE, CellKind.FREE).astype(np.int8)

    free_idx = np.flatnonzero(~obstacles)
    if config.n_targets + config.n_robots > len(free_idx):
        raise InfeasibleScenario("not enough free cells for targets and robots")
    target_idx = np.sort(rng.choice(free_idx, size=config.n_targets, replace=False))
    kind.flat[target_idx] = CellKind.TARGET
    spawn_idx = np.flatnonzero(kind == CellKind.FREE)
    if config.spawn == "uniform":
        robot_idx = rng.choice(spawn_idx, size=config.n_robots, replace=False)
    else:
        anchor = int(rng.choice(spawn_idx)) if config.n_robots else 0
        robot_idx = _cluster_spawn(kind, anchor, config.n_robots)
    robots = [RobotPose(i, int(idx % W), int(idx // W)) for i, idx in enumerate(robot_idx)]
    return GridWorld(kind, robots, r_fov=config.r_fov, r_comm=config.r_comm)


def _cluster_spawn(kind: np.ndarray, anchor: int, n: int) -> list[int]:
    """The ``n`` free non-target cells nearest ``anchor`` in BFS order."""
    H, W = kind.shape
    picked, seen = [], {anchor}
    layer = [anchor]
    while layer and len(picked) < n:
        picked.extend(c for c in layer if kind.flat[c] == CellKind.FREE)
        nxt = set()
        for c in layer:
            y, x = divmod(c, W)
            for dx, dy in HEADING_DELTAS.values():
                nx, ny = x + dx, y + dy
                if 0 <= nx < W and 0 <= ny < H:
                    nc = ny * W + nx
                    if nc not in seen and kind.flat[nc] != CellKind.OBSTACLE:
                        seen.add(nc)
                        nxt.add(nc)
        layer = sorted(nxt)
    return picked[:n]


def free_space_connected(world: GridWorld) -> bool:
    _, n = ndimage.label(world.kind != CellKind.OBSTACLE)
    return n == 1


# ---------------------------------------------------------------------------
# map text format

_CHARS = {CellKind.FREE: ".", CellKind.OBSTACLE: "#", CellKind.TARGET: "T"}


def dumps_map(world: GridWorld) -> str:
    if world.n_robots > 10:
        raise ValueError("map text format encodes at most 10 robots")
    rows = [[_CHARS[CellKind(k)] for k in row] for row in world.kind]
    for r in world.robots:
        if world.kind[r.y, r.x] != CellKind.FREE:
            raise ValueError(f"robot {r.id} must start on a free cell to be encoded")
        rows[r.y][r.x] = str(r.id)
    lines = [f"{world.width} {world.height}"] + ["".join(row) for row in rows]
    return "\n".join(lines) + "\n"


def loads_map(text: str, r_fov: int = 4, r_comm: float = 10.0) -> GridWorld:
    lines = [ln.rstrip("\r") for ln in text.splitlines() if ln.strip()]
    try:
        W, H = (int(v) for v in lines[0].split())
    except (IndexError, ValueError) as exc:
        raise ValueError("map header must be 'W H'") from exc
    rows = lines[1 : 1 + H]
    if len(rows) != H or any(len(r) != W for r in rows):
        raise ValueError(f"expected {H} rows of width {W}")
    kind = np.zeros((H, W), dtype=np.int8)
    starts: dict[int, Coord] = {}
    lookup = {v: k for k, v in _CHARS.items()}
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch.isdigit():
                starts[int(ch)] = (x, y)
            elif ch in lookup:
                kind[y, x] = lookup[ch]
            else:
                raise ValueError(f"unknown map character {ch!r} at ({x}, {y})")
    if sorted(starts) != list(range(len(starts))):
        raise ValueError("robot ids must be contiguous from 0")
    robots = [RobotPose(i, *starts[i]) for i in range(len(starts))]
    return GridWorld(kind, robots, r_fov=r_fov, r_comm=r_comm)


def save_map(world: GridWorld, path: str | Path) -> None:
    Path(path).write_text(dumps_map(world))


def load_map(path: str | Path, r_fov: int = 4, r_comm: float = 10.0) -> GridWorld:
    return loads_map(Path(path).read_text(), r_fov=r_fov, r_comm=r_comm)
