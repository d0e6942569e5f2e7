"""Per-robot local observations, merged joint maps and fixed-size features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import CellKind, GridWorld, comm_graph, frontier_mask

JOINT_POOL = 5
N_CHANNELS = 4


@dataclass
class LocalObservation:
    """Four binary channels on a (2r+1)^2 window centred on the robot.

    Channel order: obstacles, frontier, uncovered targets, neighbour robots.
    """

    channels: np.ndarray  # (4, 2r+1, 2r+1) bool
    position: tuple[int, int]
    heading: int
    grid_shape: tuple[int, int]  # (H, W)

    @property
    def obstacle(self) -> np.ndarray:
        return self.channels[0]

    @property
    def frontier(self) -> np.ndarray:
        return self.channels[1]

    @property
    def target(self) -> np.ndarray:
        return self.channels[2]

    @property
    def neighbors(self) -> np.ndarray:
        return self.channels[3]


@dataclass
class JointObservation:
    explored: np.ndarray  # (H, W) bool
    covered: np.ndarray  # (H, W) bool


def global_layers(world: GridWorld, graph=None) -> tuple[np.ndarray, list[list[int]]]:
    """Masked (4, H, W) layers shared by all robots' windows, plus the comm graph.

    The neighbour layer is left empty here; it depends on the observing robot.
    """
    explored = world.explored
    layers = np.zeros((N_CHANNELS,) + explored.shape, dtype=bool)
    layers[0] = explored & (world.kind == CellKind.OBSTACLE)
    layers[1] = frontier_mask(world)
    layers[2] = explored & (world.kind == CellKind.TARGET) & ~world.covered
    if graph is None:
        graph = comm_graph(world)
    return layers, graph


def local_observation(world: GridWorld, robot_id: int, layers=None, graph=None) -> LocalObservation:
    if layers is None or graph is None:
        layers, graph = global_layers(world, graph)
    r = world.r_fov
    robot = world.robots[robot_id]
    size = 2 * r + 1
    padded = np.pad(layers[:3], ((0, 0), (r, r), (r, r)))
    channels = np.zeros((N_CHANNELS, size, size), dtype=bool)
    channels[:3] = padded[:, robot.y : robot.y + size, robot.x : robot.x + size]
    for j in graph[robot_id]:
        other = world.robots[j]
        wx, wy = other.x - robot.x + r, other.y - robot.y + r
        if 0 <= wx < size and 0 <= wy < size and world.explored[other.y, other.x]:
            channels[3, wy, wx] = True
    return LocalObservation(channels, robot.position, int(robot.heading), world.kind.shape)


def joint_observation(world: GridWorld, robot_id: int | None = None) -> JointObservation:
    """Merged explored/covered maps.

    With ``robot_id`` given, only robots in that robot's communication
    component contribute (decentralised evaluation); otherwise the whole team.
    """
    if robot_id is None:
        return JointObservation(world.explored.copy(), world.covered.copy())
    members = comm_component(comm_graph(world), robot_id)
    explored = world.seen[members].any(axis=0)
    covered = np.isin(world.covered_by, members) & world.covered
    return JointObservation(explored, covered)


def comm_component(graph, robot_id: int) -> list[int]:
    stack, seen = [robot_id], {robot_id}
    while stack:
        i = stack.pop()
        for j in graph[i]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return sorted(seen)


def pooled_size(r_fov: int) -> int:
    return -(-(2 * r_fov + 1) // 2)


def local_feature_dim(r_fov: int) -> int:
    return N_CHANNELS * pooled_size(r_fov) ** 2 + 2 + 4


JOINT_FEATURE_DIM = 2 * JOINT_POOL * JOINT_POOL


def _avg_pool2(channels: np.ndarray) -> np.ndarray:
    c, h, w = channels.shape
    ph, pw = -(-h // 2), -(-w // 2)
    sums = np.zeros((c, 2 * ph, 2 * pw))
    counts = np.zeros((2 * ph, 2 * pw))
    sums[:, :h, :w] = channels
    counts[:h, :w] = 1.0
    sums = sums.reshape(c, ph, 2, pw, 2).sum(axis=(2, 4))
    counts = counts.reshape(ph, 2, pw, 2).sum(axis=(1, 3))
    return sums / counts


def egocentric(channels: np.ndarray, heading: int) -> np.ndarray:
    """Rotate world-aligned window channels so the robot's heading points up."""
    return np.rot90(channels, k=int(heading), axes=(1, 2))


def featurize_local(obs: LocalObservation) -> np.ndarray:
    pooled = _avg_pool2(egocentric(obs.channels, obs.heading).astype(float)).ravel()
    H, W = obs.grid_shape
    x, y = obs.position
    heading = np.zeros(4)
    heading[obs.heading] = 1.0
    return np.concatenate([pooled, [x / W, y / H], heading])


def pool_grid(grid: np.ndarray, out: int = JOINT_POOL) -> np.ndarray:
    """Average-pool a 2-D grid onto an ``out x out`` partition of its rows/cols."""
    grid = np.asarray(grid, dtype=float)
    row_edges = np.linspace(0, grid.shape[0], out + 1).round().astype(int)
    col_edges = np.linspace(0, grid.shape[1], out + 1).round().astype(int)
    pooled = np.zeros((out, out))
    for i in range(out):
        for j in range(out):
            block = grid[row_edges[i] : row_edges[i + 1], col_edges[j] : col_edges[j + 1]]
            pooled[i, j] = block.mean() if block.size else 0.0
    return pooled


def pool_cell_counts(shape: tuple[int, int], out: int = JOINT_POOL) -> np.ndarray:
    row_edges = np.linspace(0, shape[0], out + 1).round().astype(int)
    col_edges = np.linspace(0, shape[1], out + 1).round().astype(int)
    return np.outer(np.diff(row_edges), np.diff(col_edges))


def featurize_joint(jobs: JointObservation) -> np.ndarray:
    return np.concatenate([pool_grid(jobs.explored).ravel(), pool_grid(jobs.covered).ravel()])


def aggregate_neighbors(features, graph) -> list[np.ndarray]:
    """Blend each robot's features with the mean of its neighbours' (0.5/0.5)."""
    features = [np.asarray(f, dtype=float) for f in features]
    out = []
    for i, f in enumerate(features):
        nbrs = graph[i]
        if not nbrs:
            out.append(f.copy())
        else:
            out.append(0.5 * (f + np.mean([features[j] for j in nbrs], axis=0)))
    return out


def robot_features(world: GridWorld) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Local, joint and aggregated feature matrices for every robot.

    Returns arrays of shape (N, F), (F_j,) and (N, F).
    """
    layers, graph = global_layers(world)
    local = np.stack(
        [featurize_local(local_observation(world, i, layers, graph)) for i in range(world.n_robots)]
    )
    joint = featurize_joint(JointObservation(world.explored, world.covered))
    agg = np.stack(aggregate_neighbors(list(local), graph))
    return local, joint, agg
