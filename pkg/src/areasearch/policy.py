"""Role and primitive policies, role switching, and scripted baselines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .observation import JOINT_FEATURE_DIM, local_feature_dim, robot_features
from .reward import N_ROLES, RoleAction
from .world import (
    CellKind,
    GridWorld,
    Heading,
    HEADING_DELTAS,
    N_PRIMITIVES,
    PrimitiveAction,
    frontier_mask,
)

__all__ = [
    "RoleAction",
    "PrimitiveAction",
    "PolicyBundle",
    "role_distribution",
    "primitive_distribution",
    "select_roles",
    "random_policy",
    "greedy_policy",
    "scripted_executor",
    "RandomPolicy",
    "GreedyPolicy",
    "ScriptedPolicy",
    "LearnedPolicy",
]

HIDDEN = (64, 32)


@dataclass
class PolicyBundle:
    role_actor: nn.MlpParams
    primitive_actor: nn.MlpParams
    role_period: int = 1

    @classmethod
    def create(cls, r_fov: int, rng: np.random.Generator, role_period: int = 1, hidden=HIDDEN):
        F = local_feature_dim(r_fov)
        role_spec = nn.MlpSpec((2 * F + JOINT_FEATURE_DIM, *hidden, N_ROLES))
        prim_spec = nn.MlpSpec((F + 1, *hidden, N_PRIMITIVES))
        return cls(
            nn.init_params(role_spec, rng, output_scale=0.01),
            nn.init_params(prim_spec, rng, output_scale=0.01),
            role_period,
        )

    @property
    def local_dim(self) -> int:
        return self.primitive_actor.spec.n_in - 1


def role_input(local_feat, joint_feat, aggregated_feat) -> np.ndarray:
    local_feat = np.atleast_2d(local_feat)
    joint = np.broadcast_to(np.atleast_2d(joint_feat), (local_feat.shape[0], np.shape(joint_feat)[-1]))
    return np.concatenate([local_feat, joint, np.atleast_2d(aggregated_feat)], axis=1)


def primitive_input(local_feat, roles) -> np.ndarray:
    local_feat = np.atleast_2d(local_feat)
    roles = np.asarray(roles, dtype=float).reshape(-1, 1)
    return np.concatenate([local_feat, roles], axis=1)


def role_distribution(bundle: PolicyBundle, local_feat, joint_feat, aggregated_feat) -> np.ndarray:
    single = np.ndim(local_feat) == 1
    probs = nn.softmax(nn.forward(bundle.role_actor, role_input(local_feat, joint_feat, aggregated_feat)))
    return probs[0] if single else probs


def primitive_distribution(bundle: PolicyBundle, local_feat, role) -> np.ndarray:
    single = np.ndim(local_feat) == 1
    probs = nn.softmax(nn.forward(bundle.primitive_actor, primitive_input(local_feat, np.atleast_1d(role))))
    return probs[0] if single else probs


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling, one draw per row."""
    probs = np.atleast_2d(probs)
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def select_roles(bundle: PolicyBundle, world: GridWorld, step_index: int, rng, prev_roles=None, features=None):
    """Resample every robot's role when ``step_index % k == 0``; otherwise keep them."""
    if prev_roles is not None and step_index % bundle.role_period != 0:
        return list(prev_roles)
    local, joint, agg = features if features is not None else robot_features(world)
    probs = role_distribution(bundle, local, joint, agg)
    return [RoleAction(int(a)) for a in sample_categorical(probs, rng)]


def random_policy(rng: np.random.Generator, n_robots: int) -> list[PrimitiveAction]:
    return [PrimitiveAction(int(a)) for a in rng.integers(0, N_PRIMITIVES, size=n_robots)]


# ---------------------------------------------------------------------------
# greedy planning

GOAL_MODES = ("frontier_or_target", "frontier_only", "target_only")


def goal_mask(world: GridWorld, goal_mode: str, frontier: np.ndarray | None = None) -> np.ndarray:
    if goal_mode not in GOAL_MODES:
        raise ValueError(f"unknown goal mode {goal_mode!r}")
    if frontier is None:
        frontier = frontier_mask(world)
    targets = world.explored & (world.kind == CellKind.TARGET) & ~world.covered
    if goal_mode == "frontier_only":
        return frontier
    if goal_mode == "target_only":
        return targets
    return frontier | targets


def nearest_goal(world: GridWorld, robot_id: int, goals: np.ndarray):
    """BFS over known-traversable cells from the robot.

    Returns ``(goal, distance, first_dirs)`` where ``first_dirs`` is the set of
    headings whose first step lies on some shortest path to ``goal``; ``None``
    when no goal is reachable. Ties between equidistant goals go to the first
    cell in row-major order.
    """
    H, W = world.kind.shape
    blocked = (world.explored & (world.kind == CellKind.OBSTACLE)).ravel().tolist()
    goal_flat = goals.ravel().tolist()
    robot = world.robots[robot_id]
    start = robot.y * W + robot.x
    first = {start: 0}  # bitmask of first headings
    frontier_layer = [start]
    dist = 0
    while frontier_layer:
        dist += 1
        nxt: dict[int, int] = {}
        for cell in frontier_layer:
            cy, cx = divmod(cell, W)
            mask = first[cell]
            for h, (dx, dy) in HEADING_DELTAS.items():
                nx, ny = cx + dx, cy + dy
                if not (0 <= nx < W and 0 <= ny < H):
                    continue
                n = ny * W + nx
                if blocked[n] or n in first:
                    continue
                bit = (1 << h) if cell == start else mask
                nxt[n] = nxt.get(n, 0) | bit
        if not nxt:
            break
        first.update(nxt)
        hits = [n for n in nxt if goal_flat[n]]
        if hits:
            g = min(hits)
            dirs = {Heading(h) for h in range(4) if nxt[g] >> h & 1}
            return (g % W, g // W), dist, dirs
        frontier_layer = sorted(nxt)
    return None


def _turn_cost(heading: Heading, want: Heading) -> tuple[int, int]:
    rel = (want - heading) % 4
    # forward, right, left, behind; right before left on ties
    return {0: (0, 0), 1: (1, 0), 3: (1, 1), 2: (2, 0)}[rel]


def action_towards(heading: Heading, dirs) -> PrimitiveAction:
    want = min(dirs, key=lambda d: (_turn_cost(heading, d), int(d)))
    rel = (want - heading) % 4
    if rel == 0:
        return PrimitiveAction.MOVE_FORWARD
    if rel == 3:
        return PrimitiveAction.TURN_LEFT
    return PrimitiveAction.TURN_RIGHT


def greedy_policy(world: GridWorld, robot_id: int, goal_mode: str = "frontier_or_target", frontier=None) -> PrimitiveAction:
    found = nearest_goal(world, robot_id, goal_mask(world, goal_mode, frontier))
    if found is None:
        return PrimitiveAction.STOP
    _, _, dirs = found
    return action_towards(world.robots[robot_id].heading, dirs)


def scripted_executor(world: GridWorld, robot_id: int, role, frontier=None) -> PrimitiveAction:
    mode = "frontier_only" if RoleAction(int(role)) == RoleAction.EXPLORE else "target_only"
    return greedy_policy(world, robot_id, mode, frontier)


def visible_target(world: GridWorld, robot_id: int) -> bool:
    r = world.r_fov
    robot = world.robots[robot_id]
    ys = slice(max(0, robot.y - r), robot.y + r + 1)
    xs = slice(max(0, robot.x - r), robot.x + r + 1)
    goals = world.explored[ys, xs] & (world.kind[ys, xs] == CellKind.TARGET) & ~world.covered[ys, xs]
    return bool(goals.any())


# ---------------------------------------------------------------------------
# episode-level policy objects


class RandomPolicy:
    name = "random"

    def reset(self, world: GridWorld, rng: np.random.Generator) -> None:
        self.rng = rng

    def act(self, world: GridWorld, step_index: int):
        return random_policy(self.rng, world.n_robots), None


class GreedyPolicy:
    name = "greedy"

    def reset(self, world, rng) -> None:
        pass

    def act(self, world: GridWorld, step_index: int):
        frontier = frontier_mask(world)
        return [greedy_policy(world, i, "frontier_or_target", frontier) for i in range(world.n_robots)], None


class ScriptedPolicy:
    """Role rule plus the scripted per-role executor.

    ``role_rule`` is ``"auto"`` (cover when an uncovered target is in the
    robot's window, else explore), ``"explore"`` or ``"cover"``.
    """

    name = "scripted"

    def __init__(self, role_rule: str = "auto"):
        if role_rule not in ("auto", "explore", "cover"):
            raise ValueError(f"unknown role rule {role_rule!r}")
        self.role_rule = role_rule

    def reset(self, world, rng) -> None:
        pass

    def roles(self, world: GridWorld) -> list[RoleAction]:
        if self.role_rule == "explore":
            return [RoleAction.EXPLORE] * world.n_robots
        if self.role_rule == "cover":
            return [RoleAction.COVER] * world.n_robots
        return [RoleAction.COVER if visible_target(world, i) else RoleAction.EXPLORE for i in range(world.n_robots)]

    def act(self, world: GridWorld, step_index: int):
        frontier = frontier_mask(world)
        roles = self.roles(world)
        return [scripted_executor(world, i, r, frontier) for i, r in enumerate(roles)], roles


class LearnedPolicy:
    """Decentralised execution of the trained role and primitive actors."""

    name = "learned"

    def __init__(self, bundle: PolicyBundle):
        self.bundle = bundle

    def reset(self, world, rng) -> None:
        self.rng = rng
        self.roles = None

    def act(self, world: GridWorld, step_index: int):
        features = robot_features(world)
        self.roles = select_roles(self.bundle, world, step_index, self.rng, self.roles, features)
        probs = primitive_distribution(self.bundle, features[0], self.roles)
        actions = [PrimitiveAction(int(a)) for a in sample_categorical(probs, self.rng)]
        return actions, list(self.roles)
