"""Exploration/coverage primitive rewards and the weighted role reward."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

from .errors import DomainError
from .world import StepEvents


class RoleAction(IntEnum):
    EXPLORE = 0
    COVER = 1


N_ROLES = len(RoleAction)


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 0.4
    beta: float = 0.6

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError(f"weights must lie in [0, 1], got {self.alpha}, {self.beta}")
        if not math.isclose(self.alpha + self.beta, 1.0, abs_tol=1e-9):
            raise ValueError(f"alpha + beta must equal 1, got {self.alpha + self.beta}")


@dataclass
class RewardRecord:
    R_e: float
    R_c: float
    R_role: float
    per_robot_primitive: list[float]
    per_robot_exploration: list[float]


def exploration_ability(rad_e: float, d: float = 1.0, mode: str = "as_printed") -> float:
    """Normaliser dividing newly explored cell counts into rewards.

    ``as_printed`` keeps the doubled disc area and the bare square-root term of
    the published expression; ``geometric`` is the true area of one disc minus
    the lens shared with a disc displaced by ``d``.
    """
    if rad_e <= 0:
        raise DomainError(f"rad_e must be positive, got {rad_e}")
    if d < 0 or d > 2 * rad_e:
        raise DomainError(f"d must lie in [0, 2*rad_e], got {d}")
    root = math.sqrt(4 * rad_e**2 - d**2)
    if mode == "as_printed":
        if d == 0:
            raise DomainError("d = 0 divides by zero inside arccos")
        s_inter = 2 * rad_e**2 * math.acos(d**2 / (2 * d * rad_e)) - root
        return 2 * math.pi * rad_e**2 - s_inter
    if mode == "geometric":
        s_inter = 2 * rad_e**2 * math.acos(d / (2 * rad_e)) - 0.5 * d * root
        return math.pi * rad_e**2 - s_inter
    raise ValueError(f"unknown mode {mode!r}")


def role_reward(R_e: float, R_c: float, w: RewardWeights) -> float:
    return w.alpha * R_e + w.beta * R_c


def primitive_rewards(
    events: StepEvents, roles, B_e: float, weights: RewardWeights | None = None
) -> RewardRecord:
    """Role-gated shared rewards: explorers share R_e, coverers share R_c."""
    if B_e <= 0:
        raise DomainError("B_e must be positive")
    roles = [RoleAction(int(r)) for r in roles]
    if len(roles) != len(events.newly_explored):
        raise ValueError("one role per robot is required")
    per_explore = [n / B_e for n in events.newly_explored]
    R_e = sum(e for e, r in zip(per_explore, roles) if r == RoleAction.EXPLORE)
    R_c = float(sum(c for c, r in zip(events.targets_covered, roles) if r == RoleAction.COVER))
    per_robot = [R_e if r == RoleAction.EXPLORE else R_c for r in roles]
    R_role = role_reward(R_e, R_c, weights or RewardWeights())
    return RewardRecord(R_e, R_c, R_role, per_robot, per_explore)
