"""Scenario presets, the episode runner and the benchmark metrics."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .reward import RoleAction
from .world import GridWorld, ScenarioConfig, generate_map, initial_sense, step

MAP_SIDE = 25
BASE_OBSTACLES = 250

# fraction of free cells that are targets
TARGET_PRESETS = {"easy": 0.56, "medium": 0.24, "hard": 0.16, "super_hard": 0.08}
# fraction of all cells that are obstacles; targets use the hard proportion
OBSTACLE_PRESETS = {"obs_easy": 0.16, "obs_medium": 0.40, "obs_hard": 0.52}
PRESET_NAMES = tuple(TARGET_PRESETS) + tuple(OBSTACLE_PRESETS) + ("desk",)


def preset_config(name: str, n_robots: int | None = None, episode_len: int | None = None, seed: int = 0, **overrides) -> ScenarioConfig:
    """Scenario for a named preset; unspecified robots/length use the preset defaults."""
    cells = MAP_SIDE * MAP_SIDE
    if n_robots is None:
        n_robots = DESK_ROBOTS if name == "desk" else 4
    if episode_len is None:
        episode_len = DESK_EPISODE_LEN if name == "desk" else 128
    if name in TARGET_PRESETS:
        n_obs = BASE_OBSTACLES
        n_targets = round(TARGET_PRESETS[name] * (cells - n_obs))
        cfg = ScenarioConfig(MAP_SIDE, MAP_SIDE, n_obs, n_targets, n_robots, episode_len=episode_len, seed=seed)
    elif name in OBSTACLE_PRESETS:
        n_obs = round(OBSTACLE_PRESETS[name] * cells)
        n_targets = round(TARGET_PRESETS["hard"] * (cells - n_obs))
        cfg = ScenarioConfig(MAP_SIDE, MAP_SIDE, n_obs, n_targets, n_robots, episode_len=episode_len, seed=seed)
    elif name == "desk":
        # 10x10, 20% obstacles, targets on 20% of the free cells
        cfg = ScenarioConfig(10, 10, 20, 16, n_robots, r_fov=DESK_FOV, r_comm=10.0, episode_len=episode_len, seed=seed)
    else:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    return cfg.replace(**overrides) if overrides else cfg


DESK_FOV = 2
DESK_EPISODE_LEN = 64
DESK_ROBOTS = 2


def episode_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, np.uint64)[0])


@dataclass
class EpisodeLog:
    n_free: int
    n_targets: int
    explored: list[int] = field(default_factory=list)  # explored free cells, index 0 = after initial sensing
    covered: list[int] = field(default_factory=list)
    positions: list[list[tuple[int, int]]] = field(default_factory=list)
    headings: list[list[int]] = field(default_factory=list)
    roles: list[list[int] | None] = field(default_factory=list)
    actions: list[list[int]] = field(default_factory=list)
    new_cells: list[list[list[tuple[int, int]]]] = field(default_factory=list)
    new_covered: list[list[tuple[int, int]]] = field(default_factory=list)
    explored_targets: int = 0
    world: GridWorld | None = None

    @property
    def steps(self) -> int:
        return len(self.actions)

    @property
    def explored_fraction(self) -> float:
        return self.explored[-1] / self.n_free

    @property
    def covered_fraction(self) -> float:
        return self.covered[-1] / self.n_targets if self.n_targets else 1.0


def _snapshot(log: EpisodeLog, world: GridWorld) -> None:
    log.explored.append(world.explored_free_count())
    log.covered.append(world.covered_count())
    log.positions.append(world.positions())
    log.headings.append([int(r.heading) for r in world.robots])


def run_episode(config: ScenarioConfig, policy, seed: int, keep_world: bool = False) -> EpisodeLog:
    """Run one episode for ``config.episode_len`` steps or until the map is done."""
    world = generate_map(config.replace(seed=seed))
    rng = np.random.default_rng([seed, 1])
    policy.reset(world, rng)
    log = EpisodeLog(world.n_free, world.n_targets)
    events = initial_sense(world)
    log.new_cells.append(events.explored_cells)
    log.new_covered.append(events.covered_cells)
    _snapshot(log, world)
    for t in range(config.episode_len):
        if world.is_done():
            break
        actions, roles = policy.act(world, t)
        _, events = step(world, actions)
        log.actions.append([int(a) for a in actions])
        log.roles.append(None if roles is None else [int(r) for r in roles])
        log.new_cells.append(events.explored_cells)
        log.new_covered.append(events.covered_cells)
        _snapshot(log, world)
    log.explored_targets = int(np.count_nonzero(world.explored & world.targets))
    if keep_world:
        log.world = world
    return log


def exploration_percentage(logs) -> float:
    return float(np.mean([log.explored_fraction for log in logs]) * 100.0)


def coverage_percentage(logs) -> float:
    return float(np.mean([log.covered_fraction for log in logs]) * 100.0)


def first_step_reaching(log: EpisodeLog, fraction: float = 0.9) -> int | None:
    for t, n in enumerate(log.explored):
        if n >= fraction * log.n_free:
            return t
    return None


def time_to_90(logs) -> float | None:
    """Mean first step index reaching 90% exploration; None if any episode never does."""
    hits = [first_step_reaching(log) for log in logs]
    if any(h is None for h in hits):
        return None
    return float(np.mean(hits))


def role_proportions(logs) -> tuple[float, float] | None:
    decisions = [r for log in logs for roles in log.roles if roles is not None for r in roles]
    if not decisions:
        return None
    explore = 100.0 * sum(1 for r in decisions if r == RoleAction.EXPLORE) / len(decisions)
    return explore, 100.0 - explore


@dataclass
class MetricsReport:
    explo_pct: float
    cover_pct: float
    time_e: float | None
    episodes: int
    role_explore_fraction: float | None

    @classmethod
    def from_logs(cls, logs) -> "MetricsReport":
        roles = role_proportions(logs)
        return cls(
            exploration_percentage(logs),
            coverage_percentage(logs),
            time_to_90(logs),
            len(logs),
            None if roles is None else roles[0],
        )


def _run_one(args):
    config, policy, seed = args
    return run_episode(config, policy, seed)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("AREASEARCH_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(config: ScenarioConfig, policy, episodes: int, base_seed: int = 0, workers: int | None = None):
    """Run ``episodes`` independent episodes; returns (MetricsReport, logs).

    Episode ``i`` uses ``episode_seed(base_seed, i)`` so results do not depend
    on the worker count.
    """
    jobs = [(config, policy, episode_seed(base_seed, i)) for i in range(episodes)]
    workers = worker_count() if workers is None else workers
    if workers > 1 and episodes > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            logs = list(pool.map(_run_one, jobs))
    else:
        logs = [_run_one(j) for j in jobs]
    return MetricsReport.from_logs(logs), logs
