import numpy as np
import pytest

from areasearch.world import CellKind, GridWorld, RobotPose, ScenarioConfig, generate_map, initial_sense


def open_world(width=9, height=9, robots=((4, 4),), r_fov=4, r_comm=10.0, targets=(), obstacles=()):
    kind = np.zeros((height, width), dtype=np.int8)
    for x, y in obstacles:
        kind[y, x] = CellKind.OBSTACLE
    for x, y in targets:
        kind[y, x] = CellKind.TARGET
    poses = [RobotPose(i, x, y) for i, (x, y) in enumerate(robots)]
    return GridWorld(kind, poses, r_fov=r_fov, r_comm=r_comm)


def random_world(seed, size=15, obstacles=40, targets=20, robots=3, steps=10, r_fov=3):
    """A generated world advanced by random actions (so explored masks are irregular)."""
    from areasearch.world import step

    cfg = ScenarioConfig(size, size, obstacles, targets, robots, r_fov=r_fov, seed=seed, spawn="uniform")
    world = generate_map(cfg)
    initial_sense(world)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        step(world, rng.integers(0, 5, size=robots))
    return world


@pytest.fixture
def make_open_world():
    return open_world


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
