import math

import numpy as np
import pytest

from areasearch.evaluation import (
    OBSTACLE_PRESETS,
    TARGET_PRESETS,
    EpisodeLog,
    MetricsReport,
    coverage_percentage,
    episode_seed,
    evaluate,
    exploration_percentage,
    first_step_reaching,
    preset_config,
    role_proportions,
    run_episode,
    time_to_90,
)
from areasearch.policy import GreedyPolicy, RandomPolicy, ScriptedPolicy
from areasearch.world import CellKind, ScenarioConfig, generate_map


class StopPolicy:
    def reset(self, world, rng):
        pass

    def act(self, world, t):
        return [4] * world.n_robots, None


class CoinRoles:
    def reset(self, world, rng):
        self.rng = rng

    def act(self, world, t):
        return [4] * world.n_robots, [int(r) for r in self.rng.integers(0, 2, world.n_robots)]


def log_with(explored, covered, n_free=100, n_targets=10, roles=None):
    log = EpisodeLog(n_free, n_targets, explored=list(explored), covered=list(covered))
    log.roles = roles or [None] * (len(explored) - 1)
    return log


class TestPresets:
    @pytest.mark.parametrize("name, frac", TARGET_PRESETS.items())
    def test_target_presets(self, name, frac):
        cfg = preset_config(name)
        assert (cfg.width, cfg.height, cfg.n_obstacles) == (25, 25, 250)
        assert cfg.n_targets == round(frac * 375)

    @pytest.mark.parametrize("name, ratio", OBSTACLE_PRESETS.items())
    def test_obstacle_presets(self, name, ratio):
        cfg = preset_config(name)
        assert cfg.n_obstacles == round(ratio * 625)
        assert cfg.n_targets == round(0.16 * (625 - cfg.n_obstacles))
        w = generate_map(cfg)
        assert np.count_nonzero(w.kind == CellKind.OBSTACLE) == cfg.n_obstacles

    def test_desk(self):
        cfg = preset_config("desk")
        assert (cfg.width, cfg.height, cfg.n_obstacles, cfg.n_targets, cfg.n_robots) == (10, 10, 20, 16, 2)

    def test_overrides_and_unknown(self):
        assert preset_config("hard", n_robots=8, episode_len=50).n_robots == 8
        assert preset_config("hard", spawn="uniform").spawn == "uniform"
        with pytest.raises(KeyError):
            preset_config("impossible")


class TestMetrics:
    def test_full(self):
        logs = [log_with([50, 100], [5, 10])]
        assert exploration_percentage(logs) == 100.0 and coverage_percentage(logs) == 100.0

    def test_initial_disc_only(self):
        cfg = ScenarioConfig(15, 15, 0, 5, 1, seed=0)
        log = run_episode(cfg, StopPolicy(), 3)
        w = generate_map(cfg.replace(seed=3))
        x0, y0 = w.robots[0].position
        disc = sum(1 for x in range(15) for y in range(15) if (x - x0) ** 2 + (y - y0) ** 2 <= 16)
        assert exploration_percentage([log]) == pytest.approx(100 * disc / 225)
        assert len(set(log.explored)) == 1 and len(set(log.covered)) == 1

    def test_time_to_90(self):
        assert time_to_90([log_with([95, 100], [0, 0])]) == 0
        assert time_to_90([log_with([10, 50, 89], [0, 0, 0])]) is None
        logs = [log_with([10, 90, 95], [0] * 3), log_with([10, 20, 30, 91], [0] * 4)]
        assert time_to_90(logs) == pytest.approx(2.0)
        for log in logs:
            t = first_step_reaching(log)
            assert log.explored[t] >= 0.9 * log.n_free

    def test_role_proportions(self):
        explore = [log_with([1, 2, 3], [0] * 3, roles=[[0, 0], [0, 0]])]
        assert role_proportions(explore) == (100.0, 0.0)
        assert role_proportions([log_with([1, 2], [0, 0])]) is None

    def test_uniform_roles_near_half(self):
        cfg = ScenarioConfig(10, 10, 0, 5, 10, r_fov=1, episode_len=100)
        _, logs = evaluate(cfg, CoinRoles(), 10, base_seed=1)
        ex, co = role_proportions(logs)
        assert ex + co == pytest.approx(100.0)
        # 10^4 fair decisions: 4 standard deviations is 2 points
        assert abs(ex - 50.0) < 2.0

    def test_scripted_explore_fraction(self):
        cfg = preset_config("desk")
        report, _ = evaluate(cfg, ScriptedPolicy("explore"), 3)
        assert report.role_explore_fraction == 100.0


class TestRunEpisode:
    def test_reproducible(self):
        cfg = preset_config("hard", episode_len=40)
        a = run_episode(cfg, RandomPolicy(), 5)
        b = run_episode(cfg, RandomPolicy(), 5)
        assert a.explored == b.explored and a.actions == b.actions and a.positions == b.positions

    def test_greedy_reaches_single_target(self):
        cfg = ScenarioConfig(8, 8, 0, 1, 1, r_fov=8, episode_len=40)
        for seed in range(10):
            w = generate_map(cfg.replace(seed=seed))
            (tx, ty), = [(x, y) for y, x in zip(*np.nonzero(w.kind == CellKind.TARGET))]
            r = w.robots[0]
            dist = abs(tx - r.x) + abs(ty - r.y)
            log = run_episode(cfg, GreedyPolicy(), seed)
            hit = next(t for t, c in enumerate(log.covered) if c == 1)
            # a Manhattan path with at most one corner, plus up to two turns at the start
            assert hit <= dist + 3

    def test_ends_when_done(self):
        cfg = ScenarioConfig(5, 5, 0, 0, 1, r_fov=8, episode_len=50)
        log = run_episode(cfg, RandomPolicy(), 0)
        assert log.steps == 0 and log.explored_fraction == 1.0

    def test_invariants_over_random_and_greedy(self):
        cfg = preset_config("hard", episode_len=60)
        for pol in (RandomPolicy(), GreedyPolicy()):
            _, logs = evaluate(cfg, pol, 6, base_seed=2)
            for log in logs:
                assert all(a <= b for a, b in zip(log.explored, log.explored[1:]))
                assert all(a <= b for a, b in zip(log.covered, log.covered[1:]))
                assert log.covered[-1] <= log.explored_targets
                # extending the horizon never lowers the metrics
                assert log.explored_fraction >= log.explored[len(log.explored) // 2] / log.n_free

    def test_parallel_matches_serial(self):
        cfg = preset_config("desk")
        a, la = evaluate(cfg, GreedyPolicy(), 4, base_seed=7, workers=1)
        b, lb = evaluate(cfg, GreedyPolicy(), 4, base_seed=7, workers=2)
        assert a == b and [l.explored for l in la] == [l.explored for l in lb]

    def test_episode_seed_counter(self):
        seeds = {episode_seed(0, i) for i in range(100)}
        assert len(seeds) == 100 and episode_seed(3, 4) == episode_seed(3, 4)

    def test_desk_greedy_time_e_finite(self):
        report, _ = evaluate(preset_config("desk", n_robots=8), ScriptedPolicy(), 20)
        assert report.time_e is not None and math.isfinite(report.time_e)
        print(f"desk, 8 robots, scripted: time_e={report.time_e:.1f}")

    def test_report_bounds(self):
        report, _ = evaluate(preset_config("hard", episode_len=30), RandomPolicy(), 5)
        assert isinstance(report, MetricsReport)
        assert 0 <= report.explo_pct <= 100 and 0 <= report.cover_pct <= 100
        assert report.time_e is None and report.role_explore_fraction is None
