import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from areasearch.cli import (
    PALETTE,
    ROBOT_COLORS,
    RunConfig,
    dumps_config,
    main,
    parse_config,
    read_replay,
    validate_replay,
)
from areasearch.errors import ConfigError
from areasearch.learner import TrainConfig
from areasearch.reward import RewardWeights
from areasearch.world import load_map


def read_ppm(path):
    tokens = path.read_text().split()
    assert tokens[0] == "P3"
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    assert maxval == 255
    return np.array(tokens[4:], dtype=int).reshape(h, w, 3)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        text = dumps_config(cfg)
        assert dumps_config(parse_config(text)) == text

    @settings(max_examples=50, deadline=None)
    @given(
        preset=st.sampled_from(["easy", "hard", "desk", "obs_hard", "hard,desk"]),
        robots=st.one_of(st.none(), st.integers(1, 15)),
        seed=st.integers(0, 2**31),
        episodes=st.integers(1, 1000),
        policy=st.sampled_from(["random", "greedy", "scripted", "random,greedy"]),
        alpha=st.floats(0, 1, allow_nan=False),
        lr=st.floats(1e-6, 1e-1, allow_nan=False),
        gamma=st.floats(0.01, 1.0, allow_nan=False),
        hidden=st.lists(st.integers(1, 128), min_size=1, max_size=3),
        c3_p=st.one_of(st.none(), st.floats(0, 1, allow_nan=False)),
        n_obstacles=st.one_of(st.none(), st.integers(0, 300)),
        render=st.booleans(),
    )
    def test_fixed_point(self, preset, robots, seed, episodes, policy, alpha, lr, gamma, hidden, c3_p, n_obstacles, render):
        cfg = RunConfig(
            preset=preset, robots=robots, seed=seed, episodes=episodes, policy=policy, render=render,
            scenario={} if n_obstacles is None else {"n_obstacles": n_obstacles},
            train=TrainConfig(learning_rate=lr, gamma=gamma, hidden=tuple(hidden), c3_p=c3_p),
            weights=RewardWeights(alpha, 1.0 - alpha),
        )
        once = parse_config(dumps_config(cfg))
        twice = parse_config(dumps_config(once))
        assert once == twice == cfg

    def test_partial_file_layers_over_defaults(self):
        cfg = parse_config("[run]\npreset = desk\n[reward]\nalpha = 0.3\nbeta = 0.7\n")
        assert cfg.preset == "desk" and cfg.weights == RewardWeights(0.3, 0.7)
        assert cfg.train == TrainConfig()

    @pytest.mark.parametrize(
        "text",
        [
            "[run]\npreset = nowhere\n",
            "[run]\ncolour = red\n",
            "[mystery]\na = 1\n",
            "[train]\ngamma = 2\n",
            "[reward]\nalpha = 0.5\nbeta = 0.6\n",
            "[run]\npolicy = learned\n",
            "not an ini file",
        ],
    )
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)


class TestGenMap:
    def test_default_and_deterministic(self, tmp_path):
        assert main(["gen-map", "--out", str(tmp_path / "a"), "--seed", "5"]) == 0
        assert main(["gen-map", "--out", str(tmp_path / "b"), "--seed", "5"]) == 0
        a, b = (tmp_path / "a" / "map.txt").read_bytes(), (tmp_path / "b" / "map.txt").read_bytes()
        assert a == b
        w = load_map(tmp_path / "a" / "map.txt")
        assert (w.width, w.height) == (25, 25)

    def test_no_obstacles(self, tmp_path):
        assert main(["gen-map", "--out", str(tmp_path), "--obstacles", "0"]) == 0
        assert "#" not in (tmp_path / "map.txt").read_text()

    def test_infeasible_exit_code(self, tmp_path):
        assert main(["gen-map", "--out", str(tmp_path), "--width", "3", "--height", "3"]) == 3

    def test_config_error_exit_code(self, tmp_path, capsys):
        assert main(["gen-map", "--out", str(tmp_path), "--preset", "nowhere"]) == 2
        assert main(["gen-map", "--config", str(tmp_path / "missing.ini")]) == 2
        assert main(["eval", "--alpha", "0.5", "--beta", "0.7", "--out", str(tmp_path)]) == 2

    def test_config_file_and_flag_precedence(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[run]\nseed = 9\n[scenario]\nwidth = 12\nheight = 8\nn_obstacles = 10\nn_targets = 5\n")
        assert main(["gen-map", "--config", str(ini), "--out", str(tmp_path / "m"), "--obstacles", "0"]) == 0
        w = load_map(tmp_path / "m" / "map.txt")
        assert (w.width, w.height, w.n_targets) == (12, 8, 5)
        assert "#" not in (tmp_path / "m" / "map.txt").read_text()


class TestEval:
    def test_rows_and_ordering(self, tmp_path):
        out = tmp_path / "e"
        assert main(["eval", "--preset", "hard,desk", "--policy", "random,greedy", "--episodes", "20", "--out", str(out)]) == 0
        table = rows(out / "metrics.csv")
        assert len(table) == 4
        assert list(table[0]) == ["preset", "n_robots", "policy", "episodes", "explo_pct", "cover_pct", "time_e", "role_explore_fraction"]
        by = {(r["preset"], r["policy"]): r for r in table}
        assert float(by["hard", "random"]["explo_pct"]) < 50
        for preset in ("hard", "desk"):
            g, r = by[preset, "greedy"], by[preset, "random"]
            assert float(g["explo_pct"]) > float(r["explo_pct"])
            assert float(g["cover_pct"]) > float(r["cover_pct"])

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--policy", "learned", "--out", str(tmp_path)]) == 2
        assert main(["eval", "--policy", "learned", "--checkpoint", str(tmp_path / "no.ckpt"), "--out", str(tmp_path)]) == 2

    def test_byte_identical(self, tmp_path):
        args = ["eval", "--preset", "desk", "--policy", "random,scripted", "--episodes", "5", "--seed", "4"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        for name in ("metrics.csv", "replay_desk_random.jsonl", "replay_desk_scripted.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestReplay:
    def test_round_trip_and_frames(self, tmp_path):
        assert main(["replay", "--preset", "desk", "--policy", "scripted", "--seed", "3", "--render", "--out", str(tmp_path)]) == 0
        records = read_replay(tmp_path / "replay.jsonl")
        validate_replay(records)
        steps = len(records) - 2
        frames = sorted((tmp_path / "frames").glob("*.ppm"))
        assert len(frames) == steps + 1
        assert records[1]["actions"] is None and records[2]["roles"] is not None

    def test_validator_detects_tampering(self, tmp_path):
        assert main(["replay", "--preset", "desk", "--policy", "random", "--out", str(tmp_path)]) == 0
        records = read_replay(tmp_path / "replay.jsonl")
        records[3]["positions"][0][0] += 1
        with pytest.raises(ValueError):
            validate_replay(records)

    def test_many_robots(self, tmp_path):
        assert main(["replay", "--preset", "hard", "--robots", "15", "--policy", "greedy", "--out", str(tmp_path)]) == 0
        validate_replay(read_replay(tmp_path / "replay.jsonl"))

    def test_palette(self, tmp_path):
        assert main(["replay", "--preset", "desk", "--policy", "greedy", "--render", "--out", str(tmp_path)]) == 0
        records = read_replay(tmp_path / "replay.jsonl")
        img = read_ppm(tmp_path / "frames" / "frame_0000.ppm")
        header = records[0]
        scale = img.shape[0] // header["height"]
        colours = {tuple(img[y * scale, x * scale]) for y in range(header["height"]) for x in range(header["width"])}
        assert PALETTE["obstacle"] == (128, 128, 128)
        assert PALETTE["target"] == (255, 165, 0)
        assert PALETTE["frontier"] == (0, 200, 0)
        assert PALETTE["obstacle"] in colours and PALETTE["frontier"] in colours
        for i, (x, y) in enumerate(records[1]["positions"]):
            c = scale // 2
            assert tuple(img[y * scale + c, x * scale + c]) == ROBOT_COLORS[i]
        for y, row in enumerate(header["cells"]):
            for x, ch in enumerate(row):
                corner = tuple(img[y * scale, x * scale])
                if ch == "#":
                    assert corner == PALETTE["obstacle"]
                elif ch == "T" and [x, y] not in records[1]["new_covered"]:
                    assert corner == PALETTE["target"]


class TestTrain:
    def test_tiny_run_and_resume(self, tmp_path):
        out = tmp_path / "t"
        assert main(["train", "--timesteps", "10000", "--alpha", "0.4", "--beta", "0.6", "--out", str(out)]) == 0
        log = (out / "train_log.csv").read_text()
        assert "# alpha=0.4" in log and "# beta=0.6" in log
        assert (out / "checkpoint.ckpt").exists()
        n_updates = len([ln for ln in log.splitlines() if ln and not ln.startswith(("#", "update"))])
        assert n_updates == 2
        more = tmp_path / "more"
        assert main(["train", "--timesteps", "15000", "--checkpoint", str(out / "checkpoint.ckpt"), "--out", str(more)]) == 0
        assert len(rows_without_comments(more / "train_log.csv")) == 1
        assert main(["eval", "--preset", "desk", "--policy", "learned", "--checkpoint", str(more / "checkpoint.ckpt"),
                     "--episodes", "3", "--out", str(tmp_path / "ev")]) == 0
        assert rows(tmp_path / "ev" / "metrics.csv")[0]["role_explore_fraction"] != ""

    def test_checkpoint_feature_mismatch(self, tmp_path):
        assert main(["train", "--timesteps", "100", "--out", str(tmp_path)]) == 0
        code = main(["eval", "--preset", "hard", "--policy", "learned", "--checkpoint", str(tmp_path / "checkpoint.ckpt"),
                     "--episodes", "1", "--out", str(tmp_path / "e")])
        assert code == 2


def rows_without_comments(path):
    lines = [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
    return lines[1:]
