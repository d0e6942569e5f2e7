"""Command-line entry point: gen-map, train, eval, replay.

Settings come from built-in defaults, then an optional ``--config`` INI file,
then command-line flags (later wins). Exit codes: 0 ok, 2 config error,
3 infeasible scenario, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, InfeasibleScenario, NonFiniteGradient, NonFiniteLoss
from .evaluation import PRESET_NAMES, evaluate, episode_seed, preset_config, run_episode
from .learner import TrainConfig, Trainer, load_bundle
from .policy import GreedyPolicy, LearnedPolicy, RandomPolicy, ScriptedPolicy
from .reward import RewardWeights
from .world import (
    CellKind,
    GridWorld,
    Heading,
    RobotPose,
    ScenarioConfig,
    dumps_map,
    frontier_mask,
    generate_map,
    initial_sense,
    step,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4

POLICIES = ("random", "greedy", "scripted", "learned")
METRIC_COLUMNS = ("preset", "n_robots", "policy", "episodes", "explo_pct", "cover_pct", "time_e", "role_explore_fraction")

# scenario fields that may override a preset
SCENARIO_KEYS = ("width", "height", "n_obstacles", "n_targets", "r_fov", "r_comm", "episode_len", "spawn")


@dataclass
class RunConfig:
    preset: str = "hard"
    robots: int | None = None
    seed: int = 0
    episodes: int = 500
    policy: str = "greedy"
    checkpoint: str | None = None
    out: str = "out"
    render: bool = False
    scenario: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)

    def validate(self) -> None:
        for name in self.presets():
            if name not in PRESET_NAMES:
                raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
        for name in self.policies():
            if name not in POLICIES:
                raise ConfigError(f"unknown policy {name!r}; choose from {', '.join(POLICIES)}")
        if "learned" in self.policies() and not self.checkpoint:
            raise ConfigError("policy 'learned' needs --checkpoint")
        if self.episodes < 1:
            raise ConfigError("episodes must be positive")
        unknown = set(self.scenario) - set(SCENARIO_KEYS)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {', '.join(sorted(unknown))}")

    def presets(self) -> list[str]:
        return [p.strip() for p in self.preset.split(",") if p.strip()]

    def policies(self) -> list[str]:
        return [p.strip() for p in self.policy.split(",") if p.strip()]

    def scenario_config(self, preset: str | None = None) -> ScenarioConfig:
        cfg = preset_config(preset or self.presets()[0], n_robots=self.robots, seed=self.seed)
        overrides = {k: v for k, v in self.scenario.items() if v is not None}
        return cfg.replace(**overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# config file


def _parse_value(text: str, kind):
    text = text.strip()
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if text.lower() in ("", "none"):
        return None
    if kind is tuple:
        return tuple(int(v) for v in text.split(","))
    return kind(text)


def _field_kind(default, name: str):
    if name in ("robots", "c1_p", "c2_p", "c3_p"):
        return int if name == "robots" else float
    if name == "checkpoint":
        return str
    if isinstance(default, bool):
        return bool
    if isinstance(default, tuple):
        return tuple
    return type(default)


SCENARIO_KINDS = {
    "width": int,
    "height": int,
    "n_obstacles": int,
    "n_targets": int,
    "r_fov": int,
    "r_comm": float,
    "episode_len": int,
    "spawn": str,
}
RUN_KEYS = ("preset", "robots", "seed", "episodes", "policy", "checkpoint", "out", "render")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse INI text with sections [run], [scenario], [train], [reward]."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(parser.sections()) - {"run", "scenario", "train", "reward"}
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    cfg = base or RunConfig()
    run_updates, train_updates, scen = {}, {}, dict(cfg.scenario)
    defaults = RunConfig()
    try:
        if parser.has_section("run"):
            for key, value in parser["run"].items():
                if key not in RUN_KEYS:
                    raise ConfigError(f"unknown [run] key {key!r}")
                run_updates[key] = _parse_value(value, _field_kind(getattr(defaults, key), key))
        if parser.has_section("scenario"):
            for key, value in parser["scenario"].items():
                if key not in SCENARIO_KINDS:
                    raise ConfigError(f"unknown [scenario] key {key!r}")
                scen[key] = _parse_value(value, SCENARIO_KINDS[key])
        if parser.has_section("train"):
            train_defaults = TrainConfig()
            names = {f.name for f in fields(TrainConfig)}
            for key, value in parser["train"].items():
                if key not in names:
                    raise ConfigError(f"unknown [train] key {key!r}")
                train_updates[key] = _parse_value(value, _field_kind(getattr(train_defaults, key), key))
        weights = cfg.weights
        if parser.has_section("reward"):
            sec = parser["reward"]
            extra = set(sec) - {"alpha", "beta"}
            if extra:
                raise ConfigError(f"unknown [reward] keys: {', '.join(sorted(extra))}")
            weights = RewardWeights(float(sec.get("alpha", weights.alpha)), float(sec.get("beta", weights.beta)))
        train = TrainConfig(**{**asdict(cfg.train), **train_updates})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    out = RunConfig(**{**{k: getattr(cfg, k) for k in RUN_KEYS}, **run_updates}, scenario=scen, train=train, weights=weights)
    out.validate()
    return out


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps_config(cfg: RunConfig) -> str:
    buf = io.StringIO()
    buf.write("[run]\n")
    for key in RUN_KEYS:
        buf.write(f"{key} = {_format_value(getattr(cfg, key))}\n")
    buf.write("\n[scenario]\n")
    for key in SCENARIO_KEYS:
        if key in cfg.scenario:
            buf.write(f"{key} = {_format_value(cfg.scenario[key])}\n")
    buf.write("\n[train]\n")
    for f in fields(TrainConfig):
        buf.write(f"{f.name} = {_format_value(getattr(cfg.train, f.name))}\n")
    buf.write("\n[reward]\n")
    buf.write(f"alpha = {_format_value(cfg.weights.alpha)}\nbeta = {_format_value(cfg.weights.beta)}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# replay and frames

PALETTE = {
    "unexplored": (40, 40, 40),
    "free": (255, 255, 255),
    "obstacle": (128, 128, 128),
    "target": (255, 165, 0),
    "covered": (255, 230, 180),
    "frontier": (0, 200, 0),
}
ROBOT_COLORS = (
    (31, 119, 180),
    (214, 39, 40),
    (148, 103, 189),
    (23, 190, 207),
    (227, 119, 194),
    (140, 86, 75),
    (188, 189, 34),
    (0, 0, 128),
    (128, 0, 0),
    (0, 0, 0),
)
CELL_PIXELS = 8


def replay_records(config: ScenarioConfig, seed: int, log) -> list[dict]:
    """Header plus one record per step (record 0 is the initial sensing)."""
    world = generate_map(config.replace(seed=seed))
    header = {
        "type": "header",
        "width": world.width,
        "height": world.height,
        "r_fov": world.r_fov,
        "r_comm": world.r_comm,
        "seed": seed,
        "cells": ["".join(CELL_CHARS[int(k)] for k in row) for row in world.kind],
        "robots": [[r.x, r.y, int(r.heading)] for r in world.robots],
        "n_free": log.n_free,
        "n_targets": log.n_targets,
    }
    records = [header]
    for t in range(len(log.positions)):
        records.append(
            {
                "type": "step",
                "t": t,
                "positions": [list(p) for p in log.positions[t]],
                "headings": log.headings[t],
                "roles": None if t == 0 else log.roles[t - 1],
                "actions": None if t == 0 else log.actions[t - 1],
                "new_explored": [[list(c) for c in cells] for cells in log.new_cells[t]],
                "new_covered": [list(c) for c in log.new_covered[t]],
                "explored": log.explored[t],
                "covered": log.covered[t],
            }
        )
    return records


def write_replay(path, records) -> None:
    with open(path, "w", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_replay(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


CELL_CHARS = {int(CellKind.FREE): ".", int(CellKind.OBSTACLE): "#", int(CellKind.TARGET): "T"}


def _world_from_header(header: dict) -> GridWorld:
    lookup = {ch: k for k, ch in CELL_CHARS.items()}
    kind = np.array([[lookup[ch] for ch in row] for row in header["cells"]], dtype=np.int8)
    if kind.shape != (header["height"], header["width"]):
        raise ValueError("header cells do not match the stated size")
    robots = [RobotPose(i, x, y, Heading(h)) for i, (x, y, h) in enumerate(header["robots"])]
    return GridWorld(kind, robots, r_fov=header["r_fov"], r_comm=header["r_comm"])


def validate_replay(records) -> None:
    """Re-simulate the recorded actions and check every record; raises ValueError."""
    if not records or records[0].get("type") != "header":
        raise ValueError("replay must start with a header record")
    world = _world_from_header(records[0])
    steps = records[1:]
    if not steps:
        raise ValueError("replay has no step records")
    for rec in steps:
        if rec["t"] == 0:
            events = initial_sense(world)
        else:
            _, events = step(world, rec["actions"])
        if [list(p) for p in world.positions()] != rec["positions"]:
            raise ValueError(f"positions diverge at t={rec['t']}")
        if [int(r.heading) for r in world.robots] != rec["headings"]:
            raise ValueError(f"headings diverge at t={rec['t']}")
        if [[list(c) for c in cells] for cells in events.explored_cells] != rec["new_explored"]:
            raise ValueError(f"explored cells diverge at t={rec['t']}")
        if [list(c) for c in events.covered_cells] != rec["new_covered"]:
            raise ValueError(f"covered cells diverge at t={rec['t']}")
        if world.explored_free_count() != rec["explored"] or world.covered_count() != rec["covered"]:
            raise ValueError(f"counts diverge at t={rec['t']}")


def render_frame(world: GridWorld, scale: int = CELL_PIXELS) -> np.ndarray:
    """RGB image (H*scale, W*scale, 3) of the current world state."""
    H, W = world.kind.shape
    img = np.empty((H, W, 3), dtype=np.uint8)
    img[:] = PALETTE["unexplored"]
    explored = world.explored
    img[explored & (world.kind == CellKind.FREE)] = PALETTE["free"]
    img[frontier_mask(world)] = PALETTE["frontier"]
    img[world.kind == CellKind.OBSTACLE] = PALETTE["obstacle"]
    img[world.kind == CellKind.TARGET] = PALETTE["target"]
    img[world.covered] = PALETTE["covered"]
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    pad = max(1, scale // 4)
    for robot in world.robots:
        y0, x0 = robot.y * scale + pad, robot.x * scale + pad
        img[y0 : y0 + scale - 2 * pad, x0 : x0 + scale - 2 * pad] = ROBOT_COLORS[robot.id % len(ROBOT_COLORS)]
    return img


def write_ppm(path, img: np.ndarray) -> None:
    """Plain (P3) portable pixmap."""
    h, w, _ = img.shape
    rows = [" ".join(str(v) for v in row.ravel()) for row in img]
    with open(path, "w", newline="\n") as fh:
        fh.write(f"P3\n{w} {h}\n255\n")
        fh.write("\n".join(rows))
        fh.write("\n")


def write_frames(records, directory) -> int:
    """One frame per step record, rebuilt from the replay itself."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    world = _world_from_header(records[0])
    count = 0
    for rec in records[1:]:
        for (x, y), robot in zip(rec["positions"], world.robots):
            robot.x, robot.y = x, y
        for robot, h in zip(world.robots, rec["headings"]):
            robot.heading = Heading(h)
        for cells in rec["new_explored"]:
            for x, y in cells:
                world.explored[y, x] = True
        for x, y in rec["new_covered"]:
            world.covered[y, x] = True
        write_ppm(directory / f"frame_{rec['t']:04d}.ppm", render_frame(world))
        count += 1
    return count


# ---------------------------------------------------------------------------
# commands


def make_policy(name: str, checkpoint: str | None):
    if name == "random":
        return RandomPolicy()
    if name == "greedy":
        return GreedyPolicy()
    if name == "scripted":
        return ScriptedPolicy()
    if name == "learned":
        if not checkpoint or not Path(checkpoint).is_file():
            raise ConfigError(f"checkpoint not found: {checkpoint}")
        bundle, _ = load_bundle(checkpoint)
        return LearnedPolicy(bundle)
    raise ConfigError(f"unknown policy {name!r}")


def _check_learned_fit(policy, scenario: ScenarioConfig) -> None:
    if isinstance(policy, LearnedPolicy):
        from .observation import local_feature_dim

        if policy.bundle.local_dim != local_feature_dim(scenario.r_fov):
            raise ConfigError("checkpoint was trained with a different r_fov than the evaluation scenario")


def cmd_gen_map(cfg: RunConfig, out: Path) -> int:
    world = generate_map(cfg.scenario_config())
    out.mkdir(parents=True, exist_ok=True)
    path = out / "map.txt"
    path.write_text(dumps_map(world))
    n_obs = int(np.count_nonzero(world.kind == CellKind.OBSTACLE))
    print(f"wrote {path}: {world.width}x{world.height}, {n_obs} obstacles, {world.n_targets} targets, {world.n_robots} robots")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, timesteps: int | None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    scenario = cfg.scenario_config()
    if cfg.checkpoint and Path(cfg.checkpoint).is_file():
        trainer = Trainer.load(cfg.checkpoint)
        print(f"resuming from {cfg.checkpoint} at step {trainer.steps}")
    else:
        train = TrainConfig(**{**asdict(cfg.train), "seed": cfg.seed})
        trainer = Trainer(scenario, train, cfg.weights)
    total = trainer.config.total_timesteps if timesteps is None else timesteps
    log_path = out / "train_log.csv"
    ckpt_path = out / "checkpoint.ckpt"
    try:
        trainer.train(total, log_path=log_path, checkpoint_path=ckpt_path, callback=_print_row)
    except (NonFiniteLoss, NonFiniteGradient) as exc:
        dump = {"error": str(exc), "steps": trainer.steps, "updates": trainer.updates, "metadata": trainer.metadata()}
        (out / "failure.json").write_text(json.dumps(dump, indent=2, default=str))
        print(f"numeric failure: {exc}; diagnostics in {out / 'failure.json'}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {ckpt_path} and {log_path}")
    return EXIT_OK


def _print_row(row: dict) -> None:
    print(
        f"update {row['update_index']:4d} steps {row['steps']:8d} "
        f"L_r {row['L_r']:+.4f} L_p {row['L_p']:+.4f} "
        f"R_e {row['R_e_mean']:.4f} R_c {row['R_c_mean']:.4f} explore {row['role_explore_fraction']:.3f}",
        flush=True,
    )


def _metric(value) -> str:
    return "" if value is None else f"{value:.6f}"


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for preset in cfg.presets():
        scenario = cfg.scenario_config(preset)
        for name in cfg.policies():
            policy = make_policy(name, cfg.checkpoint)
            _check_learned_fit(policy, scenario)
            report, logs = evaluate(scenario, policy, cfg.episodes, base_seed=cfg.seed)
            rows.append(
                [preset, scenario.n_robots, name, report.episodes, _metric(report.explo_pct), _metric(report.cover_pct),
                 _metric(report.time_e), _metric(report.role_explore_fraction)]
            )
            records = replay_records(scenario, episode_seed(cfg.seed, 0), logs[0])
            write_replay(out / f"replay_{preset}_{name}.jsonl", records)
            if cfg.render:
                write_frames(records, out / f"frames_{preset}_{name}")
    path = out / "metrics.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        writer.writerows(rows)
    _print_table(rows)
    return EXIT_OK


def _print_table(rows) -> None:
    widths = [max(len(str(c)) for c in col) for col in zip(METRIC_COLUMNS, *rows)]
    for row in (METRIC_COLUMNS, *rows):
        print("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))


def cmd_replay(cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    scenario = cfg.scenario_config()
    policy = make_policy(cfg.policies()[0], cfg.checkpoint)
    _check_learned_fit(policy, scenario)
    log = run_episode(scenario, policy, cfg.seed)
    records = replay_records(scenario, cfg.seed, log)
    path = out / "replay.jsonl"
    write_replay(path, records)
    msg = f"wrote {path} ({log.steps} steps)"
    if cfg.render:
        n = write_frames(records, out / "frames")
        msg += f" and {n} frames"
    print(msg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [run]/[scenario]/[train]/[reward] sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", help="preset name (eval accepts a comma-separated list)")
    common.add_argument("--robots", type=int)
    common.add_argument("--episodes", type=int)
    common.add_argument("--timesteps", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--policy", help="random, greedy, scripted or learned (eval accepts a list)")
    common.add_argument("--checkpoint")
    common.add_argument("--out", help="output directory")
    common.add_argument("--render", action="store_true", default=None, help="also write PPM frames")
    common.add_argument("--width", type=int)
    common.add_argument("--height", type=int)
    common.add_argument("--obstacles", type=int)
    common.add_argument("--targets", type=int)
    common.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")

    parser = argparse.ArgumentParser(prog="areasearch", description="Multi-robot area search simulator and trainer.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-map", parents=[common], help="generate a map file")
    sub.add_parser("train", parents=[common], help="train the hierarchical policy")
    sub.add_parser("eval", parents=[common], help="evaluate policies and write metrics")
    sub.add_parser("replay", parents=[common], help="export one episode as a replay")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.command == "train":
        cfg.preset = "desk"
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        cfg = parse_config(text, cfg)
    updates = {k: getattr(args, k) for k in ("preset", "robots", "seed", "episodes", "policy", "checkpoint", "out", "render")}
    for key, value in updates.items():
        if value is not None:
            setattr(cfg, key, value)
    for flag, key in (("width", "width"), ("height", "height"), ("obstacles", "n_obstacles"), ("targets", "n_targets")):
        value = getattr(args, flag)
        if value is not None:
            cfg.scenario = {**cfg.scenario, key: value}
    if args.alpha is not None or args.beta is not None:
        alpha = args.alpha if args.alpha is not None else (1.0 - args.beta if args.beta is not None else cfg.weights.alpha)
        beta = args.beta if args.beta is not None else 1.0 - alpha
        try:
            cfg.weights = RewardWeights(round(alpha, 12), round(beta, 12))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if args.timesteps is not None:
        cfg.train.total_timesteps = args.timesteps
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(dumps_config(cfg))
            return EXIT_OK
        out = Path(cfg.out)
        if args.command == "gen-map":
            return cmd_gen_map(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.timesteps)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        return cmd_replay(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleScenario as exc:
        print(f"infeasible scenario: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NonFiniteLoss, NonFiniteGradient) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
