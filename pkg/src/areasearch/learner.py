"""Dual actor-critic PPO: rollouts, GAE for both levels, joint update.

All robots share the four networks. The role critic sees
``[local | joint | aggregated]`` features and the primitive critic sees
``[local | role | joint]``; the actors only use decentralised inputs.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import LengthMismatch, NonFiniteGradient, NonFiniteLoss
from .evaluation import episode_seed
from .observation import JOINT_FEATURE_DIM, local_feature_dim, robot_features
from .policy import PolicyBundle, primitive_input, role_input, sample_categorical
from .reward import RewardWeights, exploration_ability, primitive_rewards
from .world import ScenarioConfig, generate_map, initial_sense, step

LOG_COLUMNS = (
    "update_index",
    "steps",
    "L_r",
    "L_p",
    "R_e_mean",
    "R_c_mean",
    "role_explore_fraction",
    "entropy_role",
    "entropy_prim",
)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    clip: float = 0.2
    gamma: float = 0.9
    gae_lambda: float = 0.95
    c1_r: float = 0.5
    c2_r: float = 1e-4
    c3_r: float = 0.01
    c1_p: float | None = None
    c2_p: float | None = None
    c3_p: float | None = None
    batch: int = 5000
    minibatch: int = 1000
    epochs: int = 4
    total_timesteps: int = 200_000
    n_envs: int = 8
    role_period: int = 1
    b_e_mode: str = "as_printed"
    hidden: tuple[int, ...] = (64, 32)
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.minibatch <= 0 or self.batch % self.minibatch:
            raise ValueError("minibatch must divide batch")

    def coefficients(self, level: str) -> tuple[float, float, float]:
        if level == "role":
            return self.c1_r, self.c2_r, self.c3_r
        return (
            self.c1_r if self.c1_p is None else self.c1_p,
            self.c2_r if self.c2_p is None else self.c2_p,
            self.c3_r if self.c3_p is None else self.c3_p,
        )


@dataclass
class Critics:
    role: nn.MlpParams
    primitive: nn.MlpParams

    @classmethod
    def create(cls, r_fov: int, rng: np.random.Generator, hidden=(64, 32)):
        F = local_feature_dim(r_fov)
        return cls(
            nn.init_params(nn.MlpSpec((2 * F + JOINT_FEATURE_DIM, *hidden, 1)), rng),
            nn.init_params(nn.MlpSpec((F + 1 + JOINT_FEATURE_DIM, *hidden, 1)), rng),
        )


def primitive_critic_input(local, roles, joint) -> np.ndarray:
    return np.concatenate([primitive_input(local, roles), np.atleast_2d(joint)], axis=1)


# ---------------------------------------------------------------------------
# advantage estimation


def gae(rewards, values, bootstrap_value, gamma: float, lam: float, dones=None):
    """Generalised advantage estimates and returns.

    ``rewards``/``values``/``dones`` are aligned along axis 0 (extra trailing
    axes are independent sequences). ``dones[t]`` marks that the episode ended
    after step ``t``, which cuts both bootstrapping and the GAE trace.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise LengthMismatch(f"rewards {rewards.shape} and values {values.shape} differ")
    dones = np.zeros_like(rewards) if dones is None else np.asarray(dones, dtype=np.float64)
    if dones.shape != rewards.shape:
        raise LengthMismatch("dones must align with rewards")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.broadcast_to(np.asarray(bootstrap_value, dtype=np.float64), rewards.shape[1:])
    running = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


# ---------------------------------------------------------------------------
# environments and rollouts


class AreaSearchEnv:
    """One gridworld episode with role-gated rewards."""

    def __init__(self, config: ScenarioConfig, weights: RewardWeights, b_e_mode: str = "as_printed"):
        self.config = config
        self.weights = weights
        self.B_e = exploration_ability(config.exploration_radius, 1.0, b_e_mode)
        self.world = None
        self.t = 0

    def reset(self, seed: int):
        self.world = generate_map(self.config.replace(seed=seed))
        initial_sense(self.world)
        self.t = 0
        return self.world

    def step(self, actions, roles):
        _, events = step(self.world, actions)
        self.t += 1
        record = primitive_rewards(events, roles, self.B_e, self.weights)
        done = self.t >= self.config.episode_len or self.world.is_done()
        return record, done


@dataclass
class RolloutBuffer:
    local: np.ndarray
    joint: np.ndarray
    agg: np.ndarray
    roles: np.ndarray
    role_logp: np.ndarray
    role_mask: np.ndarray
    actions: np.ndarray
    prim_logp: np.ndarray
    v_role: np.ndarray
    v_prim: np.ndarray
    r_role: np.ndarray
    r_prim: np.ndarray
    dones: np.ndarray
    adv_role: np.ndarray
    ret_role: np.ndarray
    adv_prim: np.ndarray
    ret_prim: np.ndarray
    episodes: int = 0
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx) -> "RolloutBuffer":
        names = [f for f in self.__dataclass_fields__ if f not in ("episodes", "stats")]
        return RolloutBuffer(**{n: getattr(self, n)[idx] for n in names}, episodes=self.episodes)

    def role_input(self) -> np.ndarray:
        return role_input(self.local, self.joint, self.agg)

    def role_critic_input(self) -> np.ndarray:
        return self.role_input()

    def prim_input(self) -> np.ndarray:
        return primitive_input(self.local, self.roles)

    def prim_critic_input(self) -> np.ndarray:
        return primitive_critic_input(self.local, self.roles, self.joint)


def _observe(envs):
    feats = [robot_features(env.world) for env in envs]
    local = np.stack([f[0] for f in feats])  # (E, N, F)
    joint = np.stack([np.broadcast_to(f[1], (f[0].shape[0], f[1].shape[0])) for f in feats])
    agg = np.stack([f[2] for f in feats])
    return local, joint, agg


def collect_rollouts(envs, bundle: PolicyBundle, critics: Critics, config: TrainConfig, rng, first_episode: int = 0):
    """Step all environments in lockstep until ``config.batch`` robot-steps are stored.

    Every call starts fresh episodes (seeded by episode counter); unfinished
    tails are bootstrapped with the critics. Returns the filled buffer.
    """
    E = len(envs)
    next_episode = first_episode
    for env in envs:
        env.reset(episode_seed(config.seed, next_episode))
        next_episode += 1
    N = envs[0].world.n_robots
    k = bundle.role_period
    roles = np.zeros((E, N), dtype=int)
    cols = {name: [] for name in RolloutBuffer.__dataclass_fields__ if name not in ("episodes", "stats")}
    stored = 0
    R_e_sum = R_c_sum = 0.0
    while stored < config.batch:
        local, joint, agg = _observe(envs)
        flat_local = local.reshape(E * N, -1)
        flat_joint = joint.reshape(E * N, -1)
        flat_agg = agg.reshape(E * N, -1)
        x_role = role_input(flat_local, flat_joint, flat_agg)
        role_logits = nn.forward(bundle.role_actor, x_role)
        role_lp_all = nn.log_softmax(role_logits)
        select = np.array([env.t % k == 0 for env in envs])
        sampled = sample_categorical(np.exp(role_lp_all), rng).reshape(E, N)
        roles = np.where(select[:, None], sampled, roles)
        flat_roles = roles.reshape(-1)
        role_lp = role_lp_all[np.arange(E * N), flat_roles]

        prim_logits = nn.forward(bundle.primitive_actor, primitive_input(flat_local, flat_roles))
        prim_lp_all = nn.log_softmax(prim_logits)
        actions = sample_categorical(np.exp(prim_lp_all), rng)
        prim_lp = prim_lp_all[np.arange(E * N), actions]

        v_role = nn.forward(critics.role, x_role)[:, 0]
        v_prim = nn.forward(critics.primitive, primitive_critic_input(flat_local, flat_roles, flat_joint))[:, 0]

        r_role = np.zeros((E, N))
        r_prim = np.zeros((E, N))
        dones = np.zeros((E, N))
        acts = actions.reshape(E, N)
        for e, env in enumerate(envs):
            record, done = env.step(acts[e], roles[e])
            r_role[e] = record.R_role
            r_prim[e] = record.per_robot_primitive
            dones[e] = float(done)
            R_e_sum += record.R_e
            R_c_sum += record.R_c
            if done:
                env.reset(episode_seed(config.seed, next_episode))
                next_episode += 1

        step_cols = dict(
            local=flat_local, joint=flat_joint, agg=flat_agg, roles=flat_roles, role_logp=role_lp,
            role_mask=np.repeat(select, N), actions=actions, prim_logp=prim_lp, v_role=v_role,
            v_prim=v_prim, r_role=r_role.ravel(), r_prim=r_prim.ravel(), dones=dones.ravel(),
        )
        for name, value in step_cols.items():
            cols[name].append(value)
        stored += E * N

    # bootstrap values for the state after the last stored step
    local, joint, agg = _observe(envs)
    fl, fj, fa = local.reshape(E * N, -1), joint.reshape(E * N, -1), agg.reshape(E * N, -1)
    boot_role = nn.forward(critics.role, role_input(fl, fj, fa))[:, 0]
    boot_prim = nn.forward(critics.primitive, primitive_critic_input(fl, roles.reshape(-1), fj))[:, 0]

    seq = {name: np.stack(cols[name]) for name in ("r_role", "r_prim", "v_role", "v_prim", "dones")}
    adv_r, ret_r = gae(seq["r_role"], seq["v_role"], boot_role, config.gamma, config.gae_lambda, seq["dones"])
    adv_p, ret_p = gae(seq["r_prim"], seq["v_prim"], boot_prim, config.gamma, config.gae_lambda, seq["dones"])

    data = {name: np.concatenate(values) for name, values in cols.items() if values}
    data.update(adv_role=adv_r.ravel(), ret_role=ret_r.ravel(), adv_prim=adv_p.ravel(), ret_prim=ret_p.ravel())
    steps = len(cols["dones"])
    buf = RolloutBuffer(**data, episodes=next_episode - first_episode)
    buf.stats = {
        "R_e_mean": R_e_sum / (steps * E),
        "R_c_mean": R_c_sum / (steps * E),
        "role_explore_fraction": float(np.mean(buf.roles[buf.role_mask] == 0)) if buf.role_mask.any() else float("nan"),
        "next_episode": next_episode,
    }
    return buf


# ---------------------------------------------------------------------------
# losses


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size == 0:
        return adv
    centered = adv - adv.mean()
    var = centered.var()
    if var < 1e-8:
        return centered
    return centered / np.sqrt(var)


def ppo_loss_and_grads(new_logp, new_values, entropies, old_logp, advantages, returns, coefs, clip: float):
    """Clipped surrogate + KL penalty + value error + entropy bonus.

    ``advantages`` must already be normalised. Returns ``(loss, diagnostics,
    grads)`` where grads are w.r.t. ``new_logp``, ``new_values`` and
    ``entropies``.
    """
    c1, c2, c3 = coefs
    new_logp, new_values, entropies, old_logp, advantages, returns = (
        np.asarray(a, dtype=np.float64) for a in (new_logp, new_values, entropies, old_logp, advantages, returns)
    )
    n = len(new_logp)
    ratio = np.exp(new_logp - old_logp)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1 - clip, 1 + clip) * advantages
    L_clip = -np.mean(np.minimum(unclipped, clipped))
    kl_raw = float(np.mean(old_logp - new_logp))
    L_kl = max(kl_raw, 0.0)
    L_vf = float(np.mean((new_values - returns) ** 2))
    L_ent = -float(np.mean(entropies))
    loss = L_clip + c1 * L_kl + c2 * L_vf + c3 * L_ent
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    active = unclipped <= clipped
    g_logp = np.where(active, -unclipped / n, 0.0)
    if kl_raw > 0:
        g_logp = g_logp - c1 / n
    grads = {
        "logp": g_logp,
        "value": c2 * 2.0 * (new_values - returns) / n,
        "entropy": np.full(n, -c3 / n),
    }
    diag = {
        "loss": loss,
        "clip": float(L_clip),
        "kl": L_kl,
        "value": L_vf,
        "entropy": -L_ent,
        "clip_fraction": float(np.mean(np.abs(ratio - 1) > clip)),
    }
    return loss, diag, grads


def ppo_loss(level, minibatch, new_logprobs, new_values, entropies, old_logprobs, advantages, returns, config: TrainConfig):
    """Scalar PPO objective for one level; advantages are normalised here."""
    adv = normalize_advantages(advantages)
    loss, diag, _ = ppo_loss_and_grads(
        new_logprobs, new_values, entropies, old_logprobs, adv, returns, config.coefficients(level), config.clip
    )
    diag["level"] = level
    diag["n"] = len(minibatch) if minibatch is not None else len(adv)
    return loss, diag


def _actor_critic_level(actor, critic, x_actor, x_critic, actions, old_logp, adv, ret, coefs, clip):
    logits = nn.forward(actor, x_actor)
    logp, ent, dlogp, dent = nn.categorical_terms(logits, actions)
    values = nn.forward(critic, x_critic)[:, 0]
    loss, diag, g = ppo_loss_and_grads(logp, values, ent, old_logp, normalize_advantages(adv), ret, coefs, clip)
    g_logits = g["logp"][:, None] * dlogp + g["entropy"][:, None] * dent
    g_actor, _ = nn.backward(actor, x_actor, g_logits)
    g_critic, _ = nn.backward(critic, x_critic, g["value"][:, None])
    return loss, diag, g_actor, g_critic


def total_loss_and_grads(mb: RolloutBuffer, bundle: PolicyBundle, critics: Critics, config: TrainConfig):
    """L = L_r + L_p on one minibatch and its gradients for all four networks."""
    grads = {}
    diag = {}
    mask = mb.role_mask.astype(bool)
    x_role = mb.role_input()
    if mask.any():
        L_r, d_r, grads["role_actor"], grads["role_critic"] = _actor_critic_level(
            bundle.role_actor, critics.role, x_role[mask], x_role[mask], mb.roles[mask],
            mb.role_logp[mask], mb.adv_role[mask], mb.ret_role[mask], config.coefficients("role"), config.clip,
        )
    else:
        L_r, d_r = 0.0, {"entropy": float("nan"), "kl": 0.0}
        grads["role_actor"] = np.zeros(bundle.role_actor.spec.n_params)
        grads["role_critic"] = np.zeros(critics.role.spec.n_params)
    L_p, d_p, grads["primitive_actor"], grads["primitive_critic"] = _actor_critic_level(
        bundle.primitive_actor, critics.primitive, mb.prim_input(), mb.prim_critic_input(), mb.actions,
        mb.prim_logp, mb.adv_prim, mb.ret_prim, config.coefficients("primitive"), config.clip,
    )
    diag.update(L_r=L_r, L_p=L_p, entropy_role=d_r["entropy"], entropy_prim=d_p["entropy"],
                kl_role=d_r["kl"], kl_prim=d_p["kl"])
    return L_r + L_p, diag, grads


NETWORKS = ("role_actor", "primitive_actor", "role_critic", "primitive_critic")


def _get_net(bundle, critics, name):
    return {
        "role_actor": lambda: bundle.role_actor,
        "primitive_actor": lambda: bundle.primitive_actor,
        "role_critic": lambda: critics.role,
        "primitive_critic": lambda: critics.primitive,
    }[name]()


def _set_net(bundle, critics, name, params):
    if name == "role_actor":
        bundle.role_actor = params
    elif name == "primitive_actor":
        bundle.primitive_actor = params
    elif name == "role_critic":
        critics.role = params
    else:
        critics.primitive = params


def update(buffer: RolloutBuffer, bundle: PolicyBundle, critics: Critics, optimizer_states: dict, config: TrainConfig, rng):
    """PPO epochs over shuffled minibatches; one Adam step per network per minibatch.

    ``bundle``, ``critics`` and ``optimizer_states`` are updated in place.
    Raises NonFiniteGradient before touching any parameters of a minibatch
    whose gradients are not finite.
    """
    n = len(buffer)
    n_chunks = max(1, round(n / config.minibatch))
    history = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for idx in np.array_split(perm, n_chunks):
            mb = buffer.take(idx)
            loss, diag, grads = total_loss_and_grads(mb, bundle, critics, config)
            for name in NETWORKS:
                if not np.all(np.isfinite(grads[name])):
                    raise NonFiniteGradient(f"non-finite gradient in {name}")
            for name in NETWORKS:
                params = _get_net(bundle, critics, name)
                optimizer_states[name], new_params = nn.optimizer_step(optimizer_states[name], params, grads[name])
                _set_net(bundle, critics, name, new_params)
            diag["loss"] = loss
            history.append(diag)
    keys = history[0].keys()
    return {k: float(np.nanmean([h[k] for h in history])) for k in keys}


# ---------------------------------------------------------------------------
# trainer with checkpoints


class Trainer:
    def __init__(self, scenario: ScenarioConfig, config: TrainConfig, weights: RewardWeights):
        self.scenario = scenario
        self.config = config
        self.weights = weights
        self.rng = np.random.default_rng(config.seed)
        init_rng = np.random.default_rng([config.seed, 7])
        self.bundle = PolicyBundle.create(scenario.r_fov, init_rng, config.role_period, config.hidden)
        self.critics = Critics.create(scenario.r_fov, init_rng, config.hidden)
        self.opt = {
            name: nn.OptimizerState.for_params(_get_net(self.bundle, self.critics, name), config.learning_rate)
            for name in NETWORKS
        }
        self.steps = 0
        self.updates = 0
        self.next_episode = 0

    def envs(self):
        return [AreaSearchEnv(self.scenario, self.weights, self.config.b_e_mode) for _ in range(self.config.n_envs)]

    def train_iteration(self, envs=None) -> dict:
        envs = envs or self.envs()
        buf = collect_rollouts(envs, self.bundle, self.critics, self.config, self.rng, self.next_episode)
        self.next_episode = buf.stats["next_episode"]
        diag = update(buf, self.bundle, self.critics, self.opt, self.config, self.rng)
        self.steps += len(buf)
        self.updates += 1
        row = {
            "update_index": self.updates,
            "steps": self.steps,
            "L_r": diag["L_r"],
            "L_p": diag["L_p"],
            "R_e_mean": buf.stats["R_e_mean"],
            "R_c_mean": buf.stats["R_c_mean"],
            "role_explore_fraction": buf.stats["role_explore_fraction"],
            "entropy_role": diag["entropy_role"],
            "entropy_prim": diag["entropy_prim"],
        }
        return row

    def train(self, total_timesteps: int | None = None, log_path=None, checkpoint_path=None, callback=None):
        total = self.config.total_timesteps if total_timesteps is None else total_timesteps
        envs = self.envs()
        rows = []
        while self.steps < total:
            row = self.train_iteration(envs)
            rows.append(row)
            if log_path is not None:
                append_log(log_path, row, self.header())
            if callback is not None:
                callback(row)
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return rows

    def header(self) -> dict:
        return {
            "alpha": self.weights.alpha,
            "beta": self.weights.beta,
            "seed": self.config.seed,
            "preset_width": self.scenario.width,
            "preset_height": self.scenario.height,
            "n_robots": self.scenario.n_robots,
        }

    def metadata(self) -> dict:
        cfg = asdict(self.config)
        cfg["hidden"] = list(cfg["hidden"])
        scen = asdict(self.scenario)
        return {
            "train_config": cfg,
            "scenario": scen,
            "weights": asdict(self.weights),
            "steps": self.steps,
            "updates": self.updates,
            "next_episode": self.next_episode,
            "rng_state": self.rng.bit_generator.state,
            "optimizer_t": {name: self.opt[name].t for name in NETWORKS},
            "layer_sizes": {name: list(_get_net(self.bundle, self.critics, name).spec.layer_sizes) for name in NETWORKS},
        }

    def save(self, path) -> None:
        arrays = {}
        for name in NETWORKS:
            arrays[name] = _get_net(self.bundle, self.critics, name).flat
        for name in NETWORKS:
            arrays[f"{name}.m"] = self.opt[name].m
            arrays[f"{name}.v"] = self.opt[name].v
        with open(path, "wb") as fh:
            nn.write_checkpoint(fh, arrays, self.metadata())

    @classmethod
    def load(cls, path) -> "Trainer":
        with open(path, "rb") as fh:
            arrays, meta = nn.read_checkpoint(fh)
        cfg = dict(meta["train_config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        trainer = cls(ScenarioConfig(**meta["scenario"]), TrainConfig(**cfg), RewardWeights(**meta["weights"]))
        for name in NETWORKS:
            spec = nn.MlpSpec(tuple(meta["layer_sizes"][name]))
            _set_net(trainer.bundle, trainer.critics, name, nn.MlpParams(spec, arrays[name]))
            trainer.opt[name] = nn.OptimizerState(
                arrays[f"{name}.m"].copy(), arrays[f"{name}.v"].copy(), meta["optimizer_t"][name], trainer.config.learning_rate
            )
        trainer.steps = meta["steps"]
        trainer.updates = meta["updates"]
        trainer.next_episode = meta["next_episode"]
        trainer.rng.bit_generator.state = meta["rng_state"]
        return trainer


def load_bundle(path) -> tuple[PolicyBundle, ScenarioConfig]:
    trainer = Trainer.load(path)
    return trainer.bundle, trainer.scenario


def append_log(path, row: dict, header: dict | None = None) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        if new:
            for key, value in (header or {}).items():
                fh.write(f"# {key}={json.dumps(value)}\n")
            csv.writer(fh).writerow(LOG_COLUMNS)
        csv.writer(fh).writerow([_fmt(row[c]) for c in LOG_COLUMNS])


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(round(value, 10))
    return str(value)
