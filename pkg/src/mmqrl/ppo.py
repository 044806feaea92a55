"""Clipped-surrogate PPO with GAE, lockstep rollout workers and the obstacle curriculum.

Rollout workers are independent environment instances with their own seeds.
They are stepped in lockstep inside one process: one batched policy forward,
one batched nearest-frame search, then each environment finishes its own
step. A worker's trajectory depends only on the policy snapshot, its seeds and
the batch composition, which is fixed by the config, so runs are reproducible.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, resolve
from .env_obstacles import ObstacleConfig, ObstacleEnv, curriculum_advance
from .env_plane import SUCCESS, PlaneConfig, PlaneEnv
from .matching import MatchIndex
from .motion_db import FeatureDatabase, GaitConfig, build_feature_database, generate_synthetic_locomotion
from .nets import LOG_STD_MAX, LOG_STD_MIN, ActorCritic, arch_for_env, gaussian_log_prob, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

CSV_COLUMNS = ["iteration", "env_steps", "wall_seconds", "mean_return", "mean_ep_len", "success_ratio", "stage",
               "trailing_success", "episodes", "kl", "clip_frac", "value_loss"]
TRAILING = 100


# -- setup -------------------------------------------------------------------

def database_for(cfg: RunConfig) -> FeatureDatabase:
    if cfg.db_path:
        return FeatureDatabase.load(cfg.db_path)
    clips = generate_synthetic_locomotion(GaitConfig(minutes=cfg.data_minutes), cfg.data_seed)
    return build_feature_database(clips)


def make_env(cfg: RunConfig, db: FeatureDatabase, index: MatchIndex, seed, stitch_poses: bool = False,
             stage: int | None = None):
    if cfg.env == "plane":
        pc = PlaneConfig(max_steps=cfg.max_steps, goal_half_extent=cfg.goal_half_extent,
                         success_radius=cfg.success_radius, success_bonus=cfg.plane_success_bonus)
        return PlaneEnv(db, index, pc, seed=seed, stitch_poses=stitch_poses)
    oc = ObstacleConfig(stage=cfg.start_stage if stage is None else stage, hit_reward=cfg.hit_reward,
                        n_obstacles=cfg.n_obstacles, collision_radius=cfg.collision_radius,
                        success_radius=cfg.success_radius, success_bonus=cfg.obstacle_success_bonus,
                        safety_cap=cfg.safety_cap)
    return ObstacleEnv(db, index, oc, seed=seed, stitch_poses=stitch_poses)


def worker_shares(n_steps: int, n_workers: int) -> list[int]:
    """Split ``n_steps`` as evenly as possible; earlier workers take the remainder."""
    base, extra = divmod(n_steps, n_workers)
    return [base + (k < extra) for k in range(n_workers)]


# -- observation normalization (optional) --------------------------------------

@dataclass
class RunningStat:
    """Per-dimension running mean/variance merged batch by batch."""

    mean: np.ndarray
    var: np.ndarray
    count: float = 1e-4

    @classmethod
    def zeros(cls, dim: int) -> "RunningStat":
        return cls(np.zeros(dim), np.ones(dim))

    def update(self, x: np.ndarray) -> None:
        bm, bv, n = x.mean(axis=0), x.var(axis=0), len(x)
        delta = bm - self.mean
        tot = self.count + n
        self.mean = self.mean + delta * n / tot
        self.var = (self.var * self.count + bv * n + delta ** 2 * self.count * n / tot) / tot
        self.count = tot

    def apply(self, obs: np.ndarray) -> np.ndarray:
        return np.clip((obs - self.mean) / np.sqrt(self.var + 1e-8), -10.0, 10.0).astype(np.float32)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": self.count}

    @classmethod
    def from_dict(cls, d) -> "RunningStat":
        return cls(np.array(d["mean"]), np.array(d["var"]), d["count"])


# -- rollouts -------------------------------------------------------------------

@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    worker: np.ndarray
    episode: np.ndarray
    bootstrap: np.ndarray  # per worker: value after its last step (0 if that step ended an episode)
    episodes: list[dict] = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)


class Workers:
    """Lockstep rollout workers (environment instances with private seeds)."""

    def __init__(self, envs, seed):
        self.envs = list(envs)
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        seqs = seq.spawn(len(self.envs))
        self.rngs = [np.random.default_rng(s) for s in seqs]
        self.obs = [env.reset() for env in self.envs]
        self.episode_ids = list(range(len(self.envs)))
        self._next_episode = len(self.envs)

    def __len__(self) -> int:
        return len(self.envs)

    def set_stage(self, stage: int) -> None:
        for env in self.envs:
            env.set_stage(stage)

    def collect(self, ac: ActorCritic, params, n_steps: int, obs_stat: RunningStat | None = None) -> RolloutBatch:
        shares = worker_shares(n_steps, len(self))
        index = self.envs[0].character.index
        log_std = ac.log_std(params).astype(float)
        std = np.exp(log_std)
        rec = {k: [[] for _ in self.envs] for k in ("obs", "act", "logp", "rew", "val", "done", "ep")}
        episodes = []
        for t in range(max(shares)):
            active = [k for k in range(len(self)) if t < shares[k]]
            raw_obs = np.stack([self.obs[k] for k in active]).astype(np.float32)
            obs = obs_stat.apply(raw_obs) if obs_stat is not None else raw_obs
            means = ac.mean(params, obs).astype(float)
            values = ac.value(params, obs).astype(float)
            actions = []
            for i, k in enumerate(active):
                a = means[i] + std * self.rngs[k].standard_normal(len(std))
                actions.append(a)
                rec["obs"][k].append(raw_obs[i])
                rec["act"][k].append(a)
                rec["logp"][k].append(float(gaussian_log_prob(a, means[i], log_std)))
                rec["val"][k].append(values[i])
                rec["ep"][k].append(self.episode_ids[k])
            queries = [self.envs[k].begin_step(a) for k, a in zip(active, actions)]
            matches = index.query_batch(np.stack(queries))
            for k, m in zip(active, matches):
                env = self.envs[k]
                nxt, r, done, info = env.end_step(m)
                rec["rew"][k].append(r)
                rec["done"][k].append(done)
                if done:
                    episodes.append({"worker": k, "episode": self.episode_ids[k], "return": env.episode_return,
                                     "length": env.steps, "status": info["status"],
                                     "stage": getattr(env, "episode_stage", 0)})
                    self.episode_ids[k] = self._next_episode
                    self._next_episode += 1
                    nxt = env.reset()
                self.obs[k] = nxt
        # bootstrap values for workers whose segment stopped mid-episode
        bootstrap = np.zeros(len(self))
        open_ = [k for k in range(len(self)) if shares[k] and not rec["done"][k][-1]]
        if open_:
            raw = np.stack([self.obs[k] for k in open_]).astype(np.float32)
            bootstrap[open_] = ac.value(params, obs_stat.apply(raw) if obs_stat is not None else raw)

        def cat(key, dtype):
            return np.array([x for k in range(len(self)) for x in rec[key][k]], dtype=dtype)

        return RolloutBatch(
            obs=np.array([x for k in range(len(self)) for x in rec["obs"][k]], dtype=np.float32).reshape(n_steps, -1),
            actions=np.array([x for k in range(len(self)) for x in rec["act"][k]], dtype=np.float32),
            log_probs=cat("logp", np.float64), rewards=cat("rew", np.float64), values=cat("val", np.float64),
            dones=cat("done", bool), episode=cat("ep", np.int64),
            worker=np.repeat(np.arange(len(self)), shares), bootstrap=bootstrap, episodes=episodes)


def collect_rollouts(ac, params, workers: Workers, n_steps: int, obs_stat=None) -> RolloutBatch:
    return workers.collect(ac, params, n_steps, obs_stat)


# -- advantages -------------------------------------------------------------------

def gae(rewards, values, dones, last_value, gamma, lam):
    """Generalized advantage estimation over one worker's contiguous segment.

    ``dones[t]`` marks that step ``t`` ended an episode (success, collision or
    timeout); ``last_value`` is V of the state after the final step.
    Returns (advantages, returns), unnormalized.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    notdone = 1.0 - np.asarray(dones, dtype=float)
    n = len(rewards)
    adv = np.zeros(n)
    next_value = float(last_value)
    running = 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * next_value * notdone[t] - values[t]
        running = delta + gamma * lam * notdone[t] * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-8 else 1.0)


def compute_gae(batch: RolloutBatch, gamma: float, lam: float, normalize: bool = True) -> RolloutBatch:
    adv = np.zeros(len(batch))
    ret = np.zeros(len(batch))
    for k in range(len(batch.bootstrap)):
        sel = np.flatnonzero(batch.worker == k)
        if len(sel):
            adv[sel], ret[sel] = gae(batch.rewards[sel], batch.values[sel], batch.dones[sel],
                                     batch.bootstrap[k], gamma, lam)
    batch.returns = ret
    batch.advantages = normalize_advantages(adv) if normalize else adv
    return batch


# -- update ---------------------------------------------------------------------------

class Adam:
    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n, dtype=np.float32)
        self.v = np.zeros(n, dtype=np.float32)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        g = grad.astype(np.float32)
        self.m *= self.beta1
        self.m += (1 - self.beta1) * g
        self.v *= self.beta2
        g *= g
        g *= 1 - self.beta2
        self.v += g
        # lr * mhat / (sqrt(vhat) + eps), without temporaries beyond one buffer
        denom = np.sqrt(self.v / (1 - self.beta2 ** self.t))
        denom += self.eps
        step = self.m * np.float32(self.lr / (1 - self.beta1 ** self.t))
        step /= denom
        return (params - step).astype(params.dtype, copy=False)

    def snapshot(self):
        return self.m.copy(), self.v.copy(), self.t

    def restore(self, snap) -> None:
        self.m, self.v, self.t = snap[0].copy(), snap[1].copy(), snap[2]


def ppo_loss_and_grad(ac: ActorCritic, params, obs, actions, old_logp, adv, returns, clip: float,
                      value_coef: float, entropy_coef: float = 0.0):
    """Loss ``-surrogate + c_v * mse - c_e * entropy`` on one minibatch and its flat gradient."""
    pol, log_std_raw, val = ac.split(params)
    n = len(obs)
    mean, pcache = ac.policy_net.forward(pol, obs, keep=True)
    value, vcache = ac.value_net.forward(val, obs, keep=True)
    value = value[:, 0].astype(float)
    mean = mean.astype(float)
    log_std = np.clip(log_std_raw.astype(float), LOG_STD_MIN, LOG_STD_MAX)
    inv_std = np.exp(-log_std)
    z = (actions - mean) * inv_std
    logp = -0.5 * (z * z).sum(axis=1) - log_std.sum() - 0.5 * mean.shape[1] * np.log(2 * np.pi)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    unclipped_obj = ratio * adv
    surrogate = np.minimum(unclipped_obj, clipped * adv)
    value_err = value - returns
    entropy = float(log_std.sum() + 0.5 * len(log_std) * (1.0 + np.log(2 * np.pi)))
    loss = -surrogate.mean() + value_coef * (value_err ** 2).mean() - entropy_coef * entropy

    # d loss / d logp: only where the unclipped branch is the active minimum
    g_logp = -(unclipped_obj * (unclipped_obj <= clipped * adv)) / n
    g_mean = g_logp[:, None] * z * inv_std
    g_log_std = (g_logp[:, None] * (z * z - 1.0)).sum(axis=0) - entropy_coef
    g_log_std = g_log_std * ((log_std_raw >= LOG_STD_MIN) & (log_std_raw <= LOG_STD_MAX))
    g_value = (2.0 * value_coef / n) * value_err
    grad = np.concatenate([
        ac.policy_net.backward(pol, pcache, g_mean.astype(pol.dtype)),
        g_log_std.astype(pol.dtype),
        ac.value_net.backward(val, vcache, g_value[:, None].astype(val.dtype)),
    ])
    metrics = {
        "loss": float(loss),
        "kl": float(np.mean(old_logp - logp)),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip)),
        "value_loss": float((value_err ** 2).mean()),
        "ratio": ratio,
    }
    return loss, grad, metrics


def ppo_update(ac: ActorCritic, params, adam: Adam, batch: RolloutBatch, cfg: RunConfig, rng: np.random.Generator,
               obs_stat: RunningStat | None = None):
    """Epochs of shuffled minibatch steps. Returns (params, metrics).

    A non-finite loss or gradient abandons the whole update: parameters and
    optimizer state revert to their values on entry and ``metrics["aborted"]``
    is set.
    """
    start = params.copy()
    snap = adam.snapshot()
    obs = obs_stat.apply(batch.obs) if obs_stat is not None else batch.obs
    n = len(batch)
    kls, clips, vls = [], [], []
    first_ratio = None
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch):
            mb = order[lo:lo + cfg.minibatch]
            loss, grad, m = ppo_loss_and_grad(ac, params, obs[mb], batch.actions[mb].astype(float),
                                              batch.log_probs[mb], batch.advantages[mb], batch.returns[mb],
                                              cfg.clip, cfg.value_coef, cfg.entropy_coef)
            if first_ratio is None:
                first_ratio = m["ratio"]
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                log.warning("non-finite PPO loss; update abandoned and parameters restored")
                adam.restore(snap)
                return start, {"aborted": True, "kl": math.nan, "clip_frac": math.nan, "value_loss": math.nan}
            params = adam.step(params, grad)
            n_pol = ac.policy_net.n_params
            params[n_pol:ac.n_policy] = np.clip(params[n_pol:ac.n_policy], LOG_STD_MIN, LOG_STD_MAX)
            kls.append(m["kl"])
            clips.append(m["clip_frac"])
            vls.append(m["value_loss"])
    return params, {"aborted": False, "kl": float(np.mean(kls)), "clip_frac": float(np.mean(clips)),
                    "value_loss": float(np.mean(vls)), "first_ratio": first_ratio}


# -- training loop -----------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


@dataclass
class TrainState:
    iteration: int = 0
    env_steps: int = 0
    wall_seconds: float = 0.0
    stage: int = 0
    stage_history: list = field(default_factory=list)
    trailing: list = field(default_factory=list)
    rng_state: dict | None = None
    obs_stat: dict | None = None


def _checkpoint(path, ac, params, adam, state: TrainState, cfg: RunConfig):
    meta = {"iteration": state.iteration, "env_steps": state.env_steps, "wall_seconds": state.wall_seconds,
            "stage": state.stage, "stage_history": state.stage_history, "trailing": state.trailing,
            "rng_state": state.rng_state, "obs_stat": state.obs_stat, "adam_t": adam.t,
            "env": cfg.env, "config": cfg.to_dict(), "config_sha256": cfg.sha256}
    save_checkpoint(path, ac.arch, params, meta, (adam.m, adam.v))


def n_iterations(cfg: RunConfig) -> int:
    return math.ceil(cfg.total_steps / cfg.steps_per_iter)


def train(cfg: RunConfig, out_dir, db: FeatureDatabase | None = None, resume=None, echo=None) -> Path:
    """Run PPO; writes config.json, curve.csv and checkpoints into ``out_dir``.

    Returns the path of the learning-curve CSV.
    """
    cfg = resolve(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    db = db if db is not None else database_for(cfg)
    index = MatchIndex(db)
    ac = ActorCritic(arch_for_env(cfg.env))
    params = ac.init(np.random.SeedSequence([cfg.seed, 1]))
    adam = Adam(ac.n_params, cfg.lr)
    trainer_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    obs_stat = RunningStat.zeros(ac.obs_dim) if cfg.normalize_obs else None
    state = TrainState(stage=cfg.start_stage)
    csv_path = out / "curve.csv"

    if resume is not None:
        arch, params, meta, moments = load_checkpoint(resume)
        if arch != ac.arch or meta.get("env") != cfg.env:
            raise ValueError(f"checkpoint is for {meta.get('env')}/{arch}, not {cfg.env}/{ac.arch}")
        adam.m, adam.v = moments
        adam.t = meta["adam_t"]
        state = TrainState(meta["iteration"], meta["env_steps"], meta["wall_seconds"], meta["stage"],
                           meta["stage_history"], meta["trailing"], meta["rng_state"], meta["obs_stat"])
        trainer_rng.bit_generator.state = state.rng_state
        if state.obs_stat is not None:
            obs_stat = RunningStat.from_dict(state.obs_stat)
        _truncate_csv(csv_path, state.iteration)
    else:
        with open(csv_path, "w", newline="") as f:
            f.write(f"# config_sha256={cfg.sha256}\n")
            csv.writer(f).writerow(CSV_COLUMNS)

    env_seeds = np.random.SeedSequence([cfg.seed, 3, state.iteration]).spawn(cfg.workers)
    envs = [make_env(cfg, db, index, s, stage=state.stage) for s in env_seeds]
    workers = Workers(envs, np.random.SeedSequence([cfg.seed, 4, state.iteration]))
    stage_history = deque(state.stage_history, maxlen=cfg.curriculum_window)
    trailing = deque(state.trailing, maxlen=TRAILING)
    milestones = sorted(cfg.checkpoint_steps)

    for it in range(state.iteration, n_iterations(cfg)):
        t0 = time.perf_counter()
        batch = workers.collect(ac, params, cfg.steps_per_iter, obs_stat)
        if obs_stat is not None:
            obs_stat.update(batch.obs)
        compute_gae(batch, cfg.gamma, cfg.lam)
        params, metrics = ppo_update(ac, params, adam, batch, cfg, trainer_rng, obs_stat)

        eps = batch.episodes
        successes = [e["status"] == SUCCESS for e in eps]
        trailing.extend(successes)
        run_stage = state.stage
        if cfg.env == "obstacles" and cfg.curriculum:
            stage_history.extend(s for s, e in zip(successes, eps) if e["stage"] == state.stage)
            new_stage = curriculum_advance(list(stage_history), state.stage, cfg.curriculum_window,
                                           cfg.curriculum_threshold)
            if new_stage != state.stage:
                state.stage = new_stage
                stage_history.clear()
                workers.set_stage(new_stage)

        prev_steps = state.env_steps
        state.iteration = it + 1
        state.env_steps += len(batch)
        state.wall_seconds += time.perf_counter() - t0
        row = [state.iteration, state.env_steps, round(state.wall_seconds, 3),
               float(np.mean([e["return"] for e in eps])) if eps else math.nan,
               float(np.mean([e["length"] for e in eps])) if eps else math.nan,
               float(np.mean(successes)) if eps else math.nan,
               run_stage,
               float(np.mean(trailing)) if trailing else math.nan,
               len(eps), metrics["kl"], metrics["clip_frac"], metrics["value_loss"]]
        with open(csv_path, "a", newline="") as f:
            csv.writer(f).writerow([_fmt(x) for x in row])
        if echo is not None:
            echo(", ".join(f"{k}={_fmt(v)}" for k, v in zip(CSV_COLUMNS, row)))

        state.stage_history = list(stage_history)
        state.trailing = [bool(x) for x in trailing]
        state.rng_state = trainer_rng.bit_generator.state
        state.obs_stat = obs_stat.to_dict() if obs_stat is not None else None
        last = state.iteration == n_iterations(cfg)
        if state.iteration % cfg.checkpoint_every == 0 or last:
            _checkpoint(out / "latest.ckpt", ac, params, adam, state, cfg)
        for m in milestones:
            if prev_steps < m <= state.env_steps:
                _checkpoint(out / f"step_{m}.ckpt", ac, params, adam, state, cfg)
    return csv_path


def _truncate_csv(path: Path, iteration: int) -> None:
    """Drop rows logged after the checkpoint being resumed from."""
    lines = path.read_text().splitlines(keepends=True)
    keep = []
    for line in lines:
        head = line.split(",", 1)[0]
        if head.isdigit() and int(head) > iteration:
            continue
        keep.append(line)
    path.write_text("".join(keep))


def read_curve(path) -> list[dict]:
    with open(path) as f:
        rows = [line for line in f if not line.startswith("#")]
    return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(rows)]


# -- evaluation -----------------------------------------------------------------------

def evaluate(cfg: RunConfig, params, episodes: int, seed: int, db=None, index=None, stage: int | None = None,
             obs_stat: RunningStat | None = None) -> dict:
    """Deterministic (mean-action) episodes; returns summary metrics and per-episode records."""
    db = db if db is not None else database_for(cfg)
    index = index if index is not None else MatchIndex(db)
    ac = ActorCritic(arch_for_env(cfg.env))
    env = make_env(cfg, db, index, seed, stage=stage)
    records = []
    for ep in range(episodes):
        obs = env.reset()
        done = False
        while not done:
            x = obs[None].astype(np.float32)
            if obs_stat is not None:
                x = obs_stat.apply(x)
            action = ac.mean(params, x)[0].astype(float)
            obs, _, done, info = env.step(action)
        records.append({"episode": ep, "status": info["status"], "length": env.steps,
                        "return": env.episode_return, "final_distance": info["distance"]})
    n = max(len(records), 1)
    return {
        "episodes": len(records),
        "success_ratio": sum(r["status"] == SUCCESS for r in records) / n,
        "mean_ep_len": sum(r["length"] for r in records) / n,
        "mean_return": sum(r["return"] for r in records) / n,
        "records": records,
    }
