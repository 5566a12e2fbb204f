"""Synchronous advantage actor-critic with optional curiosity reward.

Workers are simulated sequentially; each collects a fixed-length rollout
against its own environment with the shared parameters, then a single
averaged-gradient step updates the network.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import ConfigError, lstm_sequence, lstm_step_array
from .maze import MazeEnv, MazeSpec
from .nets import (ArchConfig, RecurrentPolicy, action_distribution, build_net, read_checkpoint,
                   save_checkpoint)
from .tensor import ContractError, Tensor

METRIC_FIELDS = ("env_steps", "updates", "mean_score", "score_stderr", "wall_ms", "entropy", "value_loss",
                 "policy_loss", "intrinsic_mean")


@dataclass
class TrainConfig:
    gamma: float = 0.99
    actor_lr: float = 1e-4  # policy head
    critic_lr: float = 1e-4  # value head and every shared layer
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    entropy_coef: float = 0.01
    value_loss_coef: float = 0.5
    workers: int = 8
    rollout_len: int = 20
    max_steps: int = 200_000
    grad_clip: float = 40.0
    n_step: bool = False
    eval_interval: int = 10  # updates between evaluations
    eval_episodes: int = 20
    early_stop_score: float = 0.9
    patience: int = 3
    intrinsic: str = "off"
    icm_fwd_weight: float = 0.2
    icm_inv_weight: float = 0.8
    record_wall_clock: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must be in (0, 1]")
        if self.entropy_coef < 0:
            raise ConfigError("entropy_coef must be >= 0")
        if self.workers < 1 or self.rollout_len < 1:
            raise ConfigError("workers and rollout_len must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.eval_interval < 1 or self.eval_episodes < 1 or self.patience < 1:
            raise ConfigError("eval_interval, eval_episodes and patience must be >= 1")
        if self.intrinsic not in ("off", "icm"):
            raise ConfigError(f"intrinsic must be 'off' or 'icm', got {self.intrinsic!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    reward_ext: float
    reward_int: float
    done: bool
    value: float
    log_prob: float
    entropy: float
    next_obs: np.ndarray

    @property
    def reward(self) -> float:
        return self.reward_ext + self.reward_int


@dataclass
class Rollout:
    transitions: list[Transition]
    bootstrap_value: float
    worker_id: int
    init_state: tuple[np.ndarray, np.ndarray]
    episode_scores: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.transitions:
            raise ContractError("a rollout needs at least one transition")
        if self.transitions[-1].done and self.bootstrap_value != 0.0:
            raise ContractError("a rollout ending in a terminal step must bootstrap from 0")

    def __len__(self):
        return len(self.transitions)

    @property
    def dones(self) -> list[bool]:
        return [tr.done for tr in self.transitions]

    @property
    def actions(self) -> np.ndarray:
        return np.array([tr.action for tr in self.transitions])

    @property
    def rewards(self) -> np.ndarray:
        return np.array([tr.reward for tr in self.transitions])


# ---------------------------------------------------------------------------
# Advantage and losses
# ---------------------------------------------------------------------------


def compute_advantage(r_next: float, v_t: float, v_next: float, done: bool, gamma: float) -> float:
    """One-step TD residual ``r + gamma * v_next * (1 - done) - v_t``."""
    return r_next + gamma * v_next * (1.0 - float(done)) - v_t


def td_targets(rewards, values, bootstrap: float, dones, gamma: float, n_step: bool = False) -> np.ndarray:
    """Critic targets for every step; ``values`` are V(s_t) for the same steps."""
    rewards = np.asarray(rewards, dtype=float)
    dones = np.asarray(dones, dtype=float)
    nxt = np.append(np.asarray(values, dtype=float)[1:], bootstrap)
    if not n_step:
        return rewards + gamma * nxt * (1.0 - dones)
    out = np.empty_like(rewards)
    ret = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        ret = rewards[t] + gamma * ret * (1.0 - dones[t])
        out[t] = ret
    return out


def actor_loss(logits: Tensor, actions, advantages, beta: float) -> tuple[Tensor, Tensor]:
    """``-mean_t(log pi(a_t) A_t + beta H_t)`` with ``advantages`` held constant.

    Returns the loss and the per-step entropies.
    """
    logp, entropy = action_distribution(logits)
    actions = np.asarray(actions)
    steps = len(actions)
    chosen = logp[np.arange(steps), actions]
    adv = Tensor(np.asarray(advantages, dtype=float))
    obj = (chosen * adv).sum() + T.scale(entropy.sum(), beta)
    return T.scale(obj, -1.0 / steps), entropy


def critic_loss(values: Tensor, targets) -> Tensor:
    """``mean_t 0.5 (target_t - V(s_t))^2`` with constant targets."""
    diff = Tensor(np.asarray(targets, dtype=float)) - values
    return T.scale(T.square(diff).sum(), 0.5 / values.shape[0])


# ---------------------------------------------------------------------------
# Acting
# ---------------------------------------------------------------------------


class FeatureCache:
    """Per-frame trunk outputs, valid while the parameters stay fixed.

    Frames are a pure function of the pose, and per-sample normalisation makes
    the trunk a pure function of the frame.
    """

    def __init__(self, fn):
        self.fn = fn
        self.store: dict[bytes, np.ndarray] = {}
        # rendered frames are shared objects, so identity usually avoids hashing the pixels
        self.by_id: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        hit = self.by_id.get(id(frame))
        if hit is not None and hit[0] is frame:
            return hit[1]
        key = frame.tobytes()
        out = self.store.get(key)
        if out is None:
            with T.no_grad():
                out = self.fn(Tensor(frame)).data
            self.store[key] = out
        self.by_id[id(frame)] = (frame, out)
        return out

    def clear(self):
        self.store.clear()
        self.by_id.clear()


def policy_step(net: RecurrentPolicy, feat: np.ndarray, state):
    """LSTM and heads for one (or a batch of) cached feature vectors."""
    h, c = lstm_step_array(feat, state[0], state[1], net.lstm)
    logits = h @ net.policy.weight.data.T + net.policy.bias.data
    value = (h @ net.value.weight.data.T + net.value.bias.data)[..., 0]
    return logits, value, (h, c)


@dataclass
class Worker:
    worker_id: int
    env: MazeEnv
    rng: np.random.Generator
    obs: np.ndarray | None = None
    state: tuple[np.ndarray, np.ndarray] | None = None


def _zero_state(net: RecurrentPolicy):
    return np.zeros(net.hidden_size), np.zeros(net.hidden_size)


def sample_action(logits: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> int:
    if greedy:
        return int(np.argmax(logits))
    z = logits - logits.max()
    p = np.exp(z) / np.exp(z).sum()
    return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), len(p) - 1))


def collect_rollout(net: RecurrentPolicy, worker: Worker, steps: int, features: FeatureCache | None = None,
                    icm_features: FeatureCache | None = None, greedy: bool = False) -> Rollout:
    """Run ``steps`` transitions, resetting the env and LSTM state at episode ends."""
    if steps < 1:
        raise ContractError("rollout length must be >= 1")
    features = features or FeatureCache(net.features)
    if worker.obs is None or worker.env.done:
        worker.obs = worker.env.reset()
        worker.state = _zero_state(net)
    init_state = worker.state
    out, scores = [], []
    for _ in range(steps):
        logits, value, state = policy_step(net, features(worker.obs), worker.state)
        logp = logits - logits.max()
        logp = logp - np.log(np.exp(logp).sum())
        action = sample_action(logits, worker.rng, greedy)
        nxt, reward, done = worker.env.step(action)
        r_int = 0.0
        if icm_features is not None:
            with T.no_grad():
                r_int = float(net.icm.intrinsic(Tensor(icm_features(worker.obs)), action,
                                                Tensor(icm_features(nxt)))[0])
        out.append(Transition(worker.obs, action, reward, r_int, done, float(value),
                              float(logp[action]), float(-(np.exp(logp) * logp).sum()), nxt))
        if done:
            scores.append(worker.env.state.episode_reward)
            worker.obs = worker.env.reset()
            worker.state = _zero_state(net)
        else:
            worker.obs, worker.state = nxt, state
    bootstrap = 0.0
    if not out[-1].done:
        bootstrap = float(policy_step(net, features(worker.obs), worker.state)[1])
    return Rollout(out, bootstrap, worker.worker_id, init_state, scores)


# ---------------------------------------------------------------------------
# Update
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: list[Tensor], lrs: list[float], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lrs = params, lrs
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for p, g, m, v, lr in zip(self.params, grads, self.m, self.v, self.lrs):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class RunningMean:
    """Elementwise incremental mean; ``k`` identical inputs give that input back exactly."""

    def __init__(self):
        self.k = 0
        self.value: list[np.ndarray] | None = None

    def add(self, arrays: list[np.ndarray]) -> None:
        self.k += 1
        if self.value is None:
            self.value = [np.array(a, dtype=float) for a in arrays]
            return
        for m, a in zip(self.value, arrays):
            m += (a - m) / self.k


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        k = max_norm / norm
        grads = [g * k for g in grads]
    return grads, norm


def _unique_frames(frames: list[np.ndarray]):
    slot: dict[bytes, int] = {}
    firsts, index = [], []
    for f in frames:
        j = slot.setdefault(f.tobytes(), len(slot))
        if j == len(firsts):
            firsts.append(f)
        index.append(j)
    return np.stack(firsts), np.array(index)


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    icm_loss: float
    intrinsic_mean: float
    grad_norm: float


class A2C:
    """Parameters, optimiser and the synchronous averaged-gradient update."""

    def __init__(self, net: RecurrentPolicy, cfg: TrainConfig):
        if cfg.intrinsic == "icm" and net.icm is None:
            raise ConfigError(f"intrinsic=icm needs a net with a curiosity module, not {net.arch.kind!r}")
        self.net, self.cfg = net, cfg
        self.use_icm = cfg.intrinsic == "icm"
        self.params = [p for name, p in net.named_parameters() if self.use_icm or not name.startswith("icm.")]
        names = [name for name, _ in net.named_parameters() if self.use_icm or not name.startswith("icm.")]
        lrs = [cfg.actor_lr if n.startswith("policy.") else cfg.critic_lr for n in names]
        self.opt = Adam(self.params, lrs, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    def _head_params(self) -> list[Tensor]:
        return [*self.net.lstm.parameters(), *self.net.policy.parameters(), *self.net.value.parameters()]

    def _icm_head_params(self) -> list[Tensor]:
        icm = self.net.icm
        return [*icm.fwd_in.parameters(), *icm.fwd_out.parameters(), *icm.inv_in.parameters(),
                *icm.inv_out.parameters()]

    def worker_losses(self, feats: np.ndarray, rollout: Rollout):
        """Per-worker loss on frozen trunk features; returns (loss, d loss / d feats, stats)."""
        cfg = self.cfg
        x = Tensor(feats, requires_grad=True)
        h0, c0 = (Tensor(s) for s in rollout.init_state)
        hs, _ = lstm_sequence(x, h0, c0, self.net.lstm, rollout.dones)
        logits, values = self.net.heads(hs)
        targets = td_targets(rollout.rewards, values.data, rollout.bootstrap_value, rollout.dones, cfg.gamma,
                             cfg.n_step)
        adv = targets - values.data
        a_loss, entropy = actor_loss(logits, rollout.actions, adv, cfg.entropy_coef)
        c_loss = critic_loss(values, targets)
        loss = a_loss + T.scale(c_loss, cfg.value_loss_coef)
        T.backward(loss)
        return x.grad, (a_loss.item(), c_loss.item(), float(entropy.data.mean()))

    def icm_losses(self, phi: np.ndarray, phi_next: np.ndarray, actions):
        icm = self.net.icm
        a = Tensor(phi, requires_grad=True)
        b = Tensor(phi_next, requires_grad=True)
        _, fwd, inv_logits = icm.intrinsic(a, actions, b)
        logp, _ = action_distribution(inv_logits)
        steps = len(actions)
        ce = T.scale(logp[np.arange(steps), np.asarray(actions)].sum(), -1.0 / steps)
        loss = T.scale(fwd.sum(), self.cfg.icm_fwd_weight / steps) + T.scale(ce, self.cfg.icm_inv_weight)
        T.backward(loss)
        return a.grad, b.grad, loss.item()

    def _shared_pass(self, trunk, frames, per_worker):
        """Averaged gradients for a trunk shared by every worker.

        The trunk runs once over the unique frames; each worker's loss is
        differentiated down to the trunk outputs, the per-worker gradients of
        those outputs and of the downstream parameters are averaged, and the
        averaged output gradient is pushed through the trunk once.  By
        linearity this equals averaging full per-worker gradients.
        """
        uniq, index = _unique_frames(frames)
        out = trunk(Tensor(uniq), update_stats=True)
        heads = per_worker.params
        avg = RunningMean()
        extra = []
        offset = 0
        for n, fn in per_worker.items:
            sl = index[offset:offset + n]
            offset += n
            for p in heads:
                p.zero_grad()
            cot = np.zeros_like(out.data)
            res = fn(out.data, sl, cot)
            avg.add([cot] + [p.grad.copy() for p in heads])
            extra.append(res)
        for p in self._trunk_params(trunk):
            p.zero_grad()
        T.backward((out * Tensor(avg.value[0])).sum())
        grads = {id(p): g for p, g in zip(heads, avg.value[1:])}
        for p in self._trunk_params(trunk):
            grads[id(p)] = p.grad.copy()
        return grads, extra

    @staticmethod
    def _trunk_params(trunk) -> list[Tensor]:
        owner = getattr(trunk, "__self__", trunk)
        skip = {"lstm", "policy", "value", "icm"}
        if isinstance(owner, RecurrentPolicy):
            return [p for name, p in owner.named_parameters() if name.split(".")[0] not in skip]
        return owner.parameters()

    def sync_update(self, rollouts: list[Rollout]) -> UpdateStats:
        cfg = self.cfg
        if len(rollouts) != cfg.workers or any(r is None for r in rollouts):
            raise ContractError(f"sync_update needs all {cfg.workers} rollouts, got "
                                f"{sum(r is not None for r in rollouts)}")
        frames = [tr.obs for r in rollouts for tr in r.transitions]
        stats = []

        def policy_fn(r):
            def fn(out, sl, cot):
                g, st = self.worker_losses(out[sl], r)
                np.add.at(cot, sl, g)
                return st
            return len(r), fn

        grads, stats = self._shared_pass(self.net.features, frames,
                                         _PerWorker(self._head_params(), [policy_fn(r) for r in rollouts]))
        icm_loss = 0.0
        if self.use_icm:
            icm_frames = []
            items = []
            for r in rollouts:
                icm_frames += [tr.obs for tr in r.transitions] + [tr.next_obs for tr in r.transitions]
                items.append(self._icm_item(r))
            icm_grads, icm_stats = self._shared_pass(self.net.icm.embed, icm_frames,
                                                     _PerWorker(self._icm_head_params(), items))
            grads.update(icm_grads)
            icm_loss = float(np.mean(icm_stats))
        flat, norm = clip_global_norm([grads[id(p)] for p in self.params], cfg.grad_clip)
        self.opt.step(flat)
        for p in self.net.parameters():
            p.zero_grad()
        arr = np.array(stats)
        return UpdateStats(float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[:, 2].mean()), icm_loss,
                           float(np.mean([tr.reward_int for r in rollouts for tr in r.transitions])), norm)

    def _icm_item(self, r: Rollout):
        n = len(r)

        def fn(out, sl, cot):
            ga, gb, loss = self.icm_losses(out[sl[:n]], out[sl[n:]], r.actions)
            np.add.at(cot, sl[:n], ga)
            np.add.at(cot, sl[n:], gb)
            return loss
        return 2 * n, fn


@dataclass
class _PerWorker:
    params: list[Tensor]
    items: list


# ---------------------------------------------------------------------------
# Evaluation and training loop
# ---------------------------------------------------------------------------


def evaluate(net: RecurrentPolicy, spec: MazeSpec, episodes: int, rng: np.random.Generator,
             features: FeatureCache | None = None, greedy: bool = True,
             policy_rng: np.random.Generator | None = None) -> np.ndarray:
    """Scores (total external reward) of ``episodes`` episodes from sampled start cells.

    Greedy episodes are deterministic per start cell, so each distinct start
    is played once and all starts run together as one batch.
    """
    if episodes < 1:
        raise ContractError("evaluation needs at least one episode")
    features = features or FeatureCache(net.features)
    cells = spec.start_cells()
    picks = [cells[int(rng.integers(len(cells)))] if len(cells) > 1 else cells[0] for _ in range(episodes)]
    if greedy:
        unique = sorted(set(picks))
        result = dict(zip(unique, _play_batch(net, spec, unique, features, None)))
        return np.array([result[c] for c in picks])
    return np.array(_play_batch(net, spec, picks, features, policy_rng or rng))


def _play_batch(net, spec, cells, features, rng) -> list[float]:
    envs = [MazeEnv(spec) for _ in cells]
    obs = [env.reset_to(cell) for env, cell in zip(envs, cells)]
    h = np.zeros((len(cells), net.hidden_size))
    c = np.zeros_like(h)
    scores = [0.0] * len(cells)
    live = list(range(len(cells)))
    while live:
        feats = np.stack([features(obs[i]) for i in live])
        logits, _, (h_new, c_new) = policy_step(net, feats, (h[live], c[live]))
        h[live], c[live] = h_new, c_new
        still = []
        for k, i in enumerate(live):
            a = sample_action(logits[k], rng, greedy=rng is None)
            obs[i], reward, done = envs[i].step(a)
            scores[i] += reward
            if not done:
                still.append(i)
        live = still
    return scores


def _record(cfg: TrainConfig, env_steps, updates, scores, t0, window) -> dict:
    stderr = float(scores.std(ddof=1) / np.sqrt(len(scores))) if len(scores) > 1 else 0.0
    mean = lambda k: float(np.mean([getattr(s, k) for s in window])) if window else None  # noqa: E731
    return {
        "env_steps": env_steps,
        "updates": updates,
        "mean_score": float(scores.mean()),
        "score_stderr": stderr,
        "wall_ms": round((time.perf_counter() - t0) * 1e3, 3) if cfg.record_wall_clock else None,
        "entropy": mean("entropy"),
        "value_loss": mean("value_loss"),
        "policy_loss": mean("policy_loss"),
        "intrinsic_mean": mean("intrinsic_mean"),
    }


@dataclass
class TrainResult:
    net: RecurrentPolicy
    records: list[dict]
    env_steps: int
    updates: int
    first_success: int | None  # env steps at the first evaluation reaching early_stop_score
    converged_at: int | None  # env steps when early stopping fired



def curriculum_load(checkpoint, net: RecurrentPolicy) -> RecurrentPolicy:
    """Overwrite every named tensor of ``net`` with the checkpoint's values."""
    manifest, state = read_checkpoint(checkpoint)
    if manifest["arch"].get("kind") != net.arch.kind:
        raise ConfigError(f"checkpoint holds a {manifest['arch'].get('kind')!r} net, not {net.arch.kind!r}")
    net.load_state_dict(state)
    return net


def train(cfg: TrainConfig, spec: MazeSpec, arch: ArchConfig, out_dir=None, init_checkpoint=None,
          log=None) -> TrainResult:
    """Collect, update and evaluate until ``max_steps`` or sustained success.

    Writes ``metrics.jsonl``, ``initial.ckpt`` and ``final.ckpt`` under
    ``out_dir`` when it is given.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(2 * cfg.workers + 1)
    net = build_net(arch, cfg.seed)
    if init_checkpoint is not None:
        curriculum_load(init_checkpoint, net)
    algo = A2C(net, cfg)
    workers = [Worker(w, MazeEnv(spec, int(seeds[w].generate_state(1)[0])), np.random.default_rng(seeds[cfg.workers + w]))
               for w in range(cfg.workers)]
    eval_rng = np.random.default_rng(seeds[-1])
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "initial.ckpt", net, cfg.seed)
        metrics_file = open(out / "metrics.jsonl", "w")

    records: list[dict] = []
    t0 = time.perf_counter()
    env_steps = updates = streak = 0
    first_success = converged_at = None
    stopped = False
    window: list[UpdateStats] = []

    def run_eval():
        nonlocal streak, first_success, converged_at, stopped
        scores = evaluate(net, spec, cfg.eval_episodes, eval_rng)
        rec = _record(cfg, env_steps, updates, scores, t0, window)
        window.clear()
        records.append(rec)
        if metrics_file is not None:
            metrics_file.write(json.dumps(rec) + "\n")
            metrics_file.flush()
        if log is not None:
            log(rec)
        if rec["mean_score"] >= cfg.early_stop_score:
            streak += 1
            if first_success is None:
                first_success = env_steps
            if streak >= cfg.patience:
                stopped, converged_at = True, env_steps
        else:
            streak = 0

    try:
        if cfg.max_steps > 0:
            run_eval()
        while not stopped and env_steps < cfg.max_steps:
            feats = FeatureCache(net.features)
            icm_feats = FeatureCache(net.icm.embed) if algo.use_icm else None
            rollouts = [collect_rollout(net, w, cfg.rollout_len, feats, icm_feats) for w in workers]
            env_steps += sum(len(r) for r in rollouts)
            window.append(algo.sync_update(rollouts))
            updates += 1
            if updates % cfg.eval_interval == 0 or env_steps >= cfg.max_steps:
                run_eval()
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out is not None:
        save_checkpoint(out / "final.ckpt", net, cfg.seed, {"env_steps": env_steps, "updates": updates})
    return TrainResult(net, records, env_steps, updates, first_success, converged_at)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
