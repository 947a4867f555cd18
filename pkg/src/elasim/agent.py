"""Laser-parameter agent: Gaussian policy, rewards, advantage estimation and PPO.

Actions are raw Gaussian samples squashed by tanh and mapped affinely onto
the laser parameter box, so every finite sample decodes to valid
parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import laser, nn, seeding
from .errors import ConfigError

STATE_DIM = 8
ACTION_DIM = 3
N_MAX = 10
SEGMENT = 5
LOG2 = math.log(2.0)


# ---------------------------------------------------------------------------
# state and actions


def make_state(geom, params, width, height):
    """8-vector in [0, 1]: perceived geometry then the current laser parameters."""
    size = float(max(width, height))
    v = np.array(
        [
            geom.x_center / width,
            geom.y_center / height,
            geom.a / size,
            geom.b / size,
            geom.delta / math.pi,
            params.phi / math.pi,
            (params.omega - laser.OMEGA_MIN) / (laser.OMEGA_MAX - laser.OMEGA_MIN),
            (params.wavelength - laser.LAMBDA_MIN) / (laser.LAMBDA_MAX - laser.LAMBDA_MIN),
        ]
    )
    return np.clip(v, 0.0, 1.0)


def squash(raw):
    return np.tanh(np.asarray(raw, dtype=np.float64))


def decode_action(raw):
    """Raw (..., 3) samples -> (phi, omega, wavelength) arrays inside the parameter box."""
    u = (squash(raw) + 1.0) / 2.0
    phi = np.mod(math.pi * u[..., 0], math.pi)
    omega = laser.OMEGA_MIN + (laser.OMEGA_MAX - laser.OMEGA_MIN) * u[..., 1]
    lam = laser.LAMBDA_MIN + (laser.LAMBDA_MAX - laser.LAMBDA_MIN) * u[..., 2]
    return phi, omega, lam


def to_params(raw):
    phi, omega, lam = decode_action(raw)
    return laser.LaserParams(float(phi), float(omega), float(lam))


def log_squash_jacobian(raw):
    """sum log(1 - tanh(x)^2), evaluated stably as 2 (log 2 - x - softplus(-2x))."""
    x = np.asarray(raw, dtype=np.float64)
    return np.sum(2.0 * (LOG2 - x - np.logaddexp(0.0, -2.0 * x)), axis=-1)


@dataclass
class Action:
    raw: np.ndarray
    params: laser.LaserParams


@dataclass
class Policy:
    net: nn.DenseNet  # state -> action mean
    log_std: np.ndarray
    value: nn.DenseNet  # state -> scalar value

    def policy_params(self):
        return self.net.params() + [self.log_std]

    def copy(self):
        return Policy(self.net.copy(), self.log_std.copy(), self.value.copy())


def create_policy(seed, hidden=(64, 64), log_std=-0.5):
    sizes = [STATE_DIM, *hidden, ACTION_DIM]
    acts = ["tanh"] * len(hidden) + ["identity"]
    net = nn.DenseNet.create(sizes, acts, seeding.rng(seed, "agent", "policy"))
    # small head so the initial policy is close to the box midpoint
    net.layers[-1].weight *= 0.01
    vnet = nn.DenseNet.create([STATE_DIM, *hidden, 1], acts, seeding.rng(seed, "agent", "value"))
    return Policy(net, np.full(ACTION_DIM, float(log_std)), vnet)


def action_logprob(policy, states, raw):
    """Log-density of squashed actions, including the tanh change of variables."""
    mean = nn.forward(policy.net, states)
    logp, _ = nn.gaussian_logprob_entropy(mean, policy.log_std, raw)
    return logp - log_squash_jacobian(raw)


def policy_act(policy, state, mode="sample", rng=None):
    """Choose an action for one state; returns ``(Action, logprob, value)``."""
    mean = nn.forward(policy.net, state)
    if mode == "mean":
        raw = mean.copy()
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        raw = mean + np.exp(policy.log_std) * rng.standard_normal(ACTION_DIM)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    logp, _ = nn.gaussian_logprob_entropy(mean, policy.log_std, raw)
    logp -= float(log_squash_jacobian(raw))
    value = float(nn.forward(policy.value, state)[0])
    return Action(raw, to_params(raw)), float(logp), value


def policy_act_batch(policy, states, rng=None, mode="sample"):
    """Vectorized :func:`policy_act` over rows of ``states``."""
    mean = nn.forward(policy.net, states)
    if mode == "mean":
        raw = mean.copy()
    else:
        raw = mean + np.exp(policy.log_std) * rng.standard_normal(mean.shape)
    logp, _ = nn.gaussian_logprob_entropy(mean, policy.log_std, raw)
    logp = logp - log_squash_jacobian(raw)
    values = nn.forward(policy.value, states)[:, 0]
    return raw, logp, values


# ---------------------------------------------------------------------------
# rewards


@dataclass(frozen=True)
class RewardConfig:
    r_success: float = 10.0
    alpha: float = 0.1
    c: tuple = (1.0, 1.0, 1.0)
    omega0: float = 8.0
    r_omega: float = 0.05
    r_lambda: float = 0.5
    gamma1: float = 1.0
    gamma2: float = 0.2
    lambda_min: float = laser.LAMBDA_MIN
    lambda_max: float = laser.LAMBDA_MAX

    def __post_init__(self):
        if self.r_success <= 0:
            raise ValueError("success reward must be positive")
        if self.alpha < 0 or self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("alpha and the reward weights must be non-negative")
        if not self.lambda_min < self.lambda_max:
            raise ValueError("lambda_min must be below lambda_max")

    def as_meta(self):
        return {
            "reward.r_success": repr(self.r_success),
            "reward.alpha": repr(self.alpha),
            "reward.c": ",".join(repr(float(v)) for v in self.c),
            "reward.omega0": repr(self.omega0),
            "reward.r_omega": repr(self.r_omega),
            "reward.r_lambda": repr(self.r_lambda),
            "reward.gamma1": repr(self.gamma1),
            "reward.gamma2": repr(self.gamma2),
            "reward.lambda_min": repr(self.lambda_min),
            "reward.lambda_max": repr(self.lambda_max),
        }


def _sign(x):
    return int(x > 0) - int(x < 0)


def reward_attack(true_probs, success, n_steps, cfg=RewardConfig()):
    """Success bonus, or minus the weighted mean true-class confidence, less a step penalty."""
    probs = list(np.ravel(true_probs))
    if not probs:
        raise ValueError("empty ensemble")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if success:
        return cfg.r_success - cfg.alpha * n_steps
    c = list(cfg.c)
    if len(c) < len(probs):
        c = c + [1.0] * (len(probs) - len(c))
    conf = sum(ci * p for ci, p in zip(c, probs)) / len(probs)
    return -conf - cfg.alpha * n_steps


def reward_appear(omega, wavelength, cfg=RewardConfig()):
    """Width shaping plus an in-band bonus (sign of the range product, sign(0) = 0)."""
    inside = _sign((wavelength - cfg.lambda_min) * (cfg.lambda_max - wavelength))
    return (cfg.omega0 - omega) * cfg.r_omega + inside * cfg.r_lambda


def reward_total(r_att, r_app, cfg=RewardConfig()):
    return cfg.gamma1 * r_att + cfg.gamma2 * r_app


# ---------------------------------------------------------------------------
# advantage estimation


def compute_gae(rewards, values, dones, last_value=0.0, gamma=0.99, lam=0.95):
    """Generalized advantage estimates and returns.

    ``values[t]`` is V(s_t); the value after the final step is ``last_value``
    unless that step is terminal. Plain Python arithmetic, so exact number
    types (e.g. fractions) stay exact.
    """
    n = len(rewards)
    if n == 0:
        raise ValueError("empty buffer")
    if len(values) != n or len(dones) != n:
        raise ValueError("rewards, values and dones must have equal length")
    adv = [0] * n
    nxt = 0
    for t in range(n - 1, -1, -1):
        next_value = last_value if t == n - 1 else values[t + 1]
        live = 0 if dones[t] else 1
        delta = rewards[t] + gamma * next_value * live - values[t]
        nxt = delta + gamma * lam * live * nxt
        adv[t] = nxt
    returns = [a + v for a, v in zip(adv, values)]
    return adv, returns


def normalize_advantages(adv):
    a = np.asarray(adv, dtype=np.float64)
    if len(a) < 2:
        return a - a.mean()
    return (a - a.mean()) / (a.std() + 1e-8)


@dataclass
class RolloutBuffer:
    states: list = field(default_factory=list)
    raw: list = field(default_factory=list)
    logprobs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    advantages: np.ndarray = None
    returns: np.ndarray = None

    def add(self, state, raw, logprob, value, reward, done):
        self.states.append(np.asarray(state, dtype=np.float64))
        self.raw.append(np.asarray(raw, dtype=np.float64))
        self.logprobs.append(float(logprob))
        self.values.append(float(value))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))

    def __len__(self):
        return len(self.rewards)

    def finish(self, gamma=0.99, lam=0.95):
        adv, ret = compute_gae(self.rewards, self.values, self.dones, 0.0, gamma, lam)
        self.advantages = np.array(adv, dtype=np.float64)
        self.returns = np.array(ret, dtype=np.float64)
        return self


def merge_buffers(buffers):
    """Concatenate finished segment buffers in order into flat arrays."""
    states = np.array([s for b in buffers for s in b.states])
    raw = np.array([a for b in buffers for a in b.raw])
    logp = np.array([x for b in buffers for x in b.logprobs])
    adv = np.concatenate([b.advantages for b in buffers])
    ret = np.concatenate([b.returns for b in buffers])
    return states, raw, logp, adv, ret


# ---------------------------------------------------------------------------
# PPO


@dataclass
class PPOConfig:
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    ratio_limit: float = 1e3


def clipped_objective(ratio, adv, eps):
    """Per-sample min(r A, clip(r, 1 - eps, 1 + eps) A)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def ppo_losses(policy, states, raw, old_logp, adv, returns, cfg, with_grad=True):
    """PPO loss terms and (optionally) gradients for the policy and value nets."""
    n = len(states)
    mean, pcache = nn.forward(policy.net, states, return_cache=True)
    std = np.exp(policy.log_std)
    logp_g, entropy = nn.gaussian_logprob_entropy(mean, policy.log_std, raw)
    logp = logp_g - log_squash_jacobian(raw)
    ratio = np.exp(logp - old_logp)
    obj = clipped_objective(ratio, adv, cfg.clip)
    policy_loss = -float(np.mean(obj))
    values, vcache = nn.forward(policy.value, states, return_cache=True)
    verr = values[:, 0] - returns
    value_loss = float(np.mean(verr * verr))
    ent = float(entropy)
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * ent
    clipped = np.abs(ratio - 1.0) > cfg.clip
    diag = dict(
        policy_loss=policy_loss,
        value_loss=value_loss,
        entropy=ent,
        total=total,
        ratio_mean=float(ratio.mean()),
        ratio_min=float(ratio.min()),
        ratio_max=float(ratio.max()),
        clip_fraction=float(np.mean(clipped)),
    )
    if not with_grad:
        return diag, None
    # d obj / d ratio: A where the unclipped branch is active, 0 where the clip binds
    active = ratio * adv <= np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
    g_logp = -(adv * ratio * active) / n
    z = (raw - mean) / std
    g_mean = g_logp[:, None] * z / std
    g_logstd = np.sum(g_logp[:, None] * (z * z - 1.0), axis=0) - cfg.entropy_coef * np.ones_like(policy.log_std)
    pgrads, _ = nn.backward(policy.net, states, g_mean, pcache)
    g_v = (cfg.value_coef * 2.0 / n) * verr[:, None]
    vgrads, _ = nn.backward(policy.value, states, g_v, vcache)
    return diag, (pgrads + [g_logstd], vgrads)


@dataclass
class OptimPair:
    policy: nn.OptimState
    value: nn.OptimState


def make_optim(policy, lr=3e-4):
    return OptimPair(
        nn.OptimState.for_params(policy.policy_params(), lr=lr),
        nn.OptimState.for_params(policy.value.params(), lr=lr),
    )


def ppo_update(policy, optim, states, raw, old_logp, adv, returns, cfg=None, rng=None, normalize=True):
    """Clipped-surrogate PPO over shuffled minibatches.

    Returns per-epoch diagnostics. If any probability ratio exceeds
    ``cfg.ratio_limit`` the update is abandoned, the parameters are restored
    and the diagnostics carry ``aborted=True``.
    """
    cfg = cfg or PPOConfig()
    rng = rng or np.random.default_rng(0)
    if normalize:
        adv = normalize_advantages(adv)
    n = len(states)
    snapshot = policy.copy()
    opt_snapshot = _copy_optim(optim)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        rows = []
        for start in range(0, n, cfg.minibatch):
            idx = perm[start : start + cfg.minibatch]
            diag, (pg, vg) = ppo_losses(policy, states[idx], raw[idx], old_logp[idx], adv[idx], returns[idx], cfg)
            if not (diag["ratio_max"] <= cfg.ratio_limit and np.isfinite(diag["total"])):
                _restore(policy, snapshot)
                _restore_optim(optim, opt_snapshot)
                diag.update(epoch=epoch, aborted=True)
                history.append(diag)
                return history
            pg, _ = nn.clip_grad_norm(pg, cfg.max_grad_norm)
            vg, _ = nn.clip_grad_norm(vg, cfg.max_grad_norm)
            nn.optimizer_step(policy.policy_params(), pg, optim.policy)
            nn.optimizer_step(policy.value.params(), vg, optim.value)
            rows.append(diag)
        summary = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
        summary["ratio_max"] = max(r["ratio_max"] for r in rows)
        summary["ratio_min"] = min(r["ratio_min"] for r in rows)
        summary.update(epoch=epoch, aborted=False)
        history.append(summary)
    return history


def _restore(policy, snapshot):
    for dst, src in zip(policy.policy_params() + policy.value.params(), snapshot.policy_params() + snapshot.value.params()):
        dst[...] = src


def _copy_optim(optim):
    def cp(s):
        return nn.OptimState([m.copy() for m in s.m], [v.copy() for v in s.v], s.step, s.lr, s.beta1, s.beta2, s.eps)

    return OptimPair(cp(optim.policy), cp(optim.value))


def _restore_optim(optim, snap):
    for dst, src in ((optim.policy, snap.policy), (optim.value, snap.value)):
        for a, b in zip(dst.m + dst.v, src.m + src.v):
            a[...] = b
        dst.step = src.step


# ---------------------------------------------------------------------------
# training


@dataclass
class AgentConfig:
    epochs: int = 100
    segments_per_epoch: int = 32
    n_max: int = N_MAX
    segment_length: int = SEGMENT
    hidden: tuple = (64, 64)
    init_log_std: float = -0.5
    beta: float = laser.DEFAULT_BETA
    rule: str = "ALL"
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)


@dataclass
class TrainingCurves:
    epoch: list = field(default_factory=list)
    mean_reward: list = field(default_factory=list)
    mean_steps: list = field(default_factory=list)
    train_asr: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    def rows(self):
        return list(zip(self.epoch, self.mean_reward, self.mean_steps, self.train_asr))


def random_initial_params(rng):
    return laser.random_params(rng)


def train_agent(targets, surrogates, cfg=None, seed=0, log=None):
    """PPO over randomly sampled five-frame segments of ``targets``.

    ``targets`` is a list of routes, each a list of FrameTarget objects in
    frame order. Segments start at random frames; laser parameters carry
    over from one frame to the next inside a segment, with random
    parameters for the first frame. All segments of an epoch are rolled out
    in lockstep against one policy snapshot.
    """
    from . import attack  # decision-loop evaluation lives with attack orchestration

    cfg = cfg or AgentConfig()
    if not targets or not surrogates:
        raise ConfigError("training needs frame targets and at least one surrogate")
    seg_len = cfg.segment_length
    starts = [(r, t) for r, route in enumerate(targets) for t in range(len(route) - seg_len + 1)]
    if not starts:
        raise ConfigError("no route is long enough for one segment")
    policy = create_policy(seed, cfg.hidden, cfg.init_log_std)
    optim = make_optim(policy, cfg.ppo.lr)
    rng = seeding.rng(seed, "agent", "rollout")
    upd_rng = seeding.rng(seed, "agent", "update")
    curves = TrainingCurves()
    width, height = targets[0][0].frame_size
    for epoch in range(cfg.epochs):
        picks = rng.integers(0, len(starts), cfg.segments_per_epoch)
        segs = [starts[k] for k in picks]
        buffers, stats = rollout(policy, segs, targets, surrogates, cfg, rng, width, height, attack)
        for b in buffers:
            b.finish(cfg.ppo.gamma, cfg.ppo.gae_lambda)
        states, raw, logp, adv, ret = merge_buffers(buffers)
        diag = ppo_update(policy, optim, states, raw, logp, adv, ret, cfg.ppo, upd_rng)
        curves.epoch.append(epoch)
        curves.mean_reward.append(stats["mean_reward"])
        curves.mean_steps.append(stats["mean_steps"])
        curves.train_asr.append(stats["asr"])
        curves.diagnostics.append(diag[-1])
        if log is not None:
            log(epoch, stats, diag[-1])
    return policy, curves


def rollout(policy, segs, targets, surrogates, cfg, rng, width, height, attack):
    """Collect one buffer per segment with lockstep batched policy evaluation."""
    n = len(segs)
    buffers = [RolloutBuffer() for _ in range(n)]
    frame_k = [0] * n  # frame offset inside the segment
    step_k = [0] * n  # decision steps taken in the current frame
    params = [random_initial_params(rng) for _ in range(n)]
    active = list(range(n))
    frames_done, frames_won, step_counts, rewards = 0, 0, [], []
    while active:
        tgts = [targets[segs[e][0]][segs[e][1] + frame_k[e]] for e in active]
        states = np.array(
            [make_state(t.geometry, params[e], width, height) for e, t in zip(active, tgts)]
        )
        raw, logp, values = policy_act_batch(policy, states, rng)
        phi, omega, lam = decode_action(raw)
        still = []
        for k, e in enumerate(active):
            tgt = tgts[k]
            step_k[e] += 1
            if tgt.skipped:
                probs, success = np.ones(len(surrogates)), False
            else:
                p, _, ok = attack.score_params(tgt, surrogates, phi[k : k + 1], omega[k : k + 1], lam[k : k + 1], cfg.beta, cfg.rule)
                probs, success = p[0], bool(ok[0])
            r_att = reward_attack(probs, success, step_k[e], cfg.reward)
            r_app = reward_appear(omega[k], lam[k], cfg.reward)
            reward = reward_total(r_att, r_app, cfg.reward)
            rewards.append(reward)
            params[e] = laser.LaserParams(float(phi[k]), float(omega[k]), float(lam[k]))
            frame_over = success or step_k[e] >= cfg.n_max
            last_frame = frame_k[e] == cfg.segment_length - 1
            done = frame_over and last_frame
            buffers[e].add(states[k], raw[k], logp[k], values[k], reward, done)
            if frame_over:
                frames_done += 1
                frames_won += int(success)
                step_counts.append(step_k[e])
                step_k[e] = 0
                frame_k[e] += 1
            if not done:
                still.append(e)
        active = still
    stats = dict(
        mean_reward=float(np.mean(rewards)),
        mean_steps=float(np.mean(step_counts)),
        asr=frames_won / max(frames_done, 1),
    )
    return buffers, stats


# ---------------------------------------------------------------------------
# checkpoints


def save_policy(path_policy, path_value, policy, reward_cfg=RewardConfig(), extra=None):
    meta = {"kind": "policy", "log_std": nn.floats_to_text(policy.log_std)}
    meta.update(reward_cfg.as_meta())
    meta.update(
        {
            "norm.omega": f"{laser.OMEGA_MIN!r},{laser.OMEGA_MAX!r}",
            "norm.lambda": f"{laser.LAMBDA_MIN!r},{laser.LAMBDA_MAX!r}",
        }
    )
    meta.update(extra or {})
    nn.save(path_policy, policy.net, meta)
    nn.save(path_value, policy.value, {"kind": "value"})


def load_policy(path_policy, path_value):
    net, meta = nn.load(path_policy)
    if meta.get("kind") != "policy":
        raise ValueError(f"{path_policy} is not a policy checkpoint")
    vnet, vmeta = nn.load(path_value)
    if vmeta.get("kind") != "value":
        raise ValueError(f"{path_value} is not a value checkpoint")
    return Policy(net, nn.text_to_floats(meta["log_std"]), vnet)
