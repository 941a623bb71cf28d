"""Tabular actor-critic training with robust targets and ensemble reweighting.

One update of :func:`rapo_train`:

1. roll out the softmax policy under the nominal kernel;
2. for every transition sample ``m`` successors from the ensemble under the
   current mixture ``w`` and read the critic there;
3. turn those values into KL-robust targets ``y`` (AdvNet-projected
   temperature, or a short bisection when AdvNet is off);
4. PPO step on actor and critic, with GAE over ``delta_t = y_t - V(s_t)``;
5. reweight the ensemble from the prior against the updated critic.

:func:`ppo_train` is the plain baseline: the same loop without any adversary.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .advnet import (
    ETA_HI,
    ETA_LO,
    AdamState,
    AdvNetConfig,
    AdvNetParams,
    TargetBatch,
    advnet_forward,
    advnet_update,
    encode_features,
    project_eta_to_budget,
    robust_dual_value,
    robust_targets,
)
from .boltzmann import MixtureWeights, score_models, solve_beta
from .ensemble import EnsembleSpec, build_ensemble, sample_next_states
from .exceptions import ConfigError, DomainError, NumericalFailure
from .kl_dual import DEGENERATE, DualConfig, solve_eta_batch
from .mdp import TabularMdp
from .robust_mdp import nominal_policy_evaluation


@dataclass(frozen=True)
class TrainConfig:
    updates: int = 200
    rollout_length: int = 512
    episode_horizon: int = 64
    epsilon: float = 0.05
    kappa: float = 0.5
    m: int = 8
    gamma: float = 0.95
    gae_lambda: float = 0.9
    clip: float = 0.2
    actor_lr: float = 0.2
    critic_lr: float = 0.5
    advnet_lr: float = 1e-2
    advnet_steps: int = 5
    lambda_kl: float = 1.0
    sup_weight: float = 1.0
    state_only_features: bool = False
    epochs: int = 4
    minibatches: int = 4
    entropy_coef: float = 0.0
    normalize_advantages: bool = True
    use_advnet: bool = True
    use_reweighting: bool = True
    bisection_iters: int = 8
    chain_from_previous: bool = False
    beta_max: float = 1e6
    exploring_starts: bool = False
    score_batch: int = 256
    ema_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        if self.epsilon < 0 or self.kappa < 0:
            raise ConfigError("epsilon and kappa must be >= 0")
        if not 0 < self.clip < 1:
            raise ConfigError("clip must lie in (0, 1)")
        if self.m < 1 or self.rollout_length < 1 or self.minibatches < 1:
            raise ConfigError("m, rollout_length and minibatches must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def start_distribution(mdp: TabularMdp, cfg: TrainConfig) -> np.ndarray:
    """Reset law for training rollouts: uniform over non-terminal states with
    ``exploring_starts``, otherwise the MDP's own initial distribution."""
    if not cfg.exploring_starts:
        return mdp.initial_dist
    live = (~mdp.terminal).astype(float)
    return live / live.sum()


def ablation_config(cfg: TrainConfig, use_advnet: bool, use_reweighting: bool) -> TrainConfig:
    return replace(cfg, use_advnet=use_advnet, use_reweighting=use_reweighting)


# --------------------------------------------------------------------------
# policy and rollouts


@dataclass
class SoftmaxPolicy:
    logits: np.ndarray
    critic: np.ndarray

    @classmethod
    def zeros(cls, n_states: int, n_actions: int) -> SoftmaxPolicy:
        return cls(np.zeros((n_states, n_actions)), np.zeros(n_states))

    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def log_probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def copy(self) -> SoftmaxPolicy:
        return SoftmaxPolicy(self.logits.copy(), self.critic.copy())


@dataclass
class RolloutBuffer:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    done_flags: np.ndarray
    log_probs: np.ndarray
    value_estimates: np.ndarray
    next_states: np.ndarray
    last_value: float = 0.0

    def __len__(self) -> int:
        return self.states.size

    def __post_init__(self):
        n = self.states.size
        for name in ("actions", "rewards", "done_flags", "log_probs", "value_estimates",
                     "next_states"):
            if getattr(self, name).size != n:
                raise DomainError(f"rollout field {name} has the wrong length")
        if not np.all(np.isfinite(self.log_probs)):
            raise NumericalFailure("non-finite log-probabilities in rollout")


def _sample_index(cdf_row, u):
    return min(int(np.searchsorted(cdf_row, u, side="right")), cdf_row.size - 1)


def collect_rollout(mdp: TabularMdp, policy: SoftmaxPolicy, length: int, rng,
                    horizon: int = 64, start_dist=None) -> RolloutBuffer:
    """Sample ``length`` transitions under the nominal kernel with resets.

    An episode ends on entering a terminal state or after ``horizon`` steps;
    either sets the done flag and restarts from ``start_dist`` (the MDP's
    initial distribution by default).
    """
    probs = policy.probs()
    logp = policy.log_probs()
    pi_cdf = np.cumsum(probs, axis=1)
    k_cdf = np.cumsum(mdp.kernel, axis=2)
    mu_cdf = np.cumsum(mdp.initial_dist if start_dist is None else start_dist)
    u = rng.random((length, 3))
    states = np.zeros(length, int)
    actions = np.zeros(length, int)
    nexts = np.zeros(length, int)
    dones = np.zeros(length)
    s = _sample_index(mu_cdf, rng.random()) if length else 0
    t_ep = 0
    for t in range(length):
        a = _sample_index(pi_cdf[s], u[t, 0])
        s2 = _sample_index(k_cdf[s, a], u[t, 1])
        t_ep += 1
        done = bool(mdp.terminal[s2]) or t_ep >= horizon
        states[t], actions[t], nexts[t], dones[t] = s, a, s2, float(done)
        if done:
            s = _sample_index(mu_cdf, u[t, 2])
            t_ep = 0
        else:
            s = s2
    rewards = mdp.rewards[states, actions]
    last = 0.0 if length == 0 or dones[-1] else float(policy.critic[nexts[-1]])
    return RolloutBuffer(states, actions, rewards, dones, logp[states, actions],
                         policy.critic[states].copy(), nexts, last)


def gae(rewards, values, next_value, done_flags, gamma: float, lam: float):
    """Generalised advantage estimation with done masking.

    ``rewards`` here are one-step targets minus the discounted bootstrap,
    i.e. callers pass ``delta_t + V(s_t)`` style inputs through
    :func:`gae_from_deltas`; this classic form uses
    ``delta_t = r_t + gamma (1 - d_t) V(s_{t+1}) - V(s_t)``.
    """
    r = np.asarray(rewards, float)
    v = np.asarray(values, float)
    d = np.asarray(done_flags, float)
    v_next = np.append(v[1:], next_value)
    deltas = r + gamma * (1 - d) * v_next - v
    return gae_from_deltas(deltas, v, d, gamma, lam)


def gae_from_deltas(deltas, values, done_flags, gamma: float, lam: float):
    deltas = np.asarray(deltas, float)
    d = np.asarray(done_flags, float)
    adv = np.zeros_like(deltas)
    running = 0.0
    for t in range(deltas.size - 1, -1, -1):
        running = deltas[t] + gamma * lam * (1 - d[t]) * running
        adv[t] = running
    return adv, adv + np.asarray(values, float)


# --------------------------------------------------------------------------
# PPO


@dataclass
class PpoStats:
    actor_loss: float
    critic_loss: float
    clip_frac: float
    entropy: float


def _surrogate_grad(logits_rows, actions, old_logp, adv, clip, entropy_coef):
    """Loss and d loss / d logits for a minibatch of tabular softmax rows."""
    z = logits_rows - logits_rows.max(axis=1, keepdims=True)
    logp_all = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp_all)
    n = actions.size
    idx = np.arange(n)
    ratio = np.exp(logp_all[idx, actions] - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip, 1 + clip) * adv
    loss = -np.mean(np.minimum(unclipped, clipped))
    # the min picks the clipped branch (zero gradient) only when clipping binds
    active = ~(((adv > 0) & (ratio > 1 + clip)) | ((adv < 0) & (ratio < 1 - clip)))
    onehot = np.zeros_like(p)
    onehot[idx, actions] = 1.0
    coef = np.where(active, ratio * adv, 0.0)[:, None]
    grad = -coef * (onehot - p) / n
    ent = -np.sum(p * logp_all, axis=1)
    if entropy_coef:
        loss -= entropy_coef * ent.mean()
        # d H / d z_b = -p_b (log p_b + H)
        grad -= entropy_coef * (-p * (logp_all + ent[:, None])) / n
    frac = float(np.mean(~active))
    return loss, grad, frac, float(ent.mean())


def _ppo_epochs(policy, buffer, adv, ret, clip, epochs, minibatches, lr, critic_lr, rng,
                entropy_coef, logs):
    a_losses, c_losses, fracs, ents = logs
    n = len(buffer)
    for _ in range(epochs):
        order = rng.permutation(n)
        for mb in np.array_split(order, minibatches):
            if mb.size == 0:
                continue
            s, a = buffer.states[mb], buffer.actions[mb]
            loss, g, frac, ent = _surrogate_grad(policy.logits[s], a, buffer.log_probs[mb],
                                                 adv[mb], clip, entropy_coef)
            err = policy.critic[s] - ret[mb]
            c_loss = 0.5 * float(np.mean(err ** 2))
            np.add.at(policy.logits, s, -lr * g)
            np.add.at(policy.critic, s, -critic_lr * err / mb.size)
            a_losses.append(loss)
            c_losses.append(c_loss)
            fracs.append(frac)
            ents.append(ent)


def ppo_update(policy: SoftmaxPolicy, buffer: RolloutBuffer, advantages, returns, clip: float,
               epochs: int, minibatches: int, lr: float, rng, critic_lr: float | None = None,
               entropy_coef: float = 0.0) -> tuple[SoftmaxPolicy, PpoStats]:
    """Clipped-surrogate steps on the logits, squared-error steps on the critic table."""
    policy = policy.copy()
    critic_lr = lr if critic_lr is None else critic_lr
    adv = np.asarray(advantages, float)
    ret = np.asarray(returns, float)
    a_losses, c_losses, fracs, ents = [], [], [], []
    with np.errstate(over="ignore", invalid="ignore"):
        _ppo_epochs(policy, buffer, adv, ret, clip, epochs, minibatches, lr, critic_lr, rng,
                    entropy_coef, (a_losses, c_losses, fracs, ents))
    if not a_losses:
        return policy, PpoStats(0.0, 0.0, 0.0, 0.0)
    return policy, PpoStats(float(np.mean(a_losses)), float(np.mean(c_losses)),
                            float(np.mean(fracs)), float(np.mean(ents)))


# --------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    policy: SoftmaxPolicy
    advnet: AdvNetParams | None
    mixture_history: list
    metrics: list
    snapshots: list = field(default_factory=list)
    scored_pairs: list = field(default_factory=list)

    @property
    def critic(self) -> np.ndarray:
        return self.policy.critic


def make_rng(seed) -> np.random.Generator:
    """Philox (counter-based) generator; every seeded entry point uses it."""
    return np.random.Generator(np.random.Philox(seed))


def _streams(seed: int):
    # rollouts, target sampling, minibatch order, AdvNet init
    return [make_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def _check_finite(record: dict, policy: SoftmaxPolicy, update: int):
    bad = [k for k, v in record.items() if isinstance(v, float) and not math.isfinite(v)]
    if bad or not (np.all(np.isfinite(policy.logits)) and np.all(np.isfinite(policy.critic))):
        raise NumericalFailure(
            f"non-finite values at update {update}: {bad or ['policy parameters']}",
            dump={"update": update, "metrics": record,
                  "logits_finite": bool(np.all(np.isfinite(policy.logits))),
                  "critic_finite": bool(np.all(np.isfinite(policy.critic)))})


def _bisection_targets(next_values, epsilon, iters):
    """Short fixed-budget bisection on log eta (the AdvNet-free ablation)."""
    base = np.full(next_values.shape, 1.0 / next_values.shape[1])
    cfg = DualConfig(epsilon=epsilon, eta_min=ETA_LO, eta_max=ETA_HI, tol_kl=1e-12,
                     max_iter=max(iters, 1))
    sol = solve_eta_batch(next_values, base, cfg)
    # constant rows: the ball is a point, the value is exact
    value = np.where(sol.status == DEGENERATE, next_values.mean(axis=1), sol.dual_value)
    return value, sol.eta, sol.kl


def rapo_train(mdp: TabularMdp, ensemble: EnsembleSpec, cfg: TrainConfig,
               snapshot_every: int = 0, log_path=None) -> TrainResult:
    rng_roll, rng_target, rng_ppo, rng_net = _streams(cfg.seed)
    policy = SoftmaxPolicy.zeros(mdp.n_states, mdp.n_actions)
    start = start_distribution(mdp, cfg)
    prior = MixtureWeights(ensemble.prior.copy(), 0.0)
    w = prior
    d_feat = mdp.n_states + (0 if cfg.state_only_features else mdp.n_actions)
    net = AdvNetParams.init(d_feat, rng_net) if cfg.use_advnet else None
    adam = AdamState.like(net) if cfg.use_advnet else None
    net_cfg = AdvNetConfig(epsilon=cfg.epsilon, gamma=cfg.gamma, lambda_kl=cfg.lambda_kl,
                           sup_weight=cfg.sup_weight)
    history, metrics, snapshots, scored = [w], [], [], []
    scores = None
    log = open(log_path, "w", newline="\n") if log_path else None
    if snapshot_every:
        snapshots.append((0, policy.copy()))
    try:
        for u in range(1, cfg.updates + 1):
            buf = collect_rollout(mdp, policy, cfg.rollout_length, rng_roll, cfg.episode_horizon,
                              start)
            nxt = sample_next_states(ensemble, w, buf.states, buf.actions, cfg.m, rng_target)
            vn = policy.critic[nxt]
            eta_mean = kl_mean = 0.0
            if cfg.use_advnet:
                feats = encode_features(buf.states, buf.actions, mdp.n_states, mdp.n_actions,
                                        cfg.state_only_features)
                batch = TargetBatch(buf.rewards, buf.done_flags, vn, feats)
                net, adam, _ = advnet_update(net, batch, net_cfg, cfg.advnet_steps,
                                             cfg.advnet_lr, adam)
                eta_pred = advnet_forward(net, feats)
                proj = project_eta_to_budget(vn, eta_pred, cfg.epsilon)
                eta = np.where(proj.status == DEGENERATE, ETA_HI, proj.eta)
                v_rob = robust_dual_value(vn, eta, cfg.epsilon)
                const = proj.status == DEGENERATE
                # constant rows: the ball is a point, the value is exact
                v_rob = np.where(const, vn.mean(axis=1), v_rob)
                eta_mean, kl_mean = float(eta.mean()), float(proj.kl.mean())
            else:
                v_rob, eta, kl = _bisection_targets(vn, cfg.epsilon, cfg.bisection_iters)
                if cfg.epsilon > 0:
                    eta_mean, kl_mean = float(eta.mean()), float(kl.mean())
            y = robust_targets(buf.rewards, buf.done_flags, cfg.gamma, v_rob)
            adv, ret = gae_from_deltas(y - buf.value_estimates, buf.value_estimates,
                                       buf.done_flags, cfg.gamma, cfg.gae_lambda)
            if cfg.normalize_advantages and adv.size > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            policy, st = ppo_update(policy, buf, adv, ret, cfg.clip, cfg.epochs,
                                    cfg.minibatches, cfg.actor_lr, rng_ppo, cfg.critic_lr,
                                    cfg.entropy_coef)
            _check_finite({"actor_loss": st.actor_loss, "critic_loss": st.critic_loss}, policy, u)
            if cfg.use_reweighting and cfg.kappa > 0:
                pick = buf.states.size if cfg.score_batch <= 0 else min(cfg.score_batch, buf.states.size)
                scores = score_models(policy.critic, ensemble, buf.states[:pick],
                                      buf.actions[:pick], previous=scores,
                                      ema_decay=cfg.ema_decay)
                scored.append((buf.states[:pick].copy(), buf.actions[:pick].copy()))
                anchor = w.weights if cfg.chain_from_previous else ensemble.prior
                w = solve_beta(anchor, scores.scores, cfg.kappa, beta_max=cfg.beta_max)
            history.append(w)
            record = {
                "update": u,
                "actor_loss": st.actor_loss,
                "critic_loss": st.critic_loss,
                "clip_frac": st.clip_frac,
                "entropy": st.entropy,
                "eta_mean": eta_mean,
                "kl_mean": kl_mean,
                "target_mean": float(y.mean()),
                "w_entropy": w.entropy,
                "w_kl": float(w.kl_to_prior),
                "episode_return": float(buf.rewards.sum() / max(buf.done_flags.sum(), 1.0)),
            }
            _check_finite(record, policy, u)
            metrics.append(record)
            if log:
                log.write(json.dumps(record) + "\n")
            if snapshot_every and u % snapshot_every == 0:
                snapshots.append((u, policy.copy()))
    finally:
        if log:
            log.close()
    return TrainResult(policy, net, history, metrics, snapshots, scored)


def ablation_variant(mdp: TabularMdp, ensemble: EnsembleSpec, cfg: TrainConfig,
                     use_advnet: bool = True, use_reweighting: bool = True, **kw) -> TrainResult:
    return rapo_train(mdp, ensemble, ablation_config(cfg, use_advnet, use_reweighting), **kw)


def ppo_train(mdp: TabularMdp, cfg: TrainConfig, ensemble: EnsembleSpec | None = None,
              target: str = "sampled", snapshot_every: int = 0) -> TrainResult:
    """Plain PPO: no KL ball, no reweighting.

    ``target="sampled"`` bootstraps from the mean critic over ``cfg.m``
    successors drawn from the ensemble's prior mixture (the nominal kernel
    when no ensemble is given); ``"realized"`` uses the observed next state.
    """
    if target not in ("sampled", "realized"):
        raise ConfigError("target must be 'sampled' or 'realized'")
    rng_roll, rng_target, rng_ppo, _ = _streams(cfg.seed)
    if ensemble is None:
        ensemble = EnsembleSpec((mdp.kernel,), [1.0], None)
    policy = SoftmaxPolicy.zeros(mdp.n_states, mdp.n_actions)
    start = start_distribution(mdp, cfg)
    metrics, snapshots = [], []
    if snapshot_every:
        snapshots.append((0, policy.copy()))
    for u in range(1, cfg.updates + 1):
        buf = collect_rollout(mdp, policy, cfg.rollout_length, rng_roll, cfg.episode_horizon,
                              start)
        if target == "sampled":
            nxt = sample_next_states(ensemble, ensemble.prior, buf.states, buf.actions, cfg.m,
                                     rng_target)
            boot = policy.critic[nxt].mean(axis=1)
        else:
            boot = policy.critic[buf.next_states]
        deltas = buf.rewards + cfg.gamma * (1 - buf.done_flags) * boot - buf.value_estimates
        adv, ret = gae_from_deltas(deltas, buf.value_estimates, buf.done_flags, cfg.gamma,
                                   cfg.gae_lambda)
        if cfg.normalize_advantages and adv.size > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        policy, st = ppo_update(policy, buf, adv, ret, cfg.clip, cfg.epochs, cfg.minibatches,
                                cfg.actor_lr, rng_ppo, cfg.critic_lr, cfg.entropy_coef)
        record = {"update": u, "actor_loss": st.actor_loss, "critic_loss": st.critic_loss,
                  "clip_frac": st.clip_frac, "entropy": st.entropy}
        _check_finite(record, policy, u)
        metrics.append(record)
        if snapshot_every and u % snapshot_every == 0:
            snapshots.append((u, policy.copy()))
    return TrainResult(policy, None, [], metrics, snapshots)


# --------------------------------------------------------------------------
# evaluation


def model_returns(mdp: TabularMdp, policy_probs, kernels) -> np.ndarray:
    """Exact ``J = mu0 . V`` of a policy under each kernel."""
    return np.array([mdp.initial_dist @ nominal_policy_evaluation(k, mdp.rewards, policy_probs,
                                                                  mdp.gamma)
                     for k in kernels])


def worst_case_return(mdp: TabularMdp, policy_probs, ensemble: EnsembleSpec) -> float:
    return float(model_returns(mdp, policy_probs, ensemble.models).min())


@dataclass
class SweepTable:
    scale: np.ndarray
    mean: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray

    def rows(self):
        return list(zip(self.scale.tolist(), self.mean.tolist(), self.ci_low.tolist(),
                        self.ci_high.tolist()))


def robustness_sweep(policy_probs, mdp: TabularMdp, scales, perturb=None) -> SweepTable:
    """Exact return per perturbed kernel. With exact evaluation the interval is a point."""
    scales = np.asarray(scales, float).ravel()
    if scales.size == 0:
        empty = np.zeros(0)
        return SweepTable(empty, empty, empty, empty)
    ens = build_ensemble(mdp, scales, perturb or mdp.family)
    ret = model_returns(mdp, policy_probs, ens.models)
    return SweepTable(scales, ret, ret.copy(), ret.copy())


@dataclass
class Heatmap:
    updates: np.ndarray
    scales: np.ndarray
    values: np.ndarray  # (U, n_scales)

    @property
    def argmax(self) -> np.ndarray:
        return np.argmax(self.values, axis=1)

    @property
    def floor(self) -> np.ndarray:
        return self.values.min(axis=1)

    def rows(self):
        out = []
        am = self.argmax
        for i, u in enumerate(self.updates):
            for j, s in enumerate(self.scales):
                out.append((int(u), float(s), float(self.values[i, j]), int(j == am[i])))
        return out


def value_heatmap(critics, policies, mdp: TabularMdp, scales, probe_states, probe_actions=None,
                  updates=None, perturb=None) -> Heatmap:
    """``V_u(alpha) = mean_b [ r(s_b, a_b) + gamma sum_s' p_alpha(s'|s_b, a_b) V_u(s') ]``.

    ``probe_actions`` fixes the actions; when omitted each snapshot's policy
    supplies them as an expectation over its action probabilities.
    """
    scales = np.asarray(scales, float).ravel()
    kernels = build_ensemble(mdp, scales, perturb or mdp.family).stacked
    s = np.asarray(probe_states, int)
    vals = np.zeros((len(critics), scales.size))
    for i, (v, pi) in enumerate(zip(critics, policies)):
        v = np.asarray(v, float)
        for j in range(scales.size):
            q = mdp.rewards + mdp.gamma * (kernels[j] @ v)
            if probe_actions is not None:
                vals[i, j] = float(np.mean(q[s, np.asarray(probe_actions, int)]))
            else:
                vals[i, j] = float(np.mean(np.sum(np.asarray(pi)[s] * q[s], axis=1)))
    ups = np.arange(len(critics)) if updates is None else np.asarray(updates)
    return Heatmap(ups, scales, vals)


def write_metrics(metrics, path) -> None:
    with open(path, "w", newline="\n") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec) + "\n")


def save_policy(policy: SoftmaxPolicy, path) -> None:
    Path(path).write_text(json.dumps({"logits": policy.logits.tolist(),
                                      "critic": policy.critic.tolist()}))
