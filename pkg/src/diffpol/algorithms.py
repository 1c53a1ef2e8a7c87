"""Offline policy-improvement regimes and the guided training loop.

Each training step runs policy evaluation then policy improvement:

    critic   td3bc/crr: squared TD error with a next action drawn from the
             policy (ODE sampler by default);
             iql: expectile value regression, then Q regression onto
             r + gamma * V(s')
    policy   gradient of  L_diff + lambda * L_algo, where L_algo is

        td3bc  -E[Q(s, a0_hat)] / mean|Q|   (one critic picked per step,
               normalizer detached)
        crr    E[f(A) * ||a - a0_hat||^2],  f = exp(A / temp),
               A = min-Q(s,a) - mean_i min-Q(s, a0_hat + sigma * xi_i)
        iql    same regression with f = exp((min-Q_target(s,a) - V(s)) / temp)

    a0_hat is the one-evaluation action approximation, so the policy update
    never runs the sampling chain. The two gradients are computed separately
    and combined as g_diff + lambda * g_algo, which keeps the composition
    exact and makes lambda = 0 literally behavior cloning.

The weighted losses also come in an evidence-bound flavor that reweights the
noise-prediction error by beta^k / (2 alpha^k (1 - alpha_bar^{k-1})) instead
of regressing actions directly; k is then drawn from {2..K} because the
coefficient is singular at k = 1.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tape
from .critic import (DoubleQ, ValueFunction, critic_value, iql_q_loss,
                     iql_value_loss, min_q, td_loss)
from .envdata import OfflineDataset
from .errors import NumericError, ParameterError, ShapeError
from .nn import (AdamState, adam_step, clip_grad_norm, global_norm,
                 init_noise_net, load_checkpoint, mlp_tape_forward,
                 param_leaves, polyak_update, quantize, save_checkpoint)
from .policy import (DiffusionPolicy, LossGraph, SamplerConfig,
                     approx_action_batch, diffusion_bc_loss, draw_corruption)
from .schedule import NoiseSchedule, build_schedule, forward_diffuse

ALGOS = ("td3bc", "crr", "iql")
LIKELIHOOD_VARIANTS = ("approx_gaussian", "weighted_elbo")

# substreams of the training seed, in checkpoint declaration order:
# batch sampling / L_diff corruption / policy-improvement draws / next actions
RNG_STREAMS = ("batch", "diff", "algo", "next")

METRIC_FIELDS = ("step", "L_diff", "L_algo", "L_TD", "mean_Q",
                 "grad_norm_policy", "grad_norm_critic", "eval_score")


@dataclass
class AlgoConfig:
    algo: str = "td3bc"
    policy_weight: float = 1.0          # lambda on the improvement term
    temp: float = 1.0                   # crr / iql temperature
    expectile: float = 0.7              # iql only; 0.9 suits maze-like tasks
    crr_sample_n: int = 10
    crr_sigma: float = 1.0
    likelihood_variant: str = "approx_gaussian"
    weight_cap: float | None = 100.0
    num_next_actions: int = 1
    share_corruption_draws: bool = False

    def validate(self):
        if self.algo not in ALGOS:
            raise ParameterError(f"unknown algorithm {self.algo!r}; expected one of {ALGOS}")
        if self.policy_weight < 0:
            raise ParameterError("policy_weight must be >= 0")
        if self.temp <= 0:
            raise ParameterError("temp must be positive")
        if not 0.0 < self.expectile < 1.0:
            raise ParameterError("expectile must lie in (0, 1)")
        if self.crr_sample_n < 1:
            raise ParameterError("crr_sample_n must be >= 1")
        if self.likelihood_variant not in LIKELIHOOD_VARIANTS:
            raise ParameterError(f"unknown likelihood variant {self.likelihood_variant!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 10
    iters_per_epoch: int = 1000
    batch_size: int = 256
    grad_clip: float = 5.0
    polyak_rate: float = 0.005
    discount: float = 0.99
    diffusion_steps: int = 1000         # K
    seed: int = 0
    critic_lr: float | None = None      # defaults to learning_rate
    hidden_dim: int = 64
    embed_dim: int = 16
    activation: str = "mish"
    schedule_variant: str = "vp"
    beta_min: float | None = None       # variant default when None
    beta_max: float | None = None
    reward_scale: float = 1.0

    def validate(self):
        for name in ("learning_rate", "epochs", "iters_per_epoch", "batch_size",
                     "grad_clip", "polyak_rate", "diffusion_steps", "hidden_dim",
                     "embed_dim", "reward_scale"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if not 0.0 <= self.discount < 1.0:
            raise ParameterError("discount must lie in [0, 1)")
        if self.polyak_rate > 1.0:
            raise ParameterError("polyak_rate must lie in (0, 1]")

    def build_schedule(self) -> NoiseSchedule:
        if self.schedule_variant == "vp":
            lo = 0.1 if self.beta_min is None else self.beta_min
            hi = 20.0 if self.beta_max is None else self.beta_max
        else:
            lo = 1e-4 if self.beta_min is None else self.beta_min
            hi = 2e-2 if self.beta_max is None else self.beta_max
        return build_schedule(self.schedule_variant, self.diffusion_steps, lo, hi)


@dataclass
class TrainState:
    policy: DiffusionPolicy
    dq: DoubleQ
    vf: ValueFunction | None
    opt_policy: AdamState
    opt_q1: AdamState
    opt_q2: AdamState
    opt_v: AdamState | None
    step: int
    rngs: dict


def init_train_state(cfg: TrainConfig, algo_cfg: AlgoConfig, state_dim: int,
                     action_dim: int, action_bound: float = 1.0,
                     state_norm=None) -> TrainState:
    cfg.validate()
    algo_cfg.validate()
    streams = np.random.SeedSequence(cfg.seed).spawn(len(RNG_STREAMS) + 1)
    init_rng = np.random.Generator(np.random.PCG64(streams[-1]))
    net = init_noise_net(action_dim, state_dim, init_rng, cfg.hidden_dim,
                         cfg.embed_dim, cfg.activation)
    policy = DiffusionPolicy(net, cfg.build_schedule(), action_dim, state_dim,
                             action_bound, state_norm=state_norm)
    dq = DoubleQ.create(state_dim, action_dim, init_rng, cfg.hidden_dim, cfg.activation)
    vf = ValueFunction.create(state_dim, init_rng, cfg.hidden_dim, cfg.activation) \
        if algo_cfg.algo == "iql" else None
    rngs = {name: np.random.Generator(np.random.PCG64(ss))
            for name, ss in zip(RNG_STREAMS, streams)}
    return TrainState(
        policy=policy, dq=dq, vf=vf,
        opt_policy=AdamState.for_params(net.arrays()),
        opt_q1=AdamState.for_params(dq.q1.arrays()),
        opt_q2=AdamState.for_params(dq.q2.arrays()),
        opt_v=AdamState.for_params(vf.v.arrays()) if vf is not None else None,
        step=0, rngs=rngs)


# ---------------------------------------------------------------------------
# policy-improvement losses


def _critic_on_action(p, s_const: np.ndarray, a_node: tape.Tensor) -> tape.Tensor:
    """Critic forward whose action input is a tape node (weights constant)."""
    x = tape.concat([tape.Tensor(s_const), a_node])
    out = mlp_tape_forward(param_leaves(p), x, p.activation)
    return tape.tsum(out, axis=1)


def td3_policy_loss(pol: DiffusionPolicy, dq: DoubleQ, states, actions,
                    rng: np.random.Generator, k_eps=None,
                    critic_pick: int | None = None,
                    normalizer: float | None = None) -> LossGraph:
    """-mean Q(s, a0_hat) / mean|Q|, the normalizer detached.

    One of the two critics is used per call, picked with equal probability;
    a0_hat is clamped to the action box before the critic sees it. Passing
    ``normalizer`` freezes the (otherwise per-batch) detached denominator,
    which finite-difference checks need.
    """
    if critic_pick is None:
        critic_pick = int(rng.integers(0, 2))
    a0, leaves, _ = approx_action_batch(pol, states, actions, rng, k_eps=k_eps)
    a0c = tape.clip(a0, -pol.action_bound, pol.action_bound)
    qp = dq.q1 if critic_pick == 0 else dq.q2
    q = _critic_on_action(qp, np.asarray(states, dtype=np.float64), a0c)
    if normalizer is None:
        normalizer = float(np.mean(np.abs(q.data)))
        if normalizer == 0.0:
            normalizer = 1.0
    node = tape.scale(tape.neg(tape.tmean(q)), 1.0 / normalizer)
    return LossGraph(node, {"policy": leaves})


def crr_advantage(dq: DoubleQ, pol: DiffusionPolicy, states, actions,
                  cfg: AlgoConfig, rng: np.random.Generator) -> np.ndarray:
    """min-Q(s, a) minus a sampled baseline around the approximated action.

    The baseline averages min-Q over ``crr_sample_n`` draws from
    N(a0_hat, crr_sigma^2 I), clamped to the action box.
    """
    if cfg.crr_sample_n < 1:
        raise ParameterError("crr_sample_n must be >= 1")
    s = np.asarray(states, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)
    a0, _, _ = approx_action_batch(pol, s, a, rng)
    a0 = np.clip(a0.data, -pol.action_bound, pol.action_bound)
    B, da = a0.shape
    n = cfg.crr_sample_n
    cand = a0[:, None, :] + cfg.crr_sigma * rng.standard_normal((B, n, da))
    cand = np.clip(cand, -pol.action_bound, pol.action_bound)
    tiled = np.repeat(s, n, axis=0)
    base = min_q(dq, tiled, cand.reshape(B * n, da)).reshape(B, n).mean(axis=1)
    return min_q(dq, s, a) - base


def weight_fn(arg, temp: float, cap: float | None = 100.0) -> np.ndarray:
    """exp(arg / temp) with the argument clipped to +-20*temp, optionally capped."""
    if temp <= 0:
        raise ParameterError("temp must be positive")
    arg = np.clip(np.asarray(arg, dtype=np.float64), -20.0 * temp, 20.0 * temp)
    w = np.exp(arg / temp)
    if cap is not None:
        w = np.minimum(w, cap)
    return w


def weighted_regression_loss(pol: DiffusionPolicy, states, actions, weights,
                             rng: np.random.Generator, k_eps=None) -> LossGraph:
    """mean_i w_i * ||a_i - a0_hat_i||^2 with fresh (k, eps) per element.

    a0_hat stays unclamped here; the weights are constants.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ParameterError("weights must be non-negative")
    if w.shape[0] != np.asarray(states).shape[0]:
        raise ShapeError("weights must align with the batch")
    a0, leaves, _ = approx_action_batch(pol, states, actions, rng, k_eps=k_eps)
    err = tape.sub(tape.Tensor(np.asarray(actions, dtype=np.float64)), a0)
    per = tape.tsum(tape.square(err), axis=1)
    node = tape.tmean(tape.mul(tape.Tensor(w), per))
    return LossGraph(node, {"policy": leaves})


def elbo_coefficient(sch: NoiseSchedule, k) -> np.ndarray:
    """beta^k / (2 alpha^k (1 - alpha_bar^{k-1})), defined for k >= 2."""
    k = np.asarray(k)
    if np.any(k < 2) or np.any(k > sch.K):
        raise ParameterError("the evidence-bound coefficient needs k in 2..K")
    i = k - 1
    return sch.beta[i] / (2.0 * sch.alpha[i] * (1.0 - sch.alpha_bar[i - 1]))


def weighted_elbo_loss(pol: DiffusionPolicy, states, actions, weights,
                       rng: np.random.Generator) -> LossGraph:
    """Likelihood-bound form: coefficient-weighted noise-prediction error.

    k is drawn from {2..K} (the k = 1 coefficient is singular under the
    alpha_bar^0 = 1 convention).
    """
    if pol.schedule.K < 2:
        raise ParameterError("the evidence-bound loss needs K >= 2")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ParameterError("weights must be non-negative")
    s, a = (np.asarray(x, dtype=np.float64) for x in (states, actions))
    k, eps = draw_corruption(pol, len(a), rng, k_min=2)
    coef = elbo_coefficient(pol.schedule, k)
    a_k = forward_diffuse(pol.schedule, a, k, eps)
    if pol.noise_fn is not None:
        from .policy import predict_eps
        eps_hat = predict_eps(pol, a_k, k, s)
        node = tape.Tensor(np.mean(coef * w * np.sum((eps_hat - eps) ** 2, axis=1)))
        return LossGraph(node, {"policy": []})
    from .policy import predict_eps_tape
    leaves = param_leaves(pol.net)
    eps_hat = predict_eps_tape(pol, leaves, a_k, k, s)
    per = tape.tsum(tape.square(tape.sub(eps_hat, tape.Tensor(eps))), axis=1)
    node = tape.tmean(tape.mul(tape.Tensor(coef * w), per))
    return LossGraph(node, {"policy": leaves})


# ---------------------------------------------------------------------------
# the training loop


def _sample_batch(ds: OfflineDataset, cfg: TrainConfig, rng: np.random.Generator):
    idx = rng.integers(0, len(ds), size=cfg.batch_size)
    s, a, r, s2, done = ds.batch(idx)
    if cfg.reward_scale != 1.0:
        r = r * cfg.reward_scale
    return s, a, r, s2, done


def _policy_improvement_loss(st: TrainState, algo_cfg: AlgoConfig, s, a, k_eps,
                             rng: np.random.Generator) -> LossGraph:
    if algo_cfg.algo == "td3bc":
        return td3_policy_loss(st.policy, st.dq, s, a, rng, k_eps=k_eps)
    if algo_cfg.algo == "crr":
        adv = crr_advantage(st.dq, st.policy, s, a, algo_cfg, rng)
        w = weight_fn(adv, algo_cfg.temp, algo_cfg.weight_cap)
    else:  # iql
        arg = min_q(st.dq, s, a, use_target=True) - critic_value(st.vf.v, s)
        w = weight_fn(arg, algo_cfg.temp, algo_cfg.weight_cap)
    if algo_cfg.likelihood_variant == "weighted_elbo":
        return weighted_elbo_loss(st.policy, s, a, w, rng)
    return weighted_regression_loss(st.policy, s, a, w, rng, k_eps=k_eps)


def train_step(st: TrainState, dataset: OfflineDataset, cfg: TrainConfig,
               algo_cfg: AlgoConfig, sampler_cfg: SamplerConfig) -> dict:
    """One critic update (V then Q for iql) followed by one policy update.

    Returns the step metrics; raises NumericError if a loss goes non-finite.
    """
    s, a, r, s2, done = _sample_batch(dataset, cfg, st.rngs["batch"])
    batch = (s, a, r, s2, done)
    critic_lr = cfg.learning_rate if cfg.critic_lr is None else cfg.critic_lr

    # --- policy evaluation
    if algo_cfg.algo == "iql":
        v_loss = iql_value_loss(st.vf, st.dq, batch, algo_cfg.expectile)
        gv = clip_grad_norm(v_loss.gradients()["v"], cfg.grad_clip)
        if critic_lr > 0:
            st.vf.v.set_arrays(adam_step(st.vf.v.arrays(), gv, st.opt_v, critic_lr))
        q_loss = iql_q_loss(st.dq, st.vf, batch, cfg.discount)
    else:
        q_loss = td_loss(st.dq, st.policy, batch, sampler_cfg, cfg.discount,
                         st.rngs["next"], algo_cfg.num_next_actions)
    l_td = q_loss.value
    gq = q_loss.gradients()
    critic_norm = global_norm(gq["q1"] + gq["q2"])
    g1 = clip_grad_norm(gq["q1"], cfg.grad_clip)
    g2 = clip_grad_norm(gq["q2"], cfg.grad_clip)
    if critic_lr > 0:
        st.dq.q1.set_arrays(adam_step(st.dq.q1.arrays(), g1, st.opt_q1, critic_lr))
        st.dq.q2.set_arrays(adam_step(st.dq.q2.arrays(), g2, st.opt_q2, critic_lr))

    # --- policy improvement: g_diff + lambda * g_algo, combined exactly
    k_eps = draw_corruption(st.policy, cfg.batch_size, st.rngs["diff"])
    bc = diffusion_bc_loss(st.policy, s, a, st.rngs["diff"], k_eps=k_eps)
    l_diff = bc.value
    g_pol = bc.gradients()["policy"]
    lam = algo_cfg.policy_weight
    if lam == 0.0:
        l_algo = 0.0
    else:
        k_eps_algo = k_eps if algo_cfg.share_corruption_draws else None
        algo_loss = _policy_improvement_loss(st, algo_cfg, s, a, k_eps_algo,
                                             st.rngs["algo"])
        l_algo = algo_loss.value
        g_algo = algo_loss.gradients()["policy"]
        g_pol = [gd + lam * ga for gd, ga in zip(g_pol, g_algo)]
    policy_norm = global_norm(g_pol)
    g_pol = clip_grad_norm(g_pol, cfg.grad_clip)
    st.policy.net.set_arrays(adam_step(st.policy.net.arrays(), g_pol,
                                       st.opt_policy, cfg.learning_rate))

    polyak_update(st.dq.q1_target, st.dq.q1, cfg.polyak_rate)
    polyak_update(st.dq.q2_target, st.dq.q2, cfg.polyak_rate)
    st.step += 1

    metrics = {
        "step": st.step,
        "L_diff": l_diff,
        "L_algo": l_algo,
        "L_TD": l_td,
        "mean_Q": float(np.mean(min_q(st.dq, s, a))),
        "grad_norm_policy": policy_norm,
        "grad_norm_critic": critic_norm,
    }
    if not all(np.isfinite(v) for v in metrics.values()):
        raise NumericError(f"non-finite training metrics at step {st.step}: {metrics}")
    return metrics


# ---------------------------------------------------------------------------
# checkpointing of full training state


def _state_arrays(st: TrainState):
    arrays = []
    arrays += st.policy.net.arrays() + st.opt_policy.m + st.opt_policy.v
    for p, opt in ((st.dq.q1, st.opt_q1), (st.dq.q2, st.opt_q2)):
        arrays += p.arrays() + opt.m + opt.v
    arrays += st.dq.q1_target.arrays() + st.dq.q2_target.arrays()
    if st.vf is not None:
        arrays += st.vf.v.arrays() + st.opt_v.m + st.opt_v.v
    if st.policy.state_norm is not None:
        arrays += [np.asarray(st.policy.state_norm[0], dtype=np.float64),
                   np.asarray(st.policy.state_norm[1], dtype=np.float64)]
    return arrays


def save_train_state(st: TrainState, path):
    counters = [st.step, int(st.vf is not None), int(st.policy.state_norm is not None),
                st.opt_policy.t, st.opt_q1.t, st.opt_q2.t,
                st.opt_v.t if st.opt_v is not None else 0]
    rngs = [st.rngs[name] for name in RNG_STREAMS]
    tmp = str(path) + ".tmp"
    save_checkpoint(tmp, _state_arrays(st), counters, rngs)
    os.replace(tmp, path)


def load_train_state(path, cfg: TrainConfig, algo_cfg: AlgoConfig, state_dim: int,
                     action_dim: int, action_bound: float = 1.0) -> TrainState:
    arrays, counters, rngs = load_checkpoint(path)
    step, has_vf, has_norm, t_pol, t_q1, t_q2, t_v = counters
    st = init_train_state(cfg, algo_cfg, state_dim, action_dim, action_bound)
    if bool(has_vf) != (st.vf is not None):
        raise ParameterError("checkpoint algorithm family does not match the config")
    if has_norm:
        st.policy.state_norm = (arrays[-2], arrays[-1])
    it = iter(arrays)

    def take(n):
        return [next(it) for _ in range(n)]

    n = len(st.policy.net.arrays())
    st.policy.net.set_arrays(take(n))
    st.opt_policy.m, st.opt_policy.v = take(n), take(n)
    for p, opt in ((st.dq.q1, st.opt_q1), (st.dq.q2, st.opt_q2)):
        nq = len(p.arrays())
        p.set_arrays(take(nq))
        opt.m, opt.v = take(nq), take(nq)
    st.dq.q1_target.set_arrays(take(len(st.dq.q1_target.arrays())))
    st.dq.q2_target.set_arrays(take(len(st.dq.q2_target.arrays())))
    if st.vf is not None:
        nv = len(st.vf.v.arrays())
        st.vf.v.set_arrays(take(nv))
        st.opt_v.m, st.opt_v.v = take(nv), take(nv)
    st.step = int(step)
    st.opt_policy.t, st.opt_q1.t, st.opt_q2.t = int(t_pol), int(t_q1), int(t_q2)
    if st.opt_v is not None:
        st.opt_v.t = int(t_v)
    st.rngs = dict(zip(RNG_STREAMS, rngs))
    return st


# ---------------------------------------------------------------------------
# full runs


def _metric_row(m: dict) -> str:
    vals = []
    for name in METRIC_FIELDS:
        if name == "step":
            vals.append(str(m["step"]))
        elif name == "eval_score":
            vals.append("" if m.get("eval_score") is None else f"{m['eval_score']:.6g}")
        else:
            vals.append(f"{m[name]:.6g}")
    return ",".join(vals)


def train(cfg: TrainConfig, algo_cfg: AlgoConfig, dataset: OfflineDataset,
          sampler_cfg: SamplerConfig | None = None, out_dir=None, env=None,
          eval_cfg=None, resume_from=None, on_epoch=None):
    """Run ``epochs * iters_per_epoch`` steps over the dataset.

    Per epoch the policy is evaluated (when ``env`` is given) and the full
    training state is checkpointed to ``out_dir``. The metric log gets one
    row per step; the eval score lands on the epoch's final row. Returns
    ``(state, score_history)``.
    """
    cfg.validate()
    algo_cfg.validate()
    sampler_cfg = sampler_cfg or SamplerConfig()
    sampler_cfg.validate()
    state_norm = dataset.stats
    if resume_from is not None:
        st = load_train_state(resume_from, cfg, algo_cfg, dataset.state_dim,
                              dataset.action_dim, dataset.action_bound)
    else:
        st = init_train_state(cfg, algo_cfg, dataset.state_dim, dataset.action_dim,
                              dataset.action_bound, state_norm=state_norm)
    log_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "metrics.csv")
        fresh = not os.path.exists(log_path)
        log_f = open(log_path, "a", encoding="utf-8")
        if fresh:
            log_f.write(",".join(METRIC_FIELDS) + "\n")
    history = []
    total = cfg.epochs * cfg.iters_per_epoch
    try:
        while st.step < total:
            try:
                m = train_step(st, dataset, cfg, algo_cfg, sampler_cfg)
            except NumericError:
                if out_dir is not None:
                    save_train_state(st, os.path.join(out_dir, "ckpt_abort.edpc"))
                raise
            epoch_end = st.step % cfg.iters_per_epoch == 0
            if epoch_end:
                epoch = st.step // cfg.iters_per_epoch
                if env is not None:
                    from .harness import EvalConfig, evaluate_policy
                    ecfg = eval_cfg or EvalConfig()
                    ecfg = replace(ecfg, seed=cfg.seed * 1_000_003 + epoch)
                    report = evaluate_policy(st.policy, st.dq, env, ecfg)
                    m["eval_score"] = report.normalized_score
                    history.append(report.normalized_score)
                if out_dir is not None:
                    save_train_state(st, os.path.join(out_dir, "ckpt_latest.edpc"))
                if on_epoch is not None:
                    on_epoch(st, m)
            if log_f is not None:
                log_f.write(_metric_row(m) + "\n")
        if out_dir is not None:
            save_train_state(st, os.path.join(out_dir, "ckpt_final.edpc"))
    finally:
        if log_f is not None:
            log_f.close()
    return st, history
