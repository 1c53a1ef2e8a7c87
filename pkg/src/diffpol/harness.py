"""Evaluation and throughput measurement.

Evaluation rolls out the policy with energy-based action selection: draw a
few candidate actions, score each with the critic, and pick one with
probability proportional to exp(Q). Episode returns are reported as a
normalized score, 100 * (return - random) / (expert - random), anchored by
the env's Monte-Carlo random return and scripted-expert return.

Two scalar summaries condense a training run's score history: the best
checkpoint score seen anywhere (optimistic, model selection after the fact)
and the mean of the last ten checkpoint scores (what you would actually get
by stopping at the end).

The benchmark times full training iterations under four variants — policy
update through the whole sampling chain vs. the one-pass action
approximation, each with chain or ODE next-action sampling — plus raw
environment-stepping throughput for both samplers. Network-call counts per
iteration are exact and reported alongside the wall-clock rates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import policy as policy_mod
from .algorithms import (AlgoConfig, TrainConfig, TrainState, diffusion_bc_loss,
                         init_train_state, train_step)
from .critic import DoubleQ, min_q, td_loss
from .envdata import OfflineDataset, SyntheticEnv, env_step, optimal_score, reset_env
from .errors import ParameterError
from .nn import adam_step, clip_grad_norm, param_leaves
from .policy import (DiffusionPolicy, SamplerConfig, eval_sample,
                     sample_action_chain_tape)
from . import tape

TRAIN_VARIANTS = ("full-chain+ddpm", "full-chain+ode",
                  "action-approx+ddpm", "action-approx+ode")
SAMPLE_VARIANTS = ("ddpm-sample", "ode-sample")
ALL_VARIANTS = TRAIN_VARIANTS + SAMPLE_VARIANTS

EAS_CLIP = 500.0  # bound on Q gaps fed to the softmax


@dataclass
class EvalConfig:
    eas_n: int = 10
    episodes: int = 20
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0

    def validate(self):
        if self.eas_n < 1:
            raise ParameterError("eas_n must be >= 1")
        if self.episodes < 1:
            raise ParameterError("episodes must be >= 1")
        self.sampler.validate()


@dataclass
class EvalReport:
    returns: np.ndarray
    mean_return: float
    std_return: float
    normalized_score: float
    anchors: tuple  # (random, expert)


def _softmax_pick(q: np.ndarray, rng: np.random.Generator) -> int:
    d = np.clip(q - q.max(), -EAS_CLIP, EAS_CLIP)
    p = np.exp(d)
    p /= p.sum()
    return int(rng.choice(len(q), p=p))


def eas_select(pol: DiffusionPolicy, dq: DoubleQ, s, n: int, cfg: SamplerConfig,
               rng: np.random.Generator) -> np.ndarray:
    """Draw n candidate actions, then pick one ~ softmax of their min-Q.

    ``s`` is a single state already in the policy's input space.
    """
    if n < 1:
        raise ParameterError("number of candidate actions must be >= 1")
    s = np.asarray(s, dtype=np.float64)
    cand = eval_sample(pol, np.tile(s, (n, 1)), cfg, rng)
    if n == 1:
        return cand[0]
    q = min_q(dq, np.tile(s, (n, 1)), cand)
    return cand[_softmax_pick(q, rng)]


def _eas_select_batch(pol, dq, states, n, cfg, rng):
    """Vectorized candidate draw for a batch of states (one pick per row)."""
    B = states.shape[0]
    tiled = np.repeat(states, n, axis=0)
    cand = eval_sample(pol, tiled, cfg, rng).reshape(B, n, -1)
    if n == 1:
        return cand[:, 0, :]
    q = min_q(dq, tiled, cand.reshape(B * n, -1)).reshape(B, n)
    out = np.empty((B, cand.shape[-1]))
    for i in range(B):
        out[i] = cand[i, _softmax_pick(q[i], rng)]
    return out


def evaluate_policy(pol: DiffusionPolicy, dq: DoubleQ, env: SyntheticEnv,
                    cfg: EvalConfig) -> EvalReport:
    """Roll out ``episodes`` episodes with energy-based action selection.

    Raw observations are passed through the policy's recorded state
    normalization before the policy or critics see them.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    E = cfg.episodes
    s = np.atleast_2d(reset_env(env, rng, E))
    total = np.zeros(E)
    for t in range(env.episode_len):
        s_in = pol.normalize_state(s)
        a = _eas_select_batch(pol, dq, s_in, cfg.eas_n, cfg.sampler, rng)
        s, r, _ = env_step(env, s, a, rng, t)
        total += r
    rand, expert = optimal_score(env)
    score = 100.0 * (float(total.mean()) - rand) / (expert - rand)
    return EvalReport(returns=total, mean_return=float(total.mean()),
                      std_return=float(total.std()), normalized_score=score,
                      anchors=(rand, expert))


def oms_metric(history) -> float:
    """Best checkpoint score over the whole run."""
    history = np.asarray(history, dtype=np.float64)
    if history.size == 0:
        raise ParameterError("score history is empty")
    return float(history.max())


def rat_metric(history, window: int = 10) -> float:
    """Mean of the last ``window`` checkpoint scores (all of them if fewer)."""
    history = np.asarray(history, dtype=np.float64)
    if history.size == 0:
        raise ParameterError("score history is empty")
    return float(history[-window:].mean())


# ---------------------------------------------------------------------------
# throughput benchmark


@dataclass
class BenchReport:
    rows: list            # dicts: {variant, K, ips, sps, eps_rows_per_iter}
    iters: int
    batch_size: int

    def rate(self, variant: str, K: int) -> float:
        for row in self.rows:
            if row["variant"] == variant and row["K"] == K:
                return row["ips"] if row["ips"] is not None else row["sps"]
        raise ParameterError(f"no benchmark row for ({variant}, K={K})")

    def to_csv(self) -> str:
        lines = ["variant,K,ips,sps"]
        for row in self.rows:
            ips = "" if row["ips"] is None else f"{row['ips']:.4g}"
            sps = "" if row["sps"] is None else f"{row['sps']:.4g}"
            lines.append(f"{row['variant']},{row['K']},{ips},{sps}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = f"{'variant':<22}{'K':>6}{'ips':>12}{'sps':>12}{'net rows/iter':>16}"
        lines = [head, "-" * len(head)]
        for row in self.rows:
            ips = "-" if row["ips"] is None else f"{row['ips']:.2f}"
            sps = "-" if row["sps"] is None else f"{row['sps']:.2f}"
            lines.append(f"{row['variant']:<22}{row['K']:>6}{ips:>12}{sps:>12}"
                         f"{row['eps_rows_per_iter']:>16}")
        return "\n".join(lines)


def _sampler_for(variant: str, nfe: int) -> SamplerConfig:
    method = "ddpm" if variant.endswith("ddpm") else "ode"
    return SamplerConfig(method=method, nfe=nfe)


def _full_chain_step(st: TrainState, dataset, cfg: TrainConfig, algo_cfg: AlgoConfig,
                     sampler_cfg: SamplerConfig):
    """One baseline iteration: TD update, then a policy update whose Q term
    backpropagates through the entire sampling chain."""
    idx = st.rngs["batch"].integers(0, len(dataset), size=cfg.batch_size)
    batch = dataset.batch(idx)
    s, a = batch[0], batch[1]
    q_loss = td_loss(st.dq, st.policy, batch, sampler_cfg, cfg.discount, st.rngs["next"])
    gq = q_loss.gradients()
    st.dq.q1.set_arrays(adam_step(st.dq.q1.arrays(),
                                  clip_grad_norm(gq["q1"], cfg.grad_clip),
                                  st.opt_q1, cfg.learning_rate))
    st.dq.q2.set_arrays(adam_step(st.dq.q2.arrays(),
                                  clip_grad_norm(gq["q2"], cfg.grad_clip),
                                  st.opt_q2, cfg.learning_rate))

    bc = diffusion_bc_loss(st.policy, s, a, st.rngs["diff"])
    g_pol = bc.gradients()["policy"]
    leaves = param_leaves(st.policy.net)
    a_chain = sample_action_chain_tape(st.policy, leaves, s, sampler_cfg, st.rngs["algo"])
    a_chain = tape.clip(a_chain, -st.policy.action_bound, st.policy.action_bound)
    from .algorithms import _critic_on_action
    qp = st.dq.q1 if int(st.rngs["algo"].integers(0, 2)) == 0 else st.dq.q2
    qn = _critic_on_action(qp, s, a_chain)
    norm = float(np.mean(np.abs(qn.data))) or 1.0
    node = tape.scale(tape.neg(tape.tmean(qn)), 1.0 / norm)
    tape.backward(node)
    g_algo = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]
    g_pol = [gd + algo_cfg.policy_weight * ga for gd, ga in zip(g_pol, g_algo)]
    st.policy.net.set_arrays(adam_step(st.policy.net.arrays(),
                                       clip_grad_norm(g_pol, cfg.grad_clip),
                                       st.opt_policy, cfg.learning_rate))
    st.step += 1


def _time_variant(variant: str, dataset: OfflineDataset, env: SyntheticEnv | None,
                  K: int, iters: int, warmup: int, cfg_base: TrainConfig,
                  nfe: int, seed: int):
    cfg = replace(cfg_base, diffusion_steps=K, seed=seed)
    algo_cfg = AlgoConfig(algo="td3bc")
    if variant in SAMPLE_VARIANTS:
        st = init_train_state(cfg, algo_cfg, dataset.state_dim, dataset.action_dim,
                              dataset.action_bound)
        scfg = SamplerConfig(method=variant.split("-")[0], nfe=nfe)
        rng = np.random.default_rng(seed)
        s = reset_env(env, rng)
        t0 = None
        policy_mod.reset_eval_count()
        steps_done = 0
        ep_t = 0
        for i in range(warmup + iters):
            if i == warmup:
                policy_mod.reset_eval_count()
                t0 = time.perf_counter()
            a = eval_sample(st.policy, np.asarray(s, dtype=np.float64), scfg, rng)
            s, _, done = env_step(env, s, a, rng, ep_t)
            ep_t += 1
            if done:
                s = reset_env(env, rng)
                ep_t = 0
            if i >= warmup:
                steps_done += 1
        elapsed = time.perf_counter() - t0
        rows_per = policy_mod.eval_count() // steps_done
        return None, steps_done / elapsed, rows_per

    scfg = _sampler_for(variant, nfe)
    st = init_train_state(cfg, algo_cfg, dataset.state_dim, dataset.action_dim,
                          dataset.action_bound)
    step_fn = _full_chain_step if variant.startswith("full-chain") else train_step
    t0 = None
    policy_mod.reset_eval_count()
    for i in range(warmup + iters):
        if i == warmup:
            policy_mod.reset_eval_count()
            t0 = time.perf_counter()
        step_fn(st, dataset, cfg, algo_cfg, scfg)
    elapsed = time.perf_counter() - t0
    rows_per = policy_mod.eval_count() // iters
    return iters / elapsed, None, rows_per


def bench_training(variants, dataset: OfflineDataset, iters: int, K_values,
                   env: SyntheticEnv | None = None, batch_size: int = 32,
                   hidden_dim: int = 64, nfe: int = 15, warmup: int = 100,
                   repeats: int = 3, seed: int = 0) -> BenchReport:
    """Measure iterations/second per training variant and env steps/second
    per sampler, for each K. Reports the median of ``repeats`` runs and the
    exact per-iteration count of noise-net row evaluations.

    ``*-sample`` variants need ``env``; timing runs single-threaded.
    """
    if iters < 1:
        raise ParameterError("iters must be >= 1")
    for v in variants:
        if v not in ALL_VARIANTS:
            raise ParameterError(f"unknown benchmark variant {v!r}; expected {ALL_VARIANTS}")
    if env is None and any(v in SAMPLE_VARIANTS for v in variants):
        raise ParameterError("sampling variants need an env")
    cfg_base = TrainConfig(batch_size=batch_size, hidden_dim=hidden_dim,
                           epochs=1, iters_per_epoch=max(iters, 1))
    rows = []
    for K in K_values:
        for variant in variants:
            ips_runs, sps_runs, rows_per = [], [], None
            for rep in range(repeats):
                ips, sps, rp = _time_variant(variant, dataset, env, K, iters,
                                             warmup, cfg_base, nfe, seed + rep)
                rows_per = rp
                if ips is not None:
                    ips_runs.append(ips)
                if sps is not None:
                    sps_runs.append(sps)
            rows.append({
                "variant": variant,
                "K": K,
                "ips": float(np.median(ips_runs)) if ips_runs else None,
                "sps": float(np.median(sps_runs)) if sps_runs else None,
                "eps_rows_per_iter": rows_per,
            })
    return BenchReport(rows=rows, iters=iters, batch_size=batch_size)
