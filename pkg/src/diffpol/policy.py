"""The diffusion policy: losses, samplers and the one-pass action estimate.

A policy is a noise-prediction MLP eps(a^k, k; s) together with a variance
schedule. Actions are generated by reversing the corruption chain, either
with the stochastic K-step sampler or with a deterministic ODE integrator
that needs only ``nfe`` network evaluations on a uniform half-log-SNR grid.

Training never runs the sampler. The behavior-cloning loss corrupts dataset
actions and regresses the injected noise (one evaluation per element), and
``approx_action_batch`` rebuilds a differentiable clean-action estimate from
a corrupted dataset action — again one evaluation per element, whatever K is.

Two controlled-sampling knobs apply uniformly to both samplers: the network
output is scaled by ``policy_scale`` (sharpens the implied distribution) and
injected Gaussian noise is scaled by ``init_noise_scale`` (0 makes sampling
fully deterministic). At 1.0 both are exact no-ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import ParameterError, ShapeError
from .nn import (NoiseNetParams, mlp_forward, mlp_tape_forward, param_leaves,
                 leaf_grads, sinusoidal_embed)
from .schedule import NoiseSchedule, forward_diffuse, ddpm_reverse_step

SAMPLER_METHODS = ("ddpm", "ode")

# running count of per-element noise-net evaluations (a batched forward over
# B rows adds B); benchmarks reset and read it around timed sections
_eval_rows = 0


def reset_eval_count():
    global _eval_rows
    _eval_rows = 0


def eval_count() -> int:
    return _eval_rows


@dataclass
class SamplerConfig:
    method: str = "ode"          # "ddpm" | "ode"
    nfe: int = 15                # network evaluations for the ODE sampler
    ode_order: int = 3           # 1 | 3
    policy_scale: float = 1.0
    init_noise_scale: float = 1.0

    def validate(self):
        if self.method not in SAMPLER_METHODS:
            raise ParameterError(f"unknown sampler method {self.method!r}")
        if self.ode_order not in (1, 3):
            raise ParameterError(f"ode_order must be 1 or 3, got {self.ode_order}")
        if self.nfe < self.ode_order:
            raise ParameterError(f"nfe ({self.nfe}) must be >= ode_order ({self.ode_order})")
        if self.policy_scale <= 0:
            raise ParameterError("policy_scale must be positive")
        if not 0.0 <= self.init_noise_scale <= 1.0:
            raise ParameterError("init_noise_scale must lie in [0, 1]")


@dataclass
class DiffusionPolicy:
    net: NoiseNetParams
    schedule: NoiseSchedule
    action_dim: int
    state_dim: int
    action_bound: float = 1.0
    # per-dim state statistics applied to raw observations at evaluation
    # time; None when the training data was not normalized
    state_norm: tuple | None = None
    # test hook: a callable (a_k, k, s) -> eps that replaces the network
    noise_fn: object = None

    def normalize_state(self, s):
        if self.state_norm is None:
            return s
        mean, std = self.state_norm
        return (np.asarray(s, dtype=np.float64) - mean) / std


def _as_batch(x, dim: int, name: str):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{name} must have width {dim}, got shape {x.shape}")
    return x, single


def _embed_rows(k, n_rows: int, dim: int) -> np.ndarray:
    if np.ndim(k) == 0:
        return np.broadcast_to(sinusoidal_embed(float(k), dim), (n_rows, dim))
    return sinusoidal_embed(np.asarray(k, dtype=np.float64), dim)


def predict_eps(pol: DiffusionPolicy, a_k: np.ndarray, k, s: np.ndarray) -> np.ndarray:
    """Plain forward pass of the noise net; ``k`` scalar or per-row array."""
    global _eval_rows
    if pol.noise_fn is not None:
        _eval_rows += a_k.shape[0] if a_k.ndim == 2 else 1
        return np.asarray(pol.noise_fn(a_k, k, s), dtype=np.float64)
    emb = _embed_rows(k, a_k.shape[0], pol.net.embed_dim)
    x = np.concatenate([a_k, s, emb], axis=-1)
    _eval_rows += x.shape[0]
    return mlp_forward(pol.net, x)


def predict_eps_tape(pol: DiffusionPolicy, leaves: list, a_k, k,
                     s: np.ndarray) -> tape.Tensor:
    """Differentiable forward pass; ``a_k`` may itself be a tape node."""
    global _eval_rows
    a_node = a_k if isinstance(a_k, tape.Tensor) else tape.Tensor(a_k)
    B = a_node.data.shape[0]
    emb = _embed_rows(k, B, pol.net.embed_dim)
    x = tape.concat([a_node, tape.Tensor(s), tape.Tensor(np.ascontiguousarray(emb))])
    _eval_rows += B
    return mlp_tape_forward(leaves, x, pol.net.activation)


class LossGraph:
    """A scalar loss node plus the parameter leaves it differentiates.

    ``gradients()`` runs the backward pass once and returns per-group
    gradient lists in parameter declaration order.
    """

    def __init__(self, node: tape.Tensor, groups: dict):
        self.node = node
        self.groups = groups
        self._ran = False

    @property
    def value(self) -> float:
        return float(self.node.data)

    def gradients(self) -> dict:
        if not self._ran:
            tape.backward(self.node)
            self._ran = True
        return {name: leaf_grads(ls) for name, ls in self.groups.items()}


def _check_batch(pol: DiffusionPolicy, states, actions):
    s = np.asarray(states, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)
    if s.ndim != 2 or a.ndim != 2 or s.shape[0] != a.shape[0]:
        raise ShapeError(f"expected (B, state_dim) and (B, action_dim), got {s.shape}, {a.shape}")
    if s.shape[0] == 0:
        raise ParameterError("batch must be nonempty")
    if a.shape[1] != pol.action_dim or s.shape[1] != pol.state_dim:
        raise ShapeError("batch dims disagree with the policy's declared dims")
    return s, a


def draw_corruption(pol: DiffusionPolicy, n: int, rng: np.random.Generator,
                    k_min: int = 1):
    """Fresh per-element (k, eps) draws for a corruption pass."""
    k = rng.integers(k_min, pol.schedule.K + 1, size=n)
    eps = rng.standard_normal((n, pol.action_dim))
    return k, eps


def diffusion_bc_loss(pol: DiffusionPolicy, states, actions, rng: np.random.Generator,
                      k_eps=None) -> LossGraph:
    """Behavior-cloning objective: E ||eps - eps_net(a^k, k; s)||^2.

    Each batch element gets its own uniform k in 1..K and Gaussian eps;
    pass ``k_eps`` to reuse draws made elsewhere.
    """
    s, a = _check_batch(pol, states, actions)
    if np.max(np.abs(a)) > pol.action_bound + 1e-9:
        raise ParameterError("actions exceed the policy's action bound")
    k, eps = k_eps if k_eps is not None else draw_corruption(pol, len(a), rng)
    a_k = forward_diffuse(pol.schedule, a, k, eps)
    if pol.noise_fn is not None:
        eps_hat = predict_eps(pol, a_k, k, s)
        node = tape.Tensor(np.mean(np.sum((eps_hat - eps) ** 2, axis=1)))
        return LossGraph(node, {"policy": []})
    leaves = param_leaves(pol.net)
    eps_hat = predict_eps_tape(pol, leaves, a_k, k, s)
    err = tape.sub(eps_hat, tape.Tensor(eps))
    node = tape.tmean(tape.tsum(tape.square(err), axis=1))
    return LossGraph(node, {"policy": leaves})


def approx_action_batch(pol: DiffusionPolicy, states, actions, rng: np.random.Generator,
                        k_eps=None):
    """Differentiable one-evaluation clean-action estimates for a batch.

    Corrupts each dataset action with fresh (k, eps), runs the noise net
    once, and inverts the corruption. Returns ``(a0_node, leaves, (k, eps))``
    where ``a0_node`` is a (B, action_dim) tape tensor whose gradients flow
    into the policy parameters, unclipped.
    """
    s, a = _check_batch(pol, states, actions)
    k, eps = k_eps if k_eps is not None else draw_corruption(pol, len(a), rng)
    a_k = forward_diffuse(pol.schedule, a, k, eps)
    i = k - 1
    c1 = (1.0 / pol.schedule.sqrt_alpha_bar[i])[:, None]
    c2 = (pol.schedule.sqrt_one_minus_alpha_bar[i] / pol.schedule.sqrt_alpha_bar[i])[:, None]
    if pol.noise_fn is not None:
        eps_hat = predict_eps(pol, a_k, k, s)
        return tape.Tensor(c1 * a_k - c2 * eps_hat), [], (k, eps)
    leaves = param_leaves(pol.net)
    eps_hat = predict_eps_tape(pol, leaves, a_k, k, s)
    a0_hat = tape.sub(tape.Tensor(c1 * a_k), tape.mul(tape.Tensor(c2), eps_hat))
    return a0_hat, leaves, (k, eps)


# ---------------------------------------------------------------------------
# samplers


def sample_action_ddpm(pol: DiffusionPolicy, s, cfg: SamplerConfig,
                       rng: np.random.Generator) -> np.ndarray:
    """Full K-step reverse-chain sampling; clamps the result to the action box.

    ``init_noise_scale`` scales every injected Gaussian (the initial a^K and
    the per-step z), so 0 gives a fully deterministic chain.
    """
    cfg.validate()
    s2, single = _as_batch(s, pol.state_dim, "state")
    B = s2.shape[0]
    sch = pol.schedule
    a = cfg.init_noise_scale * rng.standard_normal((B, pol.action_dim))
    for k in range(sch.K, 0, -1):
        eps_hat = cfg.policy_scale * predict_eps(pol, a, float(k), s2)
        if k > 1:
            z = cfg.init_noise_scale * rng.standard_normal((B, pol.action_dim))
        else:
            z = np.zeros((B, pol.action_dim))
        a = ddpm_reverse_step(sch, eps_hat, a, k, z)
    a = np.clip(a, -pol.action_bound, pol.action_bound)
    return a[0] if single else a


def _ode_coeffs(sch: NoiseSchedule, t):
    sq_ab, sq_1mab = sch.marginal_coeffs(t)
    return sq_ab, sq_1mab


def _ode_eval(pol: DiffusionPolicy, cfg: SamplerConfig, a, t, s):
    # the net sees the (possibly fractional) step index k = t*K
    return cfg.policy_scale * predict_eps(pol, a, t * pol.schedule.K, s)


def _ode_step(pol, cfg, a, t_prev, t_next, s, order: int):
    """One multistage update of the probability-flow ODE in lambda-time."""
    sch = pol.schedule
    lam_p, lam_n = sch.lam(t_prev), sch.lam(t_next)
    h = lam_n - lam_p
    al_p, _ = _ode_coeffs(sch, t_prev)
    al_n, sg_n = _ode_coeffs(sch, t_next)
    eps_p = _ode_eval(pol, cfg, a, t_prev, s)
    if order == 1 or h == 0.0:
        return (al_n / al_p) * a - sg_n * np.expm1(h) * eps_p
    if order == 2:
        r1 = 0.5
        t1 = sch.t_of_lam(lam_p + r1 * h)
        al_1, sg_1 = _ode_coeffs(sch, t1)
        a1 = (al_1 / al_p) * a - sg_1 * np.expm1(r1 * h) * eps_p
        eps_1 = _ode_eval(pol, cfg, a1, t1, s)
        return ((al_n / al_p) * a - sg_n * np.expm1(h) * eps_p
                - (0.5 / r1) * sg_n * np.expm1(h) * (eps_1 - eps_p))
    # third order, r1 = 1/3, r2 = 2/3
    r1, r2 = 1.0 / 3.0, 2.0 / 3.0
    t1 = sch.t_of_lam(lam_p + r1 * h)
    t2 = sch.t_of_lam(lam_p + r2 * h)
    al_1, sg_1 = _ode_coeffs(sch, t1)
    al_2, sg_2 = _ode_coeffs(sch, t2)
    phi_11 = np.expm1(r1 * h)
    phi_12 = np.expm1(r2 * h)
    phi_1 = np.expm1(h)
    phi_22 = np.expm1(r2 * h) / (r2 * h) - 1.0
    phi_2 = np.expm1(h) / h - 1.0
    a1 = (al_1 / al_p) * a - sg_1 * phi_11 * eps_p
    eps_1 = _ode_eval(pol, cfg, a1, t1, s)
    a2 = ((al_2 / al_p) * a - sg_2 * phi_12 * eps_p
          - (r2 / r1) * sg_2 * phi_22 * (eps_1 - eps_p))
    eps_2 = _ode_eval(pol, cfg, a2, t2, s)
    return ((al_n / al_p) * a - sg_n * phi_1 * eps_p
            - (1.0 / r2) * sg_n * phi_2 * (eps_2 - eps_p))


HMAX_LOG_SNR = 2.5  # stability cap on the per-interval half-log-SNR step


def _ode_plan(nfe: int, order: int, h_total: float):
    """Per-interval solver orders; the evaluation count is exactly nfe.

    For order 3 the interval count is chosen so each interval spans at most
    ``HMAX_LOG_SNR`` in lambda (the high-order extrapolation is unreliable
    across larger spans); remaining evaluations are spent on higher orders
    at the noisy end first.
    """
    if order == 1:
        return [1] * nfe
    m = max(int(np.ceil(abs(h_total) / HMAX_LOG_SNR)), int(np.ceil(nfe / 3)))
    m = min(m, nfe)
    base = nfe // m
    rem = nfe - base * m
    return [base + 1] * rem + [base] * (m - rem)


def sample_action_ode(pol: DiffusionPolicy, s, cfg: SamplerConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Deterministic ODE sampling with exactly ``cfg.nfe`` network calls.

    Integrates from the time of step K down to the time of step 1 on a grid
    uniform in the half-log-SNR lambda; randomness enters only through the
    initial a^K ~ init_noise_scale * N(0, I).
    """
    cfg.validate()
    s2, single = _as_batch(s, pol.state_dim, "state")
    B = s2.shape[0]
    sch = pol.schedule
    a = cfg.init_noise_scale * rng.standard_normal((B, pol.action_dim))
    lam_start, lam_end = sch.lam(1.0), sch.lam(1.0 / sch.K)
    orders = _ode_plan(cfg.nfe, cfg.ode_order, float(lam_end - lam_start))
    lams = np.linspace(lam_start, lam_end, len(orders) + 1)
    ts = sch.t_of_lam(lams)
    for i, order in enumerate(orders):
        a = _ode_step(pol, cfg, a, ts[i], ts[i + 1], s2, order)
    a = np.clip(a, -pol.action_bound, pol.action_bound)
    return a[0] if single else a


def eval_sample(pol: DiffusionPolicy, s, cfg: SamplerConfig,
                rng: np.random.Generator) -> np.ndarray:
    """Dispatch on ``cfg.method``."""
    if cfg.method == "ddpm":
        return sample_action_ddpm(pol, s, cfg, rng)
    if cfg.method == "ode":
        return sample_action_ode(pol, s, cfg, rng)
    raise ParameterError(f"unknown sampler method {cfg.method!r}")


def sample_action_chain_tape(pol: DiffusionPolicy, leaves: list, s,
                             cfg: SamplerConfig, rng: np.random.Generator) -> tape.Tensor:
    """Reverse chain with gradients kept through every one of the K steps.

    This is the expensive baseline the one-pass action approximation
    replaces: optimizing Q of a sampled action by backpropagating through
    the whole chain costs K network forwards and K backwards per update.
    Returns the unclamped (B, action_dim) sample as a tape node.
    """
    cfg.validate()
    s2, _ = _as_batch(s, pol.state_dim, "state")
    B = s2.shape[0]
    sch = pol.schedule
    a = tape.Tensor(cfg.init_noise_scale * rng.standard_normal((B, pol.action_dim)))
    for k in range(sch.K, 0, -1):
        i = k - 1
        eps_hat = predict_eps_tape(pol, leaves, a, float(k), s2)
        if cfg.policy_scale != 1.0:
            eps_hat = tape.scale(eps_hat, cfg.policy_scale)
        mean = tape.scale(tape.sub(a, tape.scale(eps_hat, sch.beta[i] / sch.sqrt_one_minus_alpha_bar[i])),
                          sch.inv_sqrt_alpha[i])
        if k > 1:
            z = cfg.init_noise_scale * rng.standard_normal((B, pol.action_dim))
            a = tape.add(mean, tape.Tensor(sch.sqrt_beta[i] * z))
        else:
            a = mean
    return a
