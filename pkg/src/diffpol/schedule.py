"""Variance schedules and the elementary diffusion-step algebra.

A schedule is the table of per-step noise variances beta^1..beta^K with

    alpha^k     = 1 - beta^k
    alpha_bar^k = prod_{s<=k} alpha^s          (alpha_bar^0 := 1)

Forward corruption at step k (the closed-form marginal of the forward chain):

    a^k = sqrt(alpha_bar^k) * a0 + sqrt(1 - alpha_bar^k) * eps,  eps ~ N(0, I)

so a^k | a0 ~ N(sqrt(alpha_bar^k) a0, (1 - alpha_bar^k) I). Rearranging for a
predicted noise gives the one-evaluation clean-action estimate

    a0_hat = a^k / sqrt(alpha_bar^k) - sqrt(1 - alpha_bar^k)/sqrt(alpha_bar^k) * eps_hat

and a single reverse sampling step is

    a^{k-1} = (a^k - beta^k / sqrt(1 - alpha_bar^k) * eps_hat) / sqrt(alpha^k)
              + sqrt(beta^k) * z,   z ~ N(0, I)  (z = 0 at k = 1).

Two variants are supported. ``linear`` interpolates beta directly between
``beta_min`` and ``beta_max`` (both must lie in (0,1)). ``vp`` treats
(beta_min, beta_max) as endpoints of the continuous-time variance-preserving
rate, discretized so that

    log alpha_bar^k = -beta_min * t - (beta_max - beta_min) * t^2 / 2,  t = k/K

holds exactly for every K; its terminal alpha_bar is exp(-(beta_min+beta_max)/2)
independent of K. The schedule also exposes the continuous-time marginal and
its half-log-SNR lambda(t) = ln(sqrt(alpha_bar)/sqrt(1-alpha_bar)), which the
ODE sampler uses for its uniform-in-lambda time grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError

VARIANTS = ("linear", "vp")

# number of knots for the lambda(t) <-> t interpolation tables
_GRID_MIN = 4096


@dataclass(frozen=True)
class NoiseSchedule:
    variant: str
    num_steps: int                      # K
    beta: np.ndarray                    # (K,), beta^1..beta^K
    alpha: np.ndarray                   # (K,), 1 - beta
    alpha_bar: np.ndarray               # (K,), cumulative product
    # precomputed tables for the inner loops
    sqrt_alpha_bar: np.ndarray = field(repr=False, default=None)
    sqrt_one_minus_alpha_bar: np.ndarray = field(repr=False, default=None)
    inv_sqrt_alpha: np.ndarray = field(repr=False, default=None)
    sqrt_beta: np.ndarray = field(repr=False, default=None)
    # dense grids for continuous-time lookups, t in [1/K, 1]
    t_grid: np.ndarray = field(repr=False, default=None)
    log_ab_grid: np.ndarray = field(repr=False, default=None)
    lam_grid: np.ndarray = field(repr=False, default=None)

    @property
    def K(self) -> int:
        return self.num_steps

    # -- continuous-time marginal -----------------------------------------
    def log_alpha_bar(self, t):
        """log alpha_bar at continuous time t in (0, 1]."""
        t = np.asarray(t, dtype=np.float64)
        return np.interp(t, self.t_grid, self.log_ab_grid)

    def marginal_coeffs(self, t):
        """(sqrt(alpha_bar), sqrt(1 - alpha_bar)) at continuous time t."""
        log_ab = self.log_alpha_bar(t)
        ab = np.exp(log_ab)
        return np.sqrt(ab), np.sqrt(-np.expm1(log_ab))

    def lam(self, t):
        """Half-log-SNR lambda(t) = 0.5*log(alpha_bar/(1-alpha_bar))."""
        log_ab = self.log_alpha_bar(t)
        return 0.5 * (log_ab - np.log(-np.expm1(log_ab)))

    def t_of_lam(self, lam):
        """Inverse of :meth:`lam` on [1/K, 1] (lambda decreases with t)."""
        return np.interp(np.asarray(lam, dtype=np.float64), self.lam_grid[::-1],
                         self.t_grid[::-1])


def build_schedule(variant: str, K: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Construct the beta/alpha/alpha_bar tables for ``K`` diffusion steps.

    ``linear``: beta^k interpolates [beta_min, beta_max] over k = 1..K and
    both endpoints must lie in (0, 1). ``vp``: (beta_min, beta_max) are the
    continuous-time rate endpoints (any 0 < beta_min <= beta_max), and

        beta^k = 1 - exp(-beta_min/K - (beta_max - beta_min)(2k - 1)/(2 K^2)).
    """
    if variant not in VARIANTS:
        raise ParameterError(f"unknown schedule variant {variant!r}; expected one of {VARIANTS}")
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    if not (0.0 < beta_min <= beta_max):
        raise ParameterError(f"need 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})")
    k = np.arange(1, K + 1, dtype=np.float64)
    if variant == "linear":
        if beta_max >= 1.0:
            raise ParameterError(f"linear schedule needs beta_max < 1, got {beta_max}")
        if K == 1:
            beta = np.array([beta_min])
        else:
            beta = beta_min + (k - 1.0) / (K - 1.0) * (beta_max - beta_min)
    else:
        beta = 1.0 - np.exp(-beta_min / K - 0.5 * (beta_max - beta_min) * (2.0 * k - 1.0) / K**2)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)

    # dense t-grid for continuous lookups; log alpha_bar interpolates the
    # discrete table linearly in t (exact at the knots t = k/K, and exactly
    # the closed form for the vp variant)
    n = max(_GRID_MIN, 4 * K)
    t_grid = np.linspace(1.0 / K, 1.0, n)
    if variant == "vp":
        log_ab_grid = -beta_min * t_grid - 0.5 * (beta_max - beta_min) * t_grid**2
    else:
        knots_t = np.concatenate([[0.0], k / K])
        knots_v = np.concatenate([[0.0], np.log(alpha_bar)])
        log_ab_grid = np.interp(t_grid, knots_t, knots_v)
    lam_grid = 0.5 * (log_ab_grid - np.log(-np.expm1(log_ab_grid)))

    sch = NoiseSchedule(
        variant=variant, num_steps=K, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
        sqrt_alpha_bar=np.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
        inv_sqrt_alpha=1.0 / np.sqrt(alpha),
        sqrt_beta=np.sqrt(beta),
        t_grid=t_grid, log_ab_grid=log_ab_grid, lam_grid=lam_grid,
    )
    for arr in (sch.beta, sch.alpha, sch.alpha_bar, sch.sqrt_alpha_bar,
                sch.sqrt_one_minus_alpha_bar, sch.inv_sqrt_alpha, sch.sqrt_beta,
                sch.t_grid, sch.log_ab_grid, sch.lam_grid):
        arr.flags.writeable = False
    return sch


def default_schedule(K: int = 1000, variant: str = "vp") -> NoiseSchedule:
    """The production defaults: vp(0.1, 20) or the classic linear(1e-4, 2e-2)."""
    if variant == "vp":
        return build_schedule("vp", K, 0.1, 20.0)
    return build_schedule("linear", K, 1e-4, 2e-2)


def _check_k(sch: NoiseSchedule, k) -> np.ndarray:
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > sch.K):
        raise ParameterError(f"step index must lie in 1..{sch.K}")
    return k - 1  # 0-based table index


def forward_diffuse(sch: NoiseSchedule, a0, k, eps) -> np.ndarray:
    """Corrupt a clean action to step k given the noise draw eps.

    ``k`` is a scalar or a per-row array of step indices in 1..K; ``a0`` and
    ``eps`` must have matching shape (d,) or (B, d).
    """
    a0 = np.asarray(a0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a0.shape != eps.shape:
        raise ShapeError(f"a0 shape {a0.shape} != eps shape {eps.shape}")
    i = _check_k(sch, k)
    c1 = sch.sqrt_alpha_bar[i]
    c2 = sch.sqrt_one_minus_alpha_bar[i]
    if a0.ndim == 2 and np.ndim(c1) == 1:
        c1, c2 = c1[:, None], c2[:, None]
    return c1 * a0 + c2 * eps


def approximate_action(sch: NoiseSchedule, a_k, k, eps_pred) -> np.ndarray:
    """Invert the forward-corruption map given a noise prediction.

    Returns a^k/sqrt(alpha_bar^k) - (sqrt(1-alpha_bar^k)/sqrt(alpha_bar^k)) * eps_pred,
    unclipped; whether the result should be clamped to the action box is the
    caller's decision.
    """
    a_k = np.asarray(a_k, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if a_k.shape != eps_pred.shape:
        raise ShapeError(f"a_k shape {a_k.shape} != eps_pred shape {eps_pred.shape}")
    i = _check_k(sch, k)
    c1 = 1.0 / sch.sqrt_alpha_bar[i]
    c2 = sch.sqrt_one_minus_alpha_bar[i] / sch.sqrt_alpha_bar[i]
    if a_k.ndim == 2 and np.ndim(c1) == 1:
        c1, c2 = c1[:, None], c2[:, None]
    return c1 * a_k - c2 * eps_pred


def ddpm_reverse_step(sch: NoiseSchedule, eps_pred, a_k, k, z) -> np.ndarray:
    """One reverse sampling step from a^k to a^{k-1}.

    The caller supplies z ~ N(0, I), or zeros at k = 1 (the conventional
    noise-free final step).
    """
    a_k = np.asarray(a_k, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    i = _check_k(sch, k)
    if np.ndim(i) != 0:
        raise ParameterError("ddpm_reverse_step takes a scalar step index")
    coef = sch.beta[i] / sch.sqrt_one_minus_alpha_bar[i]
    return sch.inv_sqrt_alpha[i] * (a_k - coef * eps_pred) + sch.sqrt_beta[i] * z


def posterior_mean(sch: NoiseSchedule, a0, a_k, k) -> np.ndarray:
    """Mean of the forward-process posterior q(a^{k-1} | a^k, a0).

    Independent closed form used as an oracle for the reverse step:
    mu = sqrt(alpha_bar^{k-1}) beta^k / (1-alpha_bar^k) * a0
       + sqrt(alpha^k) (1-alpha_bar^{k-1}) / (1-alpha_bar^k) * a^k.
    """
    a0 = np.asarray(a0, dtype=np.float64)
    a_k = np.asarray(a_k, dtype=np.float64)
    i = int(_check_k(sch, k))
    ab_prev = sch.alpha_bar[i - 1] if i > 0 else 1.0
    ab = sch.alpha_bar[i]
    c0 = np.sqrt(ab_prev) * sch.beta[i] / (1.0 - ab)
    ck = np.sqrt(sch.alpha[i]) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * a0 + ck * a_k
