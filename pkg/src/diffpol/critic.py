"""Value estimation: double Q critics, the TD objective, expectile machinery.

The TD target bootstraps from the elementwise minimum of two target critics,

    y = r + (1 - done) * gamma * min(Q1_t(s', a'), Q2_t(s', a')),

with the next action drawn from the current policy. The expectile loss
L2_tau(x) = |tau - 1(x < 0)| x^2 lets a state-value net approximate an upper
expectile of Q without ever querying out-of-dataset actions; the matching Q
regression then bootstraps from V(s') instead of a sampled action.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import ParameterError, ShapeError
from .nn import CriticParams, init_critic, mlp_forward, mlp_tape_forward, param_leaves
from .policy import DiffusionPolicy, LossGraph, SamplerConfig, eval_sample


@dataclass
class DoubleQ:
    q1: CriticParams
    q2: CriticParams
    q1_target: CriticParams
    q2_target: CriticParams

    @classmethod
    def create(cls, state_dim: int, action_dim: int, rng: np.random.Generator,
               hidden_dim: int = 64, activation: str = "mish") -> "DoubleQ":
        q1 = init_critic(state_dim + action_dim, rng, hidden_dim, activation)
        q2 = init_critic(state_dim + action_dim, rng, hidden_dim, activation)
        return cls(q1, q2, q1.copy(), q2.copy())


@dataclass
class ValueFunction:
    v: CriticParams

    @classmethod
    def create(cls, state_dim: int, rng: np.random.Generator, hidden_dim: int = 64,
               activation: str = "mish") -> "ValueFunction":
        return cls(init_critic(state_dim, rng, hidden_dim, activation))


def critic_value(p: CriticParams, s: np.ndarray, a: np.ndarray | None = None) -> np.ndarray:
    """Scalar critic output per row; concatenates the action when given."""
    x = np.asarray(s, dtype=np.float64)
    if a is not None:
        x = np.concatenate([x, np.asarray(a, dtype=np.float64)], axis=-1)
    return mlp_forward(p, x)[..., 0]


def min_q(dq: DoubleQ, s, a, use_target: bool = False) -> np.ndarray:
    """Elementwise minimum of the two critics (online or target set)."""
    if use_target:
        return np.minimum(critic_value(dq.q1_target, s, a), critic_value(dq.q2_target, s, a))
    return np.minimum(critic_value(dq.q1, s, a), critic_value(dq.q2, s, a))


def _critic_tape(p: CriticParams, leaves, s, a):
    x = np.concatenate([s, a], axis=-1) if a is not None else s
    out = mlp_tape_forward(leaves, tape.Tensor(x), p.activation)
    return tape.tsum(out, axis=1)  # (B, 1) -> (B,)


def td_loss(dq: DoubleQ, pol: DiffusionPolicy, batch, cfg: SamplerConfig, gamma: float,
            rng: np.random.Generator, num_next_actions: int = 1) -> LossGraph:
    """Squared TD error against the double-target bootstrap, summed over both
    critics and averaged over the batch. The target has no gradient.

    ``num_next_actions`` > 1 takes the max of the target min-Q over several
    sampled next actions (parity option; the default follows the single-draw
    backup).
    """
    if not 0.0 <= gamma < 1.0:
        raise ParameterError(f"discount must lie in [0, 1), got {gamma}")
    if num_next_actions < 1:
        raise ParameterError("num_next_actions must be >= 1")
    s, a, r, s2, done = (np.asarray(x, dtype=np.float64) for x in batch)
    B = s.shape[0]
    if num_next_actions == 1:
        a2 = eval_sample(pol, s2, cfg, rng)
        boot = min_q(dq, s2, a2, use_target=True)
    else:
        tiled = np.repeat(s2, num_next_actions, axis=0)
        a2 = eval_sample(pol, tiled, cfg, rng)
        boot = min_q(dq, tiled, a2, use_target=True).reshape(B, num_next_actions).max(axis=1)
    y = r + (1.0 - done) * gamma * boot
    l1 = param_leaves(dq.q1)
    l2 = param_leaves(dq.q2)
    q1 = _critic_tape(dq.q1, l1, s, a)
    q2 = _critic_tape(dq.q2, l2, s, a)
    e1 = tape.square(tape.sub(tape.Tensor(y), q1))
    e2 = tape.square(tape.sub(tape.Tensor(y), q2))
    node = tape.tmean(tape.add(e1, e2))
    return LossGraph(node, {"q1": l1, "q2": l2})


def expectile_loss(x, tau_e: float):
    """Asymmetric squared loss |tau - 1(x < 0)| * x^2 (elementwise)."""
    if not 0.0 < tau_e < 1.0:
        raise ParameterError(f"expectile must lie in (0, 1), got {tau_e}")
    x = np.asarray(x, dtype=np.float64)
    w = np.where(x >= 0.0, tau_e, 1.0 - tau_e)
    return w * x * x


def iql_value_loss(vf: ValueFunction, dq: DoubleQ, batch, tau_e: float) -> LossGraph:
    """Expectile regression of V(s) onto the target min-Q of dataset actions.

    Gradients reach only the value net; the critics enter as constants.
    """
    if not 0.0 < tau_e < 1.0:
        raise ParameterError(f"expectile must lie in (0, 1), got {tau_e}")
    s, a = (np.asarray(x, dtype=np.float64) for x in batch[:2])
    q = min_q(dq, s, a, use_target=True)
    lv = param_leaves(vf.v)
    v = _critic_tape(vf.v, lv, s, None)
    resid = tape.sub(tape.Tensor(q), v)
    w = np.where(resid.data >= 0.0, tau_e, 1.0 - tau_e)  # constant by the time of backward
    node = tape.tmean(tape.mul(tape.Tensor(w), tape.square(resid)))
    return LossGraph(node, {"v": lv})


def iql_q_loss(dq: DoubleQ, vf: ValueFunction, batch, gamma: float) -> LossGraph:
    """Both critics regress to r + (1-done)*gamma*V(s'); V is detached."""
    if not 0.0 <= gamma < 1.0:
        raise ParameterError(f"discount must lie in [0, 1), got {gamma}")
    s, a, r, s2, done = (np.asarray(x, dtype=np.float64) for x in batch)
    y = r + (1.0 - done) * gamma * critic_value(vf.v, s2)
    l1 = param_leaves(dq.q1)
    l2 = param_leaves(dq.q2)
    q1 = _critic_tape(dq.q1, l1, s, a)
    q2 = _critic_tape(dq.q2, l2, s, a)
    node = tape.tmean(tape.add(tape.square(tape.sub(tape.Tensor(y), q1)),
                               tape.square(tape.sub(tape.Tensor(y), q2))))
    return LossGraph(node, {"q1": l1, "q2": l2})
