"""Shared test oracles: analytic predictors and finite-difference gradients."""

import numpy as np

from diffpol import DiffusionPolicy, init_noise_net


def gaussian_oracle(sch, mu: float, sigma: float):
    """Bayes-optimal noise predictor for 1-d data a0 ~ N(mu, sigma^2).

    From the joint Gaussian of (a_k, eps): E[eps | a_k] =
    sqrt(1-ab) * (a_k - sqrt(ab) mu) / (ab sigma^2 + 1 - ab), with ab the
    marginal alpha_bar at the (possibly fractional) step k.
    """
    K = sch.K

    def oracle(a_k, k, s):
        t = np.asarray(k, dtype=np.float64) / K
        ab = np.exp(sch.log_alpha_bar(t))
        if np.ndim(ab) and np.ndim(a_k) == 2:
            ab = ab.reshape(-1, 1)
        return np.sqrt(1.0 - ab) * (a_k - np.sqrt(ab) * mu) / (ab * sigma**2 + 1.0 - ab)

    return oracle


def oracle_policy(sch, mu: float, sigma: float, action_bound: float = 1.0) -> DiffusionPolicy:
    net = init_noise_net(1, 1, np.random.default_rng(0), hidden_dim=4, embed_dim=4)
    return DiffusionPolicy(net, sch, 1, 1, action_bound=action_bound,
                           noise_fn=gaussian_oracle(sch, mu, sigma))


def finite_diff_grads(build_loss, params, h: float = 1e-4):
    """Central finite differences of ``build_loss().value`` w.r.t. every
    parameter entry, mutating ``params`` arrays in place and restoring them."""
    out = []
    for arr in params.arrays():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            lp = build_loss().value
            arr[idx] = orig - h
            lm = build_loss().value
            arr[idx] = orig
            g[idx] = (lp - lm) / (2.0 * h)
        out.append(g)
    return out


def grad_rel_errors(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    a = np.concatenate([g.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


class CountingRng:
    """Wraps a Generator; counts draws (used for determinism bookkeeping)."""

    def __init__(self, seed):
        self.gen = np.random.default_rng(seed)
        self.calls = 0

    def standard_normal(self, *a, **k):
        self.calls += 1
        return self.gen.standard_normal(*a, **k)

    def integers(self, *a, **k):
        self.calls += 1
        return self.gen.integers(*a, **k)

    def uniform(self, *a, **k):
        self.calls += 1
        return self.gen.uniform(*a, **k)

    def random(self, *a, **k):
        self.calls += 1
        return self.gen.random(*a, **k)

    def choice(self, *a, **k):
        self.calls += 1
        return self.gen.choice(*a, **k)
