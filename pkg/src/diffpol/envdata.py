"""Synthetic desk-scale tasks, behavior datasets and the dataset file format.

Two environments with analytically known optima stand in for large physics
benchmarks:

    bimodal-bandit  one-step task; reward is a two-peak Gaussian mixture over
                    the action box with unequal peak heights, so good data is
                    genuinely multimodal and "pick the better mode" is
                    measurable. States are uniform and do not move the modes.
    point-mass      position in [-1,1]^2, velocity actions, s' = clamp(s + 0.1 a),
                    reward -||s' - goal||^2, 40-step episodes.

Datasets are immutable float32 arrays of (s, a, r, s', done) transitions
generated by scripted behavior mixtures, so data quality is controllable and
reproducible from a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, ParameterError, ShapeError

import struct

ENV_KINDS = ("bimodal-bandit", "point-mass")

STD_FLOOR = 1e-3


@dataclass
class SyntheticEnv:
    kind: str
    state_dim: int = 2
    action_dim: int = 2
    action_bound: float = 1.0
    episode_len: int = 1
    # bandit parameters
    mode_centers: np.ndarray | None = None   # (2, action_dim)
    mode_heights: tuple = (1.0, 0.6)
    mode_width: float = 0.15
    # point-mass parameters
    goal: np.ndarray | None = None
    step_size: float = 0.1
    # diagnostics
    clamp_warnings: int = 0
    _anchors: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ParameterError(f"unknown env kind {self.kind!r}; expected one of {ENV_KINDS}")


def make_env(kind: str, **overrides) -> SyntheticEnv:
    if kind == "bimodal-bandit":
        env = SyntheticEnv(kind=kind, state_dim=2, action_dim=2, episode_len=1)
        env.mode_centers = np.array([[0.6, 0.6], [-0.6, -0.6]])
    elif kind == "point-mass":
        env = SyntheticEnv(kind=kind, state_dim=2, action_dim=2, episode_len=40)
        env.goal = np.array([0.5, 0.5])
    else:
        raise ParameterError(f"unknown env kind {kind!r}; expected one of {ENV_KINDS}")
    for name, val in overrides.items():
        if not hasattr(env, name):
            raise ParameterError(f"unknown env parameter {name!r}")
        setattr(env, name, val)
    return env


def bandit_reward(env: SyntheticEnv, a: np.ndarray) -> np.ndarray:
    """Mixture value h1*exp(-||a-m1||^2/2w^2) + h2*exp(-||a-m2||^2/2w^2)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    r = np.zeros(a.shape[0])
    for center, height in zip(env.mode_centers, env.mode_heights):
        d2 = np.sum((a - center) ** 2, axis=1)
        r += height * np.exp(-d2 / (2.0 * env.mode_width**2))
    return r


def reset_env(env: SyntheticEnv, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    s = rng.uniform(-1.0, 1.0, size=(n, env.state_dim))
    return s[0] if n == 1 else s


def env_step(env: SyntheticEnv, s, a, rng: np.random.Generator, t: int = 0):
    """Deterministic dynamics; returns (s', r, done).

    Out-of-bounds actions are clamped and counted in ``env.clamp_warnings``.
    ``t`` is the 0-based step index within the episode (drives ``done`` for
    the episodic task). The rng argument is reserved for stochastic kinds.
    """
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != env.action_dim:
        raise ShapeError(f"action width {a.shape[-1]} != {env.action_dim}")
    if np.any(np.abs(a) > env.action_bound + 1e-12):
        env.clamp_warnings += 1
        a = np.clip(a, -env.action_bound, env.action_bound)
    if env.kind == "bimodal-bandit":
        r = bandit_reward(env, a)
        r = float(r[0]) if s.ndim == 1 else r
        return s.copy(), r, True
    s2 = np.clip(s + env.step_size * a, -1.0, 1.0)
    d2 = np.sum((s2 - env.goal) ** 2, axis=-1)
    r = -d2 if s.ndim > 1 else float(-d2)
    return s2, r, t + 1 >= env.episode_len


def greedy_action(env: SyntheticEnv, s) -> np.ndarray:
    """The scripted expert: bandit argmax action / straight line to the goal."""
    if env.kind == "bimodal-bandit":
        a = _bandit_argmax(env)
        return np.broadcast_to(a, np.shape(s)[:-1] + a.shape).copy()
    gap = env.goal - np.asarray(s, dtype=np.float64)
    return np.clip(gap / env.step_size, -env.action_bound, env.action_bound)


def _bandit_argmax(env: SyntheticEnv) -> np.ndarray:
    """Dense grid search along the segment through both modes plus a local
    box refinement around the best candidate (resolution 1e-3)."""
    m1, m2 = env.mode_centers
    ts = np.linspace(-0.5, 1.5, 2001)
    pts = m2 + ts[:, None] * (m1 - m2)
    pts = np.clip(pts, -env.action_bound, env.action_bound)
    best = pts[np.argmax(bandit_reward(env, pts))]
    span = 2.0 * env.mode_width
    grid_1d = np.linspace(-span, span, int(2 * span / 1e-3) + 1)
    off = np.stack(np.meshgrid(*([grid_1d] * env.action_dim), indexing="ij"),
                   axis=-1).reshape(-1, env.action_dim)
    cand = np.clip(best + off, -env.action_bound, env.action_bound)
    return cand[np.argmax(bandit_reward(env, cand))]


def rollout_return(env: SyntheticEnv, policy_fn, rng: np.random.Generator,
                   episodes: int) -> np.ndarray:
    """Undiscounted episode returns under ``policy_fn(states) -> actions``.

    Episodes are rolled out in parallel as batched array ops.
    """
    if episodes < 1:
        raise ParameterError("episodes must be >= 1")
    s = reset_env(env, rng, episodes)
    s = np.atleast_2d(s)
    total = np.zeros(episodes)
    for t in range(env.episode_len):
        a = policy_fn(s)
        s, r, _ = env_step(env, s, a, rng, t)
        total += r
    return total


def optimal_score(env: SyntheticEnv, episodes: int = 10_000, seed: int = 12345) -> tuple:
    """(random_score, expert_score) anchors for score normalization.

    Monte-Carlo return of the uniform-random policy, and the return of the
    scripted expert (grid-search argmax for the bandit, greedy line-to-goal
    for the point mass). Cached on the env instance.
    """
    if env._anchors is not None:
        return env._anchors
    rng = np.random.default_rng(seed)

    def random_pi(s):
        return rng.uniform(-env.action_bound, env.action_bound,
                           size=(s.shape[0], env.action_dim))

    rand = float(np.mean(rollout_return(env, random_pi, rng, episodes)))
    expert = float(np.mean(rollout_return(env, lambda s: greedy_action(env, s),
                                          rng, episodes)))
    env._anchors = (rand, expert)
    return env._anchors


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class OfflineDataset:
    states: np.ndarray       # (N, ds) float32
    actions: np.ndarray      # (N, da) float32
    rewards: np.ndarray      # (N,)    float32
    next_states: np.ndarray  # (N, ds) float32
    dones: np.ndarray        # (N,)    float32 in {0, 1}
    action_bound: float = 1.0
    stats: tuple | None = None   # (mean, std) of the raw states, float64

    def __post_init__(self):
        if len(self.states) == 0:
            raise ParameterError("dataset must be nonempty")
        n = len(self.states)
        for arr in (self.actions, self.rewards, self.next_states, self.dones):
            if len(arr) != n:
                raise ShapeError("dataset arrays disagree in length")
        for arr in (self.states, self.actions, self.rewards, self.next_states, self.dones):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def batch(self, idx):
        return (self.states[idx].astype(np.float64),
                self.actions[idx].astype(np.float64),
                self.rewards[idx].astype(np.float64),
                self.next_states[idx].astype(np.float64),
                self.dones[idx].astype(np.float64))


def _f32(x):
    return np.asarray(x, dtype=np.float32)


BANDIT_BEHAVIORS = ("mode0", "mode1", "uniform")
POINTMASS_BEHAVIORS = ("greedy", "noisy", "uniform")


def generate_dataset(env: SyntheticEnv, mix: dict, n: int, seed: int,
                     mode_std: float | None = None, noisy_sigma: float = 0.5,
                     eps_uniform: float = 0.1) -> OfflineDataset:
    """Roll out a mixture of scripted behavior policies.

    ``mix`` maps behavior names to weights summing to 1. Bandit behaviors
    sample around a mode (std ``mode_std``, default width/4) or uniformly;
    point-mass behaviors are greedy, noisy-greedy (Gaussian ``noisy_sigma``
    plus ``eps_uniform`` chance of a uniform action), or uniform. The episodic
    task picks one behavior per episode.
    """
    if n < 1:
        raise ParameterError("dataset size must be >= 1")
    names = list(mix.keys())
    weights = np.array([mix[k] for k in names], dtype=np.float64)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ParameterError("mixture weights must be non-negative and sum to 1")
    valid = BANDIT_BEHAVIORS if env.kind == "bimodal-bandit" else POINTMASS_BEHAVIORS
    for name in names:
        if name not in valid:
            raise ParameterError(f"unknown behavior {name!r} for {env.kind}; expected {valid}")
    rng = np.random.default_rng(seed)
    bound = env.action_bound

    if env.kind == "bimodal-bandit":
        std = env.mode_width / 4.0 if mode_std is None else mode_std
        comp = rng.choice(len(names), size=n, p=weights)
        s = reset_env(env, rng, n).reshape(n, env.state_dim)
        a = rng.uniform(-bound, bound, size=(n, env.action_dim))
        for j, name in enumerate(names):
            rows = comp == j
            if name == "uniform" or not np.any(rows):
                continue
            center = env.mode_centers[0] if name == "mode0" else env.mode_centers[1]
            a[rows] = center + std * rng.standard_normal((int(rows.sum()), env.action_dim))
        a = np.clip(a, -bound, bound)
        r = bandit_reward(env, a)
        return OfflineDataset(_f32(s), _f32(a), _f32(r), _f32(s),
                              _f32(np.ones(n)), action_bound=bound)

    rows = {k: [] for k in ("s", "a", "r", "s2", "d")}
    count = 0
    while count < n:
        name = names[int(rng.choice(len(names), p=weights))]
        s = reset_env(env, rng)
        for t in range(env.episode_len):
            if name == "uniform" or (name == "noisy" and rng.random() < eps_uniform):
                a = rng.uniform(-bound, bound, size=env.action_dim)
            else:
                a = greedy_action(env, s)
                if name == "noisy":
                    a = np.clip(a + noisy_sigma * rng.standard_normal(env.action_dim),
                                -bound, bound)
            s2, r, done = env_step(env, s, a, rng, t)
            rows["s"].append(s)
            rows["a"].append(a)
            rows["r"].append(r)
            rows["s2"].append(s2)
            rows["d"].append(1.0 if done else 0.0)
            s = s2
            count += 1
            if count >= n:
                break
    return OfflineDataset(_f32(rows["s"]), _f32(rows["a"]), _f32(rows["r"]),
                          _f32(rows["s2"]), _f32(rows["d"]), action_bound=bound)


def normalize_states(ds: OfflineDataset) -> OfflineDataset:
    """Standardize states per dimension (std floored at 1e-3); the raw-state
    mean/std are recorded for evaluation-time application."""
    s64 = ds.states.astype(np.float64)
    mean = s64.mean(axis=0)
    std = np.maximum(s64.std(axis=0), STD_FLOOR)
    from .nn import quantize
    mean, std = quantize(mean), quantize(std)
    return OfflineDataset(
        _f32((s64 - mean) / std),
        ds.actions.copy(),
        ds.rewards.copy(),
        _f32((ds.next_states.astype(np.float64) - mean) / std),
        ds.dones.copy(),
        action_bound=ds.action_bound,
        stats=(mean, std),
    )


# ---------------------------------------------------------------------------
# file format: magic "EDPD", u16 version, header {state_dim u32, action_dim
# u32, count u64, flags u32 (bit 0 = stats present)}, optional stats block
# (mean then std, float32 per state dim), then count records of float32
# [s | a | r | s' | done], all little-endian.

DATA_MAGIC = b"EDPD"
DATA_VERSION = 1


def save_dataset(ds: OfflineDataset, path):
    flags = 1 if ds.stats is not None else 0
    rec = np.concatenate([ds.states, ds.actions, ds.rewards[:, None],
                          ds.next_states, ds.dones[:, None]], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(DATA_MAGIC)
        f.write(struct.pack("<HIIQI", DATA_VERSION, ds.state_dim, ds.action_dim,
                            len(ds), flags))
        if ds.stats is not None:
            f.write(np.asarray(ds.stats[0], dtype="<f4").tobytes())
            f.write(np.asarray(ds.stats[1], dtype="<f4").tobytes())
        f.write(rec.tobytes())


def load_dataset(path, action_bound: float = 1.0) -> OfflineDataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATA_MAGIC:
            raise FormatError(f"bad dataset magic {magic!r}", 0)
        head = f.read(22)
        if len(head) != 22:
            raise FormatError("truncated dataset header", 4 + len(head))
        version, sd, ad, count, flags = struct.unpack("<HIIQI", head)
        if version != DATA_VERSION:
            raise FormatError(f"unsupported dataset version {version}", 4)
        stats = None
        if flags & 1:
            buf = f.read(8 * sd)
            if len(buf) != 8 * sd:
                raise FormatError("truncated stats block", f.tell() - len(buf))
            mean = np.frombuffer(buf[:4 * sd], dtype="<f4").astype(np.float64)
            std = np.frombuffer(buf[4 * sd:], dtype="<f4").astype(np.float64)
            stats = (mean, std)
        width = 2 * sd + ad + 2
        need = 4 * width * count
        buf = f.read(need)
        if len(buf) != need:
            raise FormatError(
                f"truncated dataset records (expected {need} bytes, got {len(buf)})",
                f.tell() - len(buf))
        if f.read(1):
            raise FormatError("trailing bytes after dataset records", f.tell() - 1)
    rec = np.frombuffer(buf, dtype="<f4").reshape(count, width)
    return OfflineDataset(
        rec[:, :sd].copy(),
        rec[:, sd:sd + ad].copy(),
        rec[:, sd + ad].copy(),
        rec[:, sd + ad + 1:2 * sd + ad + 1].copy(),
        rec[:, -1].copy(),
        action_bound=action_bound,
        stats=stats,
    )
