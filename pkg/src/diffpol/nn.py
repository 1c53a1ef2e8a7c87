"""Small differentiable-network stack used by the policies and critics.

Everything here is a 3-hidden-layer MLP. The noise-prediction network maps
``concat(noisy_action, state, timestep_embedding)`` to a predicted noise
vector; critics map ``concat(state, action)`` (or just ``state``) to a
scalar. Parameters live as float64 arrays whose values are always exactly
float32-representable, so that checkpoints (stored as little-endian float32)
round-trip bitwise and a resumed run reproduces an uninterrupted one.

Conventions:
    - hidden activation: Mish(x) = x * tanh(softplus(x)) by default
    - hidden weight init: uniform(+-sqrt(1/fan_in)), biases zero
    - the noise net's output head may be zero-initialized so an untrained
      policy predicts zero noise
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .errors import FormatError, NumericError, ParameterError, ShapeError

N_HIDDEN = 3


def quantize(x: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, keeping float64 storage."""
    return x.astype(np.float32).astype(np.float64)


def mish(x):
    """Mish activation x * tanh(softplus(x)), stable for |x| up to ~1e3.

    Uses tanh(log(1+u)) = ((1+u)^2 - 1) / ((1+u)^2 + 1) with u = e^x, which
    costs one transcendental; the exponent is capped where the ratio is
    already 1 to double precision.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.exp(np.minimum(x, 40.0))
    w = (1.0 + u) ** 2
    return x * ((w - 1.0) / (w + 1.0))


_FREQ_CACHE: dict = {}


def sinusoidal_embed(k, dim: int) -> np.ndarray:
    """Transformer-style timestep embedding.

    Component 2i is sin(k / 10000^(2i/dim)), component 2i+1 the matching
    cosine. ``k`` may be a scalar or a 1-d array of (possibly fractional)
    step indices; the result has shape (dim,) or (len(k), dim).
    """
    if dim <= 0 or dim % 2 != 0:
        raise ParameterError(f"embedding dim must be a positive even integer, got {dim}")
    k_arr = np.asarray(k, dtype=np.float64)
    if np.any(k_arr < 0):
        raise ParameterError("step index must be non-negative")
    freqs = _FREQ_CACHE.get(dim)
    if freqs is None:
        freqs = np.power(10000.0, 2.0 * np.arange(dim // 2) / dim)
        _FREQ_CACHE[dim] = freqs
    ang = k_arr[..., None] / freqs
    out = np.empty(ang.shape[:-1] + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class MlpParams:
    """Weights/biases of a 3-hidden-layer MLP, in declaration order."""

    weights: list  # [W1..W4], each (out, in)
    biases: list   # [b1..b4], each (out,)
    activation: str = "mish"

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights[0].shape[0]

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_arrays(self, arrays: list):
        if len(arrays) != 2 * len(self.weights):
            raise ShapeError("array count mismatch for MlpParams")
        for i in range(len(self.weights)):
            self.weights[i] = arrays[2 * i]
            self.biases[i] = arrays[2 * i + 1]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)


@dataclass
class NoiseNetParams(MlpParams):
    """MLP predicting corruption noise from (noisy action, state, k-embedding)."""

    action_dim: int = 0
    state_dim: int = 0
    embed_dim: int = 16


@dataclass
class CriticParams(MlpParams):
    """Scalar-output MLP over state(+action) input."""


def _init_layers(dims: list[int], rng: np.random.Generator, zero_head: bool):
    ws, bs = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        if zero_head and i == len(dims) - 2:
            w = np.zeros((fan_out, fan_in))
        else:
            bound = np.sqrt(1.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        ws.append(quantize(w))
        bs.append(np.zeros(fan_out))
    return ws, bs


def init_noise_net(action_dim: int, state_dim: int, rng: np.random.Generator,
                   hidden_dim: int = 64, embed_dim: int = 16,
                   activation: str = "mish", zero_head: bool = True) -> NoiseNetParams:
    in_dim = action_dim + state_dim + embed_dim
    dims = [in_dim] + [hidden_dim] * N_HIDDEN + [action_dim]
    ws, bs = _init_layers(dims, rng, zero_head)
    return NoiseNetParams(ws, bs, activation, action_dim=action_dim,
                          state_dim=state_dim, embed_dim=embed_dim)


def init_critic(in_dim: int, rng: np.random.Generator, hidden_dim: int = 64,
                activation: str = "mish") -> CriticParams:
    dims = [in_dim] + [hidden_dim] * N_HIDDEN + [1]
    ws, bs = _init_layers(dims, rng, zero_head=False)
    return CriticParams(ws, bs, activation)


# ---------------------------------------------------------------------------
# forward passes

_ACTS = {"mish": mish, "relu": lambda x: np.maximum(x, 0.0)}
_TAPE_ACTS = {"mish": tape.mish, "relu": tape.relu}


def mlp_forward(p: MlpParams, x: np.ndarray) -> np.ndarray:
    """Plain (non-differentiable) forward pass; x is (B, in) or (in,)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != p.in_dim:
        raise ShapeError(f"expected input width {p.in_dim}, got {h.shape[-1]}")
    act = _ACTS[p.activation]
    for w, b in zip(p.weights[:-1], p.biases[:-1]):
        h = act(h @ w.T + b)
    h = h @ p.weights[-1].T + p.biases[-1]
    return h[0] if single else h


def mlp_tape_forward(leaves: list[tape.Tensor], x: tape.Tensor,
                     activation: str, check_finite: bool = True) -> tape.Tensor:
    """Differentiable forward pass over leaf tensors [W1,b1,...,W4,b4]."""
    act = _TAPE_ACTS[activation]
    h = x
    n_layers = len(leaves) // 2
    for i in range(n_layers):
        h = tape.linear(h, leaves[2 * i], leaves[2 * i + 1])
        if check_finite and not np.all(np.isfinite(h.data)):
            raise NumericError(f"non-finite output at layer {i + 1} of {n_layers}")
        if i < n_layers - 1:
            h = act(h)
    return h


def param_leaves(p: MlpParams) -> list[tape.Tensor]:
    return [tape.Tensor(a) for a in p.arrays()]


def leaf_grads(leaves: list[tape.Tensor]) -> list[np.ndarray]:
    return [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, arrays: list) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays],
                   [np.zeros_like(a) for a in arrays])


def adam_step(arrays: list, grads: list, st: AdamState, lr: float) -> list:
    """One Adam update with bias correction; returns the new arrays.

    Inputs and outputs are float32-representable float64 arrays; the state
    moments are updated in place (and likewise quantized).
    """
    if lr <= 0:
        raise ParameterError("learning rate must be positive")
    if len(arrays) != len(grads) or any(a.shape != g.shape for a, g in zip(arrays, grads)):
        raise ShapeError("gradient shapes do not mirror parameter shapes")
    st.t += 1
    b1, b2 = st.beta1, st.beta2
    c1 = 1.0 - b1 ** st.t
    c2 = 1.0 - b2 ** st.t
    out = []
    for i, (a, g) in enumerate(zip(arrays, grads)):
        m = b1 * st.m[i] + (1.0 - b1) * g
        v = b2 * st.v[i] + (1.0 - b2) * (g * g)
        st.m[i] = quantize(m)
        st.v[i] = quantize(v)
        step = lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
        out.append(quantize(a - step))
    return out


def global_norm(grads: list) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grad_norm(grads: list, max_norm: float) -> list:
    """Rescale so the global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ParameterError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    s = max_norm / norm
    return [g * s for g in grads]


def polyak_update(target: MlpParams, online: MlpParams, rate: float) -> MlpParams:
    """target <- (1-rate)*target + rate*online, elementwise."""
    if not 0.0 <= rate <= 1.0:
        raise ParameterError("polyak rate must lie in [0, 1]")
    if rate == 0.0:
        return target
    t_arrays = target.arrays()
    o_arrays = online.arrays()
    if any(t.shape != o.shape for t, o in zip(t_arrays, o_arrays)):
        raise ShapeError("target/online parameter shapes differ")
    if rate == 1.0:
        target.set_arrays([o.copy() for o in o_arrays])
        return target
    target.set_arrays([quantize((1.0 - rate) * t + rate * o)
                       for t, o in zip(t_arrays, o_arrays)])
    return target


# ---------------------------------------------------------------------------
# checkpoint file format
#
# magic "EDPC", u16 version, u32 array count, u32 counter count, u32 rng
# stream count; per array u8 ndim + u32 dims; counters as u64; rng streams as
# six u64 words each; then all arrays as little-endian float32 in declaration
# order.

CKPT_MAGIC = b"EDPC"
CKPT_VERSION = 1


def _pack_rng_state(gen: np.random.Generator) -> tuple:
    st = gen.bit_generator.state
    s = st["state"]["state"]
    inc = st["state"]["inc"]
    return (s & (2**64 - 1), s >> 64, inc & (2**64 - 1), inc >> 64,
            int(st["has_uint32"]), int(st["uinteger"]))


def _unpack_rng_state(words: tuple) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": words[0] | (words[1] << 64),
                  "inc": words[2] | (words[3] << 64)},
        "has_uint32": int(words[4]),
        "uinteger": int(words[5]),
    }
    return gen


def save_checkpoint(path, arrays: list, counters: list[int],
                    rngs: list[np.random.Generator] | None = None):
    rngs = rngs or []
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HIII", CKPT_VERSION, len(arrays), len(counters), len(rngs)))
        for a in arrays:
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(struct.pack(f"<{len(counters)}Q", *counters))
        for g in rngs:
            f.write(struct.pack("<6Q", *_pack_rng_state(g)))
        for a in arrays:
            f.write(a.astype("<f4").tobytes())


def _read_exact(f, n: int, what: str):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}", f.tell() - len(buf))
    return buf


def load_checkpoint(path):
    """Returns (arrays, counters, rngs); inverse of :func:`save_checkpoint`."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", 0)
        version, n_arr, n_cnt, n_rng = struct.unpack("<HIII", _read_exact(f, 14, "header"))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 4)
        shapes = []
        for _ in range(n_arr):
            ndim = struct.unpack("<B", _read_exact(f, 1, "manifest"))[0]
            shapes.append(struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "manifest")))
        counters = list(struct.unpack(f"<{n_cnt}Q", _read_exact(f, 8 * n_cnt, "counters")))
        rngs = [_unpack_rng_state(struct.unpack("<6Q", _read_exact(f, 48, "rng state")))
                for _ in range(n_rng)]
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            buf = _read_exact(f, 4 * n, "array data")
            arrays.append(np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape))
        extra = f.read(1)
        if extra:
            raise FormatError("trailing bytes after checkpoint payload", f.tell() - 1)
    return arrays, counters, rngs
