"""Small dense networks with hand-written backpropagation and Adam.

Everything works on row batches: inputs are ``(batch, features)`` arrays.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
TANH_EPS = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Mlp:
    """Fully connected network, ReLU between layers, linear output."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, dtype=np.float64):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out).astype(dtype))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def forward(self, x):
        x = np.asarray(x, dtype=self.weights[0].dtype)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input of width {self.sizes[0]}, got shape {x.shape}")
        cache = [x]
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W
            h += b
            if i < last:
                np.maximum(h, 0.0, out=h)
                cache.append(h)
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out, param_grads: bool = True, input_grad: bool = True):
        """Reverse pass. Returns ``(grads, grad_input)``; grads align with :attr:`params`."""
        g = np.asarray(grad_out, dtype=self.weights[0].dtype)
        if g.shape != (cache[0].shape[0], self.sizes[-1]):
            raise ValueError(f"upstream gradient shape {g.shape} does not match output")
        grads = [None] * (2 * len(self.weights)) if param_grads else None
        for i in range(len(self.weights) - 1, -1, -1):
            a_in = cache[i]
            if param_grads:
                grads[2 * i] = a_in.T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            if i == 0 and not input_grad:
                return grads, None
            g = g @ self.weights[i].T
            if i > 0:
                g *= a_in > 0
        return grads, g

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.sizes = self.sizes
        other.weights = [W.copy() for W in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def load_params(self, params):
        for dst, src in zip(self.params, params):
            if dst.shape != src.shape:
                raise ValueError(f"shape mismatch {dst.shape} vs {src.shape}")
            dst[...] = src

    def named_params(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.weight"] = W
            out[f"{prefix}.{i}.bias"] = b
        return out


def mlp_forward(p: Mlp, x):
    return p.forward(x)


def mlp_backward(p: Mlp, cache, upstream):
    return p.backward(cache, upstream)


class PolicyHead:
    """Gaussian policy trunk: one MLP emitting per-action mean and log-std."""

    def __init__(self, obs_dim, act_dim, hidden=(256, 256), rng=None, dtype=np.float64):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.trunk = Mlp([obs_dim, *hidden, 2 * act_dim], rng, dtype)

    @property
    def params(self):
        return self.trunk.params

    def forward(self, s):
        out, cache = self.trunk.forward(s)
        mu = out[:, : self.act_dim]
        raw = out[:, self.act_dim :]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std, (cache, raw)

    def mean_action(self, s):
        mu, _, _ = self.forward(s)
        return np.tanh(mu)

    def copy(self) -> "PolicyHead":
        other = PolicyHead.__new__(PolicyHead)
        other.obs_dim, other.act_dim = self.obs_dim, self.act_dim
        other.trunk = self.trunk.copy()
        return other


def sample_squashed(head: PolicyHead, s, xi):
    """Reparameterized tanh-Gaussian sample.

    Returns ``(a, log_prob, cache)``; ``log_prob`` has one entry per row and
    includes the tanh change-of-variables correction.
    """
    s = np.atleast_2d(s)
    mu, log_std, trunk_cache = head.forward(s)
    xi = np.asarray(xi, dtype=mu.dtype).reshape(s.shape[0], head.act_dim)
    std = np.exp(log_std)
    u = mu + std * xi
    a = np.tanh(u)
    one_minus = 1.0 - a * a
    log_prob = np.sum(-0.5 * xi * xi - log_std - HALF_LOG_2PI - np.log(one_minus + TANH_EPS), axis=1)
    return a, log_prob, (trunk_cache, xi, std, a, one_minus)


def squashed_backward(head: PolicyHead, cache, grad_a=None, grad_logp=None):
    """Parameter gradients of ``sum(grad_a * a) + sum(grad_logp * log_prob)``."""
    (trunk_cache, raw), xi, std, a, one_minus = cache
    grad_u = np.zeros_like(a)
    grad_log_std = np.zeros_like(a)
    if grad_a is not None:
        grad_u += grad_a * one_minus
    if grad_logp is not None:
        g = np.asarray(grad_logp, dtype=a.dtype).reshape(-1, 1)
        # d/du of -log(1 - tanh(u)^2 + eps)
        grad_u += g * (2.0 * a * one_minus / (one_minus + TANH_EPS))
        grad_log_std -= g
    grad_mu = grad_u
    grad_log_std = grad_log_std + grad_u * std * xi
    inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
    grad_out = np.concatenate([grad_mu, grad_log_std * inside], axis=1)
    grads, _ = head.trunk.backward(trunk_cache, grad_out, input_grad=False)
    return grads


class Adam:
    """Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads, ascent: bool = False):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        step_size = self.lr / c1
        sign = -1.0 if ascent else 1.0
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (sign * (1.0 - b1)) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = v / c2
            np.sqrt(denom, out=denom)
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= step_size
            p -= denom

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m{i}"] = m
            out[f"{prefix}.v{i}"] = v
        return out


def adam_step(opt: Adam, p: Mlp, grads, direction: str = "descent"):
    if direction not in ("ascent", "descent"):
        raise ValueError("direction must be 'ascent' or 'descent'")
    opt.step(p.params, grads, ascent=direction == "ascent")
    return p


# --- checkpoint files -----------------------------------------------------
#
# Layout (all integers little-endian):
#   magic   b"VVTENSOR"
#   u32     format version (1)
#   u32     tensor count
#   per tensor:
#     u32   name length, then UTF-8 name bytes
#     u32   rank, then rank x u64 dimensions
#     f64   values, little-endian, C order

MAGIC = b"VVTENSOR"
VERSION = 1


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8", order="C")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError("not a voltvar tensor file")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != VERSION:
        raise ValueError(f"unsupported tensor file version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise ValueError("trailing bytes in tensor file")
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]):
    from .io import atomic_write_bytes

    atomic_write_bytes(path, encode_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())
