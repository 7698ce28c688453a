"""Minimal feed-forward machinery: MLPs, a single-head attention net over
fixed-length windows, bias-corrected Adam, and a diagonal Gaussian policy.

Everything is float64 numpy with hand-written reverse-mode gradients; there
is no autograd. Parameters live in plain arrays so checkpoints are a flat
binary of 64-bit floats plus a JSON sidecar with the shapes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
ADAM_LR = 3e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


class Mlp:
    """Dense net with tanh hidden layers and a linear output layer.

    sizes = [in, h1, ..., out]. Weights are stored (fan_in, fan_out) so the
    forward pass is x @ W + b.
    """

    def __init__(self, sizes, rng: np.random.Generator, out_scale: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for i in range(len(sizes) - 1):
            w = _glorot(rng, sizes[i], sizes[i + 1])
            if i == len(sizes) - 2:
                w = w * out_scale
            self.weights.append(w)
            self.biases.append(np.zeros(sizes[i + 1]))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def forward(self, x: np.ndarray):
        """Returns (y, cache). Accepts (D,) or (B, D)."""
        xb, squeeze = _as_batch(x)
        if xb.shape[1] != self.sizes[0]:
            raise ValueError(
                f"input width {xb.shape[1]} != expected {self.sizes[0]}"
            )
        acts = [xb]
        h = xb
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        y = acts[-1][0] if squeeze else acts[-1]
        return y, (acts, squeeze)

    def backward(self, cache, dy: np.ndarray):
        """Gradients for a forward cache. Returns (grads, dx) where grads
        aligns with params() order."""
        acts, squeeze = cache
        d = np.asarray(dy, dtype=np.float64)
        if squeeze:
            d = d[None, :]
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            a_prev = acts[i]
            grads[2 * i] = a_prev.T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            d = d @ self.weights[i].T
            if i > 0:
                d = d * (1.0 - acts[i] ** 2)
        dx = d[0] if squeeze else d
        return grads, dx

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


class WindowNet:
    """Per-token embedding, one self-attention block with a residual
    connection, then a shared per-token output head.

    Input (B, T, token_dim) -> output (B, T, out_dim). Token order carries
    the time structure; attention lets each slot read the others.
    """

    def __init__(
        self,
        token_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        d_model: int = 64,
        head_hidden: int = 64,
        out_scale: float = 0.01,
    ):
        self.token_dim = token_dim
        self.out_dim = out_dim
        self.d_model = d_model
        self.w_embed = _glorot(rng, token_dim, d_model)
        self.b_embed = np.zeros(d_model)
        self.w_q = _glorot(rng, d_model, d_model)
        self.b_q = np.zeros(d_model)
        self.w_k = _glorot(rng, d_model, d_model)
        self.b_k = np.zeros(d_model)
        self.w_v = _glorot(rng, d_model, d_model)
        self.b_v = np.zeros(d_model)
        self.w_o = _glorot(rng, d_model, d_model)
        self.b_o = np.zeros(d_model)
        self.head = Mlp([d_model, head_hidden, out_dim], rng, out_scale=out_scale)

    def params(self) -> list[np.ndarray]:
        return [
            self.w_embed, self.b_embed,
            self.w_q, self.b_q,
            self.w_k, self.b_k,
            self.w_v, self.b_v,
            self.w_o, self.b_o,
        ] + self.head.params()

    def forward(self, tokens: np.ndarray):
        t = np.asarray(tokens, dtype=np.float64)
        squeeze = t.ndim == 2
        if squeeze:
            t = t[None]
        b, n, d_tok = t.shape
        if d_tok != self.token_dim:
            raise ValueError(f"token width {d_tok} != expected {self.token_dim}")
        x = np.tanh(t @ self.w_embed + self.b_embed)
        q = x @ self.w_q + self.b_q
        k = x @ self.w_k + self.b_k
        v = x @ self.w_v + self.b_v
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(self.d_model)
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        z = attn @ v
        o = z @ self.w_o + self.b_o
        h = x + o
        y, head_cache = self.head.forward(h.reshape(b * n, self.d_model))
        y = y.reshape(b, n, self.out_dim)
        cache = (t, x, q, k, v, attn, z, head_cache, squeeze)
        return (y[0] if squeeze else y), cache

    def backward(self, cache, dy: np.ndarray):
        t, x, q, k, v, attn, z, head_cache, squeeze = cache
        d = np.asarray(dy, dtype=np.float64)
        if squeeze:
            d = d[None]
        b, n, _ = d.shape
        head_grads, dh = self.head.backward(
            head_cache, d.reshape(b * n, self.out_dim)
        )
        dh = dh.reshape(b, n, self.d_model)

        do = dh
        dx = dh.copy()
        dw_o = np.einsum("bti,btj->ij", z, do)
        db_o = do.sum(axis=(0, 1))
        dz = do @ self.w_o.T
        dattn = dz @ v.transpose(0, 2, 1)
        dv = attn.transpose(0, 2, 1) @ dz
        # softmax backward per row
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        ds = ds / np.sqrt(self.d_model)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        dw_q = np.einsum("bti,btj->ij", x, dq)
        db_q = dq.sum(axis=(0, 1))
        dw_k = np.einsum("bti,btj->ij", x, dk)
        db_k = dk.sum(axis=(0, 1))
        dw_v = np.einsum("bti,btj->ij", x, dv)
        db_v = dv.sum(axis=(0, 1))
        dx += dq @ self.w_q.T + dk @ self.w_k.T + dv @ self.w_v.T
        dpre = dx * (1.0 - x ** 2)
        dw_embed = np.einsum("bti,btj->ij", t, dpre)
        db_embed = dpre.sum(axis=(0, 1))
        dtokens = dpre @ self.w_embed.T
        grads = [
            dw_embed, db_embed,
            dw_q, db_q,
            dw_k, db_k,
            dw_v, db_v,
            dw_o, db_o,
        ] + head_grads
        return grads, (dtokens[0] if squeeze else dtokens)

    def __call__(self, tokens: np.ndarray) -> np.ndarray:
        return self.forward(tokens)[0]


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_init(params: list[np.ndarray]) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        t=0,
    )


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float = ADAM_LR,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> AdamState:
    """Bias-corrected Adam, updating params in place. Asserts finiteness."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if not np.all(np.isfinite(p)):
            raise FloatingPointError("non-finite parameter after Adam step")
    return state


class GaussianPolicy:
    """Diagonal Gaussian over actions; mean from a net, per-dimension
    learnable log standard deviations clamped to [LOG_STD_MIN, LOG_STD_MAX].
    """

    def __init__(self, mean_net: Mlp, init_log_std: float | np.ndarray = -0.5):
        self.net = mean_net
        d = mean_net.sizes[-1]
        ls = np.full(d, float(init_log_std)) if np.isscalar(init_log_std) else np.asarray(
            init_log_std, dtype=np.float64
        ).copy()
        self.log_std = np.clip(ls, LOG_STD_MIN, LOG_STD_MAX)

    def params(self) -> list[np.ndarray]:
        return self.net.params() + [self.log_std]

    def clamp_log_std(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return self.net(obs)

    def sample(self, obs: np.ndarray, rng: np.random.Generator):
        mean, _ = self.net.forward(obs)
        std = np.exp(self.log_std)
        noise = rng.standard_normal(mean.shape)
        action = mean + std * noise
        return action, self.log_prob_given_mean(mean, action)

    def log_prob_given_mean(self, mean: np.ndarray, action: np.ndarray) -> np.ndarray:
        z = (action - mean) / np.exp(self.log_std)
        core = z * z + 2.0 * self.log_std + np.log(2.0 * np.pi)
        return -0.5 * core.sum(axis=-1)

    def log_prob(self, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
        return self.log_prob_given_mean(self.net(obs), action)

    def entropy(self) -> float:
        return float(np.sum(self.log_std + 0.5 * np.log(2.0 * np.pi * np.e)))


def forward(p, x):
    """Free-function alias: nets carry their own parameters."""
    return p.forward(x)


def backward(p, cache, dy):
    return p.backward(cache, dy)


def policy_sample(pol: GaussianPolicy, x, rng):
    return pol.sample(x, rng)


def policy_log_prob(pol: GaussianPolicy, x, action):
    return pol.log_prob(x, action)


def policy_entropy(pol: GaussianPolicy) -> float:
    return pol.entropy()


def save_params(params: list[np.ndarray], path: str) -> None:
    """Flat float64 binary at `path`, shapes in `path + '.json'`."""
    flat = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in params])
    flat.tofile(path)
    with open(path + ".json", "w") as fh:
        json.dump({"shapes": [list(p.shape) for p in params]}, fh)


def load_params(path: str) -> list[np.ndarray]:
    with open(path + ".json") as fh:
        shapes = json.load(fh)["shapes"]
    flat = np.fromfile(path, dtype=np.float64)
    out = []
    off = 0
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        out.append(flat[off : off + n].reshape(shape))
        off += n
    if off != flat.size:
        raise ValueError(f"checkpoint size mismatch: {flat.size} vs {off}")
    return out


def assign_params(params: list[np.ndarray], values: list[np.ndarray]) -> None:
    """Copy loaded arrays into live parameter storage, shape-checked."""
    if len(params) != len(values):
        raise ValueError("parameter count mismatch")
    for p, v in zip(params, values):
        if p.shape != tuple(v.shape):
            raise ValueError(f"shape mismatch: {p.shape} vs {v.shape}")
        p[...] = v
