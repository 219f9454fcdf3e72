"""Parameter registry and the small module zoo shared by every network.

Modules register their tensors into a `ParamSet` under slash-separated
path names at construction time. The registry is the single source of
truth for optimization, checkpointing, freezing, and content digests.
"""

import math

import numpy as np
from scipy.special import ndtri

from . import tensor as T
from .errors import CheckpointError, ConfigurationError, DimensionError
from .rng import fnv1a64, substream


class ParamSet:
    """Insertion-ordered name -> Tensor map."""

    def __init__(self):
        self._items = {}

    def add(self, name: str, t: T.Tensor) -> T.Tensor:
        if name in self._items:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self._items[name] = t
        return t

    def __contains__(self, name):
        return name in self._items

    def __getitem__(self, name) -> T.Tensor:
        return self._items[name]

    def __len__(self):
        return len(self._items)

    def items(self):
        return self._items.items()

    def names(self):
        return list(self._items)

    def tensors(self):
        return list(self._items.values())

    def n_scalars(self) -> int:
        return sum(t.size for t in self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def freeze(self, prefix: str = "") -> None:
        for name, t in self._items.items():
            if name.startswith(prefix):
                t.requires_grad = False

    def trainable(self):
        return [(n, t) for n, t in self._items.items() if t.requires_grad]

    def digest(self, prefix: str = "") -> str:
        """FNV-1a over names and raw bytes; order- and value-exact."""
        h = None
        for name, t in self._items.items():
            if not name.startswith(prefix):
                continue
            h = fnv1a64(name.encode() + b"\0", h) if h is not None else fnv1a64(name.encode() + b"\0")
            h = fnv1a64(np.ascontiguousarray(t.data).tobytes(), h)
        if h is None:
            raise ConfigurationError(f"no parameters under prefix {prefix!r}")
        return f"{h:016x}"

    def state(self) -> dict:
        return {name: t.data.copy() for name, t in self._items.items()}

    def copy_from(self, src: "ParamSet", prefix: str = "") -> int:
        """Copy values for every shared name under prefix; returns the count."""
        copied = 0
        for name, t in self._items.items():
            if name.startswith(prefix) and name in src:
                other = src[name]
                if other.shape != t.shape:
                    raise CheckpointError(f"shape mismatch copying {name}: "
                                          f"{other.shape} vs {t.shape}")
                t.data = other.data.copy()
                copied += 1
        if copied == 0:
            raise ConfigurationError(f"no parameters copied for prefix {prefix!r}")
        return copied

    def load_state(self, state: dict) -> None:
        missing = [n for n in self._items if n not in state]
        extra = [n for n in state if n not in self._items]
        if missing or extra:
            raise CheckpointError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, t in self._items.items():
            arr = np.asarray(state[name], dtype=t.dtype)
            if arr.shape != t.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()


def trunc_normal(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    """Normal(0, std) truncated to +/-2 std via inverse-CDF sampling."""
    lo, hi = 0.02275013194817921, 0.9772498680518208  # Phi(-2), Phi(2)
    u = rng.uniform(lo, hi, size=shape)
    return (std * ndtri(u)).astype(np.float32)


def _init(params: ParamSet, name: str, shape, seed: int, std: float, dtype):
    if std == 0.0:
        data = np.zeros(shape, dtype=dtype)
    elif std < 0.0:  # sentinel for ones (layer-norm gains)
        data = np.ones(shape, dtype=dtype)
    else:
        data = trunc_normal(shape, std, substream(seed, "init/" + name)).astype(dtype)
    return params.add(name, T.Tensor(data, requires_grad=True, dtype=dtype))


class Linear:
    def __init__(self, params: ParamSet, name: str, d_in: int, d_out: int,
                 seed: int, std: float = 0.02, dtype=np.float32):
        self.w = _init(params, name + "/w", (d_in, d_out), seed, std, dtype)
        self.b = _init(params, name + "/b", (d_out,), seed, 0.0, dtype)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.add(T.matmul(x, self.w), self.b)


class MLP:
    """Two affine layers around a GELU; the projector/head shape everywhere."""

    def __init__(self, params: ParamSet, name: str, d_in: int, d_hidden: int,
                 d_out: int, seed: int, std: float = 0.02, dtype=np.float32):
        self.fc1 = Linear(params, name + "/fc1", d_in, d_hidden, seed, std, dtype)
        self.fc2 = Linear(params, name + "/fc2", d_hidden, d_out, seed, std, dtype)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class LayerNorm:
    def __init__(self, params: ParamSet, name: str, d: int, dtype=np.float32):
        self.gamma = _init(params, name + "/gamma", (d,), 0, -1.0, dtype)
        self.beta = _init(params, name + "/beta", (d,), 0, 0.0, dtype)
        self.eps = 1e-5

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class SelfAttention:
    """Multi-head scaled dot-product attention with a fused qkv projection.

    `mask` is additive, broadcast over [B, H, L, L]; None means full
    bidirectional attention.
    """

    def __init__(self, params: ParamSet, name: str, d: int, n_heads: int,
                 seed: int, std: float = 0.02, dtype=np.float32):
        if d % n_heads != 0:
            raise ConfigurationError(f"width {d} not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.qkv = Linear(params, name + "/qkv", d, 3 * d, seed, std, dtype)
        self.proj = Linear(params, name + "/proj", d, d, seed, std, dtype)

    def __call__(self, x: T.Tensor, mask=None) -> T.Tensor:
        bsz, length, d = x.shape
        if d != self.d:
            raise DimensionError(f"attention width {d} vs configured {self.d}")
        qkv = self.qkv(x)
        heads = []
        for i in range(3):
            part = T.narrow(qkv, 2, i * d, d)
            part = T.reshape(part, (bsz, length, self.n_heads, self.d_head))
            heads.append(T.transpose(part, (0, 2, 1, 3)))
        q, k, v = heads
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(self.d_head))
        if mask is not None:
            if not isinstance(mask, T.Tensor):
                mask = T.Tensor(np.asarray(mask, dtype=x.dtype))
            scores = T.add(scores, mask)
        attn = T.softmax(scores, axis=-1)
        out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        return self.proj(T.reshape(out, (bsz, length, d)))


class TransformerBlock:
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x)); mlp hidden 4d."""

    def __init__(self, params: ParamSet, name: str, d: int, n_heads: int,
                 seed: int, std: float = 0.02, dtype=np.float32):
        self.ln1 = LayerNorm(params, name + "/ln1", d, dtype)
        self.attn = SelfAttention(params, name + "/attn", d, n_heads, seed, std, dtype)
        self.ln2 = LayerNorm(params, name + "/ln2", d, dtype)
        self.mlp = MLP(params, name + "/mlp", d, 4 * d, d, seed, std, dtype)

    def __call__(self, x: T.Tensor, mask=None) -> T.Tensor:
        x = T.add(x, self.attn(self.ln1(x), mask))
        return T.add(x, self.mlp(self.ln2(x)))


def lr_at(step: int, total_steps: int, peak_lr: float, schedule: str,
          warmup_ratio: float = 0.03) -> float:
    """Closed-form learning rate at a given step (0-indexed).

    Warmup covers ceil(warmup_ratio * total_steps) steps, rising
    linearly from zero; afterwards the rate is either flat at the peak
    or follows a half-cosine down toward zero at total_steps.
    """
    if total_steps <= 0:
        raise ConfigurationError("total_steps must be positive")
    if schedule not in ("constant_warmup", "cosine_warmup"):
        raise ConfigurationError(f"unknown schedule {schedule!r}")
    warm = math.ceil(warmup_ratio * total_steps)
    if step < warm:
        return peak_lr * step / warm
    if schedule == "constant_warmup":
        return peak_lr
    if total_steps == warm:
        return peak_lr
    frac = (step - warm) / (total_steps - warm)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay on every parameter.

    Both the Adam step and the decay term are scaled by the current
    learning rate, so lr 0 leaves parameters bitwise unchanged (warmup
    step 0 must be a true no-op). Moment buffers are keyed by parameter
    name so optimizer state survives checkpointing.
    """

    def __init__(self, params: ParamSet, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, lr: float = None) -> None:
        if lr is None:
            lr = self.lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.trainable():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float32, copy=False)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - np.float32(lr) * (update + np.float32(self.weight_decay) * p.data)

    def state(self) -> dict:
        out = {"t": self.t}
        for name, m in self.m.items():
            out["m/" + name] = m.copy()
            out["v/" + name] = self.v[name].copy()
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m, self.v = {}, {}
        for key, value in state.items():
            if key.startswith("m/"):
                self.m[key[2:]] = np.asarray(value, dtype=np.float32).copy()
            elif key.startswith("v/"):
                self.v[key[2:]] = np.asarray(value, dtype=np.float32).copy()


def cross_entropy_mean(logits: T.Tensor, labels) -> T.Tensor:
    """Mean negative log-likelihood; labels index the last axis."""
    lp = T.log_softmax(logits, axis=-1)
    return T.scale(T.mean_(T.take_along_last(lp, np.asarray(labels))), -1.0)


def mse_mean(pred: T.Tensor, target) -> T.Tensor:
    diff = T.sub(pred, target if isinstance(target, T.Tensor) else T.Tensor(target, dtype=pred.dtype))
    return T.mean_(T.mul(diff, diff))


def global_grad_norm(params: ParamSet) -> float:
    total = 0.0
    for _, t in params.trainable():
        if t.grad is not None:
            g = t.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return float(np.sqrt(total))


def clip_grad_norm(params: ParamSet, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for _, t in params.trainable():
            if t.grad is not None:
                t.grad = (t.grad * factor).astype(t.grad.dtype)
    return norm
