"""Neural building blocks: linear, layer norm, attention, FiLM, TAC,
conformer block, learnable layer-weighted sum and cross-entropy.

Parameters are initialised by a deterministic per-name RNG stream so that
two models sharing a parameter path and seed get bit-identical values
regardless of what else they contain.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """Trainable tensor with a path-like name and a freeze flag.

    Frozen parameters still propagate gradients but receive no updates.
    """

    __slots__ = ("name", "frozen", "init_kind", "fan_in")

    def __init__(self, shape, init_kind: str = "fan_in_uniform", fan_in: int | None = None):
        super().__init__(np.zeros(shape), requires_grad=True)
        self.name = ""
        self.frozen = False
        self.init_kind = init_kind
        self.fan_in = fan_in if fan_in is not None else (shape[-1] if len(shape) > 1 else shape[0])


class Module:
    """Container with recursive, insertion-ordered parameter discovery."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            path = f"{prefix}{key}" if prefix else key
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def initialize(self, seed: int, dtype=np.float64) -> None:
        """Fill every parameter from an RNG keyed by (seed, parameter path)."""
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name: {name}")
            seen.add(name)
            p.name = name
            if p.init_kind == "zeros":
                p.data = np.zeros(p.data.shape, dtype=dtype)
            elif p.init_kind == "fan_in_uniform":
                rng = np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(name.encode()))))
                bound = 1.0 / np.sqrt(p.fan_in)
                p.data = rng.uniform(-bound, bound, size=p.data.shape).astype(dtype)
            else:
                raise ValueError(f"unknown init kind: {p.init_kind}")
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_frozen(self, frozen: bool) -> None:
        for p in self.parameters():
            p.frozen = frozen


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, init: str = "fan_in_uniform", bias: bool = True):
        self.w = Parameter((d_in, d_out), init_kind=init, fan_in=d_in)
        if bias:
            self.b = Parameter((d_out,), init_kind="zeros")
        else:
            self.b = None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.w.shape[0]:
            raise ValueError(f"linear expects trailing dim {self.w.shape[0]}, got {x.shape[-1]}")
        y = T.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        # gain stored as offset from 1 so zero init gives an identity affine
        self.gain = Parameter((d,), init_kind="zeros")
        self.bias = Parameter((d,), init_kind="zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.tmean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = T.tmean(T.mul(centered, centered), axis=-1, keepdims=True)
        normed = T.mul(centered, T.power(var + self.eps, -0.5))
        return T.mul(normed, self.gain + 1.0) + self.bias


class Dropout(Module):
    """Inverted dropout with an explicit seeded RNG; inactive at rate 0."""

    def __init__(self, rate: float = 0.0):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.training = False
        self.rng = np.random.default_rng(0)

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        mask = (self.rng.random(x.shape) < keep).astype(x.data.dtype) / keep
        return T.mul(x, Tensor(mask))


class SelfAttention(Module):
    """Multi-head scaled-dot self-attention over the time axis.

    Accepts (T, d) or batched (..., T, d); heads share the batch dims.
    """

    def __init__(self, d: int, heads: int):
        if d % heads != 0:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.wq = Linear(d, d)
        # a key bias adds a per-query constant to all scores, which softmax
        # cancels exactly; omit it
        self.wk = Linear(d, d, bias=False)
        self.wv = Linear(d, d)
        self.wo = Linear(d, d)

    def _split(self, x: Tensor) -> Tensor:
        # (..., T, d) -> (..., heads, T, d/h)
        t = x.shape[-2]
        new_shape = x.shape[:-1] + (self.heads, self.d // self.heads)
        return T.swapaxes(T.reshape(x, new_shape), -2, -3)

    def __call__(self, x: Tensor) -> Tensor:
        t = x.shape[-2]
        q = self._split(self.wq(x))
        k = self._split(self.wk(x))
        v = self._split(self.wv(x))
        scale = 1.0 / np.sqrt(self.d // self.heads)
        scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), scale)
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)  # (..., heads, T, d/h)
        merged = T.reshape(T.swapaxes(ctx, -2, -3), x.shape[:-1] + (self.d,))
        return self.wo(merged)


class FeedForward(Module):
    def __init__(self, d: int, mult: int = 4):
        self.lin1 = Linear(d, d * mult)
        self.lin2 = Linear(d * mult, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.gelu(self.lin1(x)))


class Film(Module):
    """Feature-wise linear modulation: y = (1 + gamma(c)) * x + beta(c).

    Both maps are zero-initialised, so an untrained FiLM is an exact
    identity regardless of the conditioning signal.
    """

    def __init__(self, d: int, d_cond: int):
        self.gamma = Linear(d_cond, d, init="zeros")
        self.beta = Linear(d_cond, d, init="zeros")

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        if x.shape[-2] != cond.shape[-2]:
            raise ValueError(
                f"FiLM time mismatch: x has {x.shape[-2]} frames, cond has {cond.shape[-2]}"
            )
        return T.mul(x, self.gamma(cond) + 1.0) + self.beta(cond)


class Tac(Module):
    """Transform-average-concatenate exchange across parallel streams.

    Input is a stacked (n_streams, T, d) tensor; weights are shared across
    streams, so the layer is equivariant to stream permutation.
    """

    def __init__(self, d: int, hidden: int | None = None):
        h = hidden if hidden is not None else d
        self.f1 = Linear(d, h)
        self.f2 = Linear(h, h)
        self.g1 = Linear(d + h, h)
        self.g2 = Linear(h, d)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[0] < 1:
            raise ValueError("TAC expects a stacked (n_streams, T, d) input with n_streams >= 1")
        z = self.f2(T.gelu(self.f1(x)))
        pooled = T.tmean(z, axis=0, keepdims=True)  # (1, T, h)
        pooled = T.broadcast_to(pooled, (x.shape[0],) + pooled.shape[1:])
        joint = T.concat([x, pooled], axis=-1)
        return x + self.g2(T.gelu(self.g1(joint)))


class DepthwiseConv1d(Module):
    """Depthwise temporal convolution with same-length zero padding."""

    def __init__(self, d: int, kernel: int = 9):
        if kernel % 2 != 1:
            raise ValueError("kernel width must be odd")
        self.kernel = kernel
        self.w = Parameter((kernel, d), fan_in=kernel)
        self.b = Parameter((d,), init_kind="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        t = x.shape[-2]
        half = self.kernel // 2
        pad_shape = x.shape[:-2] + (half, x.shape[-1])
        zeros = Tensor(np.zeros(pad_shape, dtype=x.data.dtype))
        padded = T.concat([zeros, x, zeros], axis=-2)
        taps = []
        for k in range(self.kernel):
            sl = [slice(None)] * padded.ndim
            sl[-2] = slice(k, k + t)
            taps.append(T.mul(padded[tuple(sl)], self.w[k]))
        out = taps[0]
        for tap in taps[1:]:
            out = out + tap
        return out + self.b


class ConformerConvModule(Module):
    def __init__(self, d: int, kernel: int = 9):
        self.norm = LayerNorm(d)
        self.pointwise_in = Linear(d, 2 * d)  # GLU halves back to d
        self.depthwise = DepthwiseConv1d(d, kernel)
        self.pointwise_out = Linear(d, d)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.pointwise_in(self.norm(x))
        d = h.shape[-1] // 2
        sl_a = [slice(None)] * h.ndim
        sl_b = [slice(None)] * h.ndim
        sl_a[-1] = slice(0, d)
        sl_b[-1] = slice(d, 2 * d)
        gated = T.mul(h[tuple(sl_a)], T.sigmoid(h[tuple(sl_b)]))
        return self.pointwise_out(T.silu(self.depthwise(gated)))


class ConformerBlock(Module):
    """Half-step FF, self-attention, depthwise conv module, half-step FF,
    final layer norm; every sub-block residual."""

    def __init__(self, d: int, heads: int, ff_mult: int = 4, kernel: int = 9, dropout: float = 0.0):
        self.ff1 = FeedForward(d, ff_mult)
        self.norm_ff1 = LayerNorm(d)
        self.attn = SelfAttention(d, heads)
        self.norm_attn = LayerNorm(d)
        self.conv = ConformerConvModule(d, kernel)
        self.ff2 = FeedForward(d, ff_mult)
        self.norm_ff2 = LayerNorm(d)
        self.norm_out = LayerNorm(d)
        self.drop = Dropout(dropout)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + T.mul(self.drop(self.ff1(self.norm_ff1(x))), 0.5)
        x = x + self.drop(self.attn(self.norm_attn(x)))
        x = x + self.drop(self.conv(x))
        x = x + T.mul(self.drop(self.ff2(self.norm_ff2(x))), 0.5)
        return self.norm_out(x)


class WeightedLayerSum(Module):
    """Convex combination of stacked layer outputs via softmaxed logits."""

    def __init__(self, n_layers: int):
        if n_layers < 1:
            raise ValueError("need at least one layer")
        self.logits = Parameter((n_layers,), init_kind="zeros")

    def __call__(self, layers: list[Tensor]) -> Tensor:
        if len(layers) != self.logits.shape[0]:
            raise ValueError("layer count does not match logits")
        w = T.softmax(T.reshape(self.logits, (1, -1)), axis=-1)
        out = T.mul(layers[0], w[0, 0])
        for i in range(1, len(layers)):
            out = out + T.mul(layers[i], w[0, i])
        return out


def sinusoidal_encoding(t: int, d: int, dtype=np.float64) -> np.ndarray:
    """Classic absolute sinusoidal positions, shape (t, d)."""
    pe = np.zeros((t, d), dtype=dtype)
    position = np.arange(t, dtype=dtype)[:, None]
    div = np.exp(np.arange(0, d, 2, dtype=dtype) * (-np.log(10000.0) / d))
    pe[:, 0::2] = np.sin(position * div)
    pe[:, 1::2] = np.cos(position * div[: pe[:, 1::2].shape[1]])
    return pe


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over frames of -log softmax(logits)[target], max-stabilised."""
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {targets.shape}")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError("target class out of range")
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[(np.arange(n), targets)]
    return T.mul(T.tmean(picked), -1.0)
