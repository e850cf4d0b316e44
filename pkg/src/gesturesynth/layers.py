"""Transformer building blocks on top of the autodiff engine.

Everything here works on stacked batches: sequences are (B, S, d) and
conditioning vectors are (B, d_cond).  Blocks follow the pre-norm layout with
conditional layer norm: the norm has no learned affine of its own, and a
conditioning vector supplies a per-channel scale and shift through zero-init
heads, so at initialization every block behaves as a vanilla pre-norm block
and the conditioning pathway is exactly neutral.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, gelu, layer_norm, scaled_dot_attention
from .errors import ConfigError, DimensionError


def prefixed(params: dict, prefix: str) -> dict:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class Linear:
    """Affine map with fan-in scaled uniform weights and zero bias."""

    def __init__(self, d_in, d_out, rng, zero_init=False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            limit = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-limit, limit, size=(d_in, d_out))
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b

    def params(self):
        return {"W": self.W, "b": self.b}


def sinusoidal_table(n_positions: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position features, one row per position."""
    if dim % 2 != 0:
        raise ConfigError(f"sinusoidal encoding needs an even dim, got {dim}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    freqs = np.exp(-np.log(10000.0) * np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    angles = pos * freqs[None, :]
    table = np.zeros((n_positions, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def timestep_features(t_values, dim: int) -> np.ndarray:
    """Sinusoidal features of (possibly batched) integer timesteps."""
    t = np.atleast_1d(np.asarray(t_values, dtype=np.float64))
    freqs = np.exp(-np.log(10000.0) * np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class ConditionalNorm:
    """Layer norm whose scale/shift come from a conditioning vector.

    Zero-init heads make the modulation identity (scale 1, shift 0) at
    initialization; with no conditioning vector this is a plain norm.
    """

    def __init__(self, d, d_cond, rng):
        self.scale_head = Linear(d_cond, d, rng, zero_init=True)
        self.shift_head = Linear(d_cond, d, rng, zero_init=True)
        self._gain = Tensor(np.ones(d))
        self._bias = Tensor(np.zeros(d))
        self.d = d

    def __call__(self, x: Tensor, cond) -> Tensor:
        normed = layer_norm(x, self._gain, self._bias)
        if cond is None:
            return normed
        gamma = self.scale_head(cond) + 1.0
        beta = self.shift_head(cond)
        return normed * gamma.reshape(-1, 1, self.d) + beta.reshape(-1, 1, self.d)

    def params(self):
        return {**prefixed(self.scale_head.params(), "scale"),
                **prefixed(self.shift_head.params(), "shift")}


class ScaleShift:
    """Direct feature modulation x * gamma(e) + beta(e), no norm; identity at init."""

    def __init__(self, d, d_cond, rng):
        self.scale_head = Linear(d_cond, d, rng, zero_init=True)
        self.shift_head = Linear(d_cond, d, rng, zero_init=True)
        self.d = d

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        gamma = self.scale_head(cond) + 1.0
        beta = self.shift_head(cond)
        return x * gamma.reshape(-1, 1, self.d) + beta.reshape(-1, 1, self.d)

    def params(self):
        return {**prefixed(self.scale_head.params(), "scale"),
                **prefixed(self.shift_head.params(), "shift")}


class MultiHeadSelfAttention:
    def __init__(self, d, heads, rng):
        if d % heads != 0:
            raise ConfigError(f"model dim {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def _split(self, x: Tensor, s: int) -> Tensor:
        dh = self.d // self.heads
        return x.reshape(-1, s, self.heads, dh).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor) -> Tensor:
        if len(x.shape) != 3:
            raise DimensionError(f"attention input must be (B, S, d), got {x.shape}")
        s = x.shape[1]
        dh = self.d // self.heads
        q, k, v = self._split(self.q(x), s), self._split(self.k(x), s), self._split(self.v(x), s)
        y = scaled_dot_attention(q, k, v, 1.0 / np.sqrt(dh))
        y = y.transpose(0, 2, 1, 3).reshape(-1, s, self.d)
        return self.out(y)

    def params(self):
        return {
            **prefixed(self.q.params(), "q"),
            **prefixed(self.k.params(), "k"),
            **prefixed(self.v.params(), "v"),
            **prefixed(self.out.params(), "out"),
        }


class CrossAttention:
    """Queries from the feature stream, keys/values from a context stream.

    The output projection is added back to the input (residual), so zero
    value weights leave the input untouched.
    """

    def __init__(self, d, d_ctx, heads, rng):
        if d % heads != 0:
            raise ConfigError(f"model dim {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d_ctx, d, rng)
        self.v = Linear(d_ctx, d, rng)
        self.out = Linear(d, d, rng)

    def _split(self, x: Tensor, s: int) -> Tensor:
        dh = self.d // self.heads
        return x.reshape(-1, s, self.heads, dh).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, ctx: Tensor) -> Tensor:
        if len(x.shape) != 3 or len(ctx.shape) != 3:
            raise DimensionError(
                f"cross-attention needs (B, S, d) inputs, got {x.shape} and {ctx.shape}"
            )
        s, s_ctx = x.shape[1], ctx.shape[1]
        dh = self.d // self.heads
        q = self._split(self.q(x), s)
        k = self._split(self.k(ctx), s_ctx)
        v = self._split(self.v(ctx), s_ctx)
        y = scaled_dot_attention(q, k, v, 1.0 / np.sqrt(dh))
        y = y.transpose(0, 2, 1, 3).reshape(-1, s, self.d)
        return x + self.out(y)

    def params(self):
        return {
            **prefixed(self.q.params(), "q"),
            **prefixed(self.k.params(), "k"),
            **prefixed(self.v.params(), "v"),
            **prefixed(self.out.params(), "out"),
        }


class FeedForward:
    def __init__(self, d, rng, mult=4):
        self.up = Linear(d, mult * d, rng)
        self.down = Linear(mult * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))

    def params(self):
        return {**prefixed(self.up.params(), "up"),
                **prefixed(self.down.params(), "down")}


class TransformerBlock:
    """Pre-norm self-attention + feed-forward with conditional norms."""

    def __init__(self, d, heads, d_cond, rng, ffn_mult=4):
        self.norm1 = ConditionalNorm(d, d_cond, rng)
        self.attn = MultiHeadSelfAttention(d, heads, rng)
        self.norm2 = ConditionalNorm(d, d_cond, rng)
        self.ffn = FeedForward(d, rng, mult=ffn_mult)

    def __call__(self, x: Tensor, cond) -> Tensor:
        x = x + self.attn(self.norm1(x, cond))
        return x + self.ffn(self.norm2(x, cond))

    def params(self):
        return {
            **prefixed(self.norm1.params(), "norm1"),
            **prefixed(self.attn.params(), "attn"),
            **prefixed(self.norm2.params(), "norm2"),
            **prefixed(self.ffn.params(), "ffn"),
        }


class TransformerStack:
    def __init__(self, depth, d, heads, d_cond, rng, ffn_mult=4):
        if depth < 1:
            raise ConfigError(f"transformer stack needs depth >= 1, got {depth}")
        self.blocks = [
            TransformerBlock(d, heads, d_cond, rng, ffn_mult=ffn_mult)
            for _ in range(depth)
        ]

    def __call__(self, x: Tensor, cond) -> Tensor:
        for block in self.blocks:
            x = block(x, cond)
        return x

    def params(self):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(prefixed(block.params(), str(i)))
        return out
