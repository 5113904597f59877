"""Layers, losses, optimizer, and checkpoint IO shared by both models.

Everything here operates on per-example 2-d tensors (sequence x feature);
batching is done by the training loops with gradient accumulation.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .autodiff import Tensor, concat, default_dtype
from .errors import (
    AllMasked,
    InvalidToken,
    OddDimension,
    ShapeMismatch,
)

CHECKPOINT_MAGIC = b"FSIC"
CHECKPOINT_VERSION = 1


class Module:
    """Parameter container with recursive discovery."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = set(own) ^ set(state)
            raise ShapeMismatch(f"parameter name mismatch: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeMismatch(f"{name}: expected {p.data.shape}, got {arr.shape}")
            p.data = arr.copy()


def _uniform_init(rng, fan_in, shape):
    bound = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng):
        self.weight = _uniform_init(rng, d_in, (d_in, d_out))
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered * (var + self.eps) ** -0.5
        return normed * self.gamma + self.beta


def dropout(x, p, rng, training):
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return x * Tensor(keep)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over per-example sequences.

    d_model need not be divisible by heads: q/k/v are projected to
    heads * (d_model // heads) dims and the output projection maps back.
    """

    def __init__(self, d_model, heads, rng):
        self.heads = heads
        self.head_dim = d_model // heads
        inner = heads * self.head_dim
        self.wq = Linear(d_model, inner, rng)
        self.wk = Linear(d_model, inner, rng)
        self.wv = Linear(d_model, inner, rng)
        self.wo = Linear(inner, d_model, rng)

    def __call__(self, queries, keys, values, mask=None, causal=False):
        """`mask`: boolean per key slot, True = attendable. `causal`: also
        forbid attending to keys beyond the query position."""
        lq, lk = queries.shape[0], keys.shape[0]
        valid = np.ones((lq, lk), dtype=bool)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (lk,):
                raise ShapeMismatch(f"mask shape {mask.shape} != ({lk},)")
            valid &= mask[None, :]
        if causal:
            valid &= np.tril(np.ones((lq, lk), dtype=bool))
        if not valid.any(axis=1).all():
            raise AllMasked("some query has no attendable key")

        h, dh = self.heads, self.head_dim
        q = self.wq(queries).reshape(lq, h, dh).transpose(1, 0, 2)
        k = self.wk(keys).reshape(lk, h, dh).transpose(1, 0, 2)
        v = self.wv(values).reshape(lk, h, dh).transpose(1, 0, 2)

        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh))
        if not valid.all():
            scores = scores.masked_fill(~valid[None, :, :], -np.inf)
        weights = scores.softmax(axis=-1)
        out = weights @ v
        out = out.transpose(1, 0, 2).reshape(lq, h * dh)
        return self.wo(out)

    def attention_weights(self, queries, keys, mask=None, causal=False):
        """Forward pass of the weight matrix only (head-stacked), for tests."""
        return self._weights_impl(queries, keys, mask, causal)

    def _weights_impl(self, queries, keys, mask, causal):
        lq, lk = queries.shape[0], keys.shape[0]
        valid = np.ones((lq, lk), dtype=bool)
        if mask is not None:
            valid &= np.asarray(mask, dtype=bool)[None, :]
        if causal:
            valid &= np.tril(np.ones((lq, lk), dtype=bool))
        if not valid.any(axis=1).all():
            raise AllMasked("some query has no attendable key")
        h, dh = self.heads, self.head_dim
        q = self.wq(queries).reshape(lq, h, dh).transpose(1, 0, 2)
        k = self.wk(keys).reshape(lk, h, dh).transpose(1, 0, 2)
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh))
        if not valid.all():
            scores = scores.masked_fill(~valid[None, :, :], -np.inf)
        return scores.softmax(axis=-1)


class FeedForward(Module):
    def __init__(self, d_model, d_hidden, rng):
        self.fc1 = Linear(d_model, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_model, rng)

    def __call__(self, x):
        return self.fc2(self.fc1(x).relu())


class EncoderLayer(Module):
    """Post-layer-norm residual block: self-attention then feed-forward."""

    def __init__(self, d_model, heads, d_hidden, rng, p_drop=0.1):
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_hidden, rng)
        self.norm2 = LayerNorm(d_model)
        self.p_drop = p_drop

    def __call__(self, x, mask=None, rng=None, training=False):
        a = self.attn(x, x, x, mask=mask)
        x = self.norm1(x + dropout(a, self.p_drop, rng, training))
        f = self.ffn(x)
        return self.norm2(x + dropout(f, self.p_drop, rng, training))


class DecoderLayer(Module):
    """Causal self-attention, cross-attention to encoder latents, feed-forward."""

    def __init__(self, d_model, heads, d_hidden, rng, p_drop=0.1):
        self.self_attn = MultiHeadAttention(d_model, heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_hidden, rng)
        self.norm3 = LayerNorm(d_model)
        self.p_drop = p_drop

    def __call__(self, x, latents, latent_mask=None, rng=None, training=False):
        a = self.self_attn(x, x, x, causal=True)
        x = self.norm1(x + dropout(a, self.p_drop, rng, training))
        c = self.cross_attn(x, latents, latents, mask=latent_mask)
        x = self.norm2(x + dropout(c, self.p_drop, rng, training))
        f = self.ffn(x)
        return self.norm3(x + dropout(f, self.p_drop, rng, training))


# ---- losses ----

PROB_CLAMP = 1e-7


def bce_loss(probabilities, labels):
    """Mean binary cross-entropy; probabilities are clamped away from {0,1}."""
    labels = np.asarray(labels, dtype=default_dtype())
    if probabilities.shape != labels.shape:
        raise ShapeMismatch(
            f"probabilities {probabilities.shape} vs labels {labels.shape}")
    p = probabilities.clip(PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = Tensor(labels)
    terms = y * p.log() + (1.0 - y) * (1.0 - p).log()
    return -terms.mean()


def ce_loss(logits, targets):
    """Mean cross-entropy of `logits` (T x V) against integer `targets`."""
    targets = np.asarray(targets, dtype=np.int64)
    t, v = logits.shape
    if targets.shape != (t,):
        raise ShapeMismatch(f"targets shape {targets.shape} != ({t},)")
    if targets.min() < 0 or targets.max() >= v:
        raise InvalidToken(f"target ids must lie in [0, {v})")
    logp = logits.log_softmax(axis=-1)
    picked = logp[np.arange(t), targets]
    return -picked.mean()


# ---- optimizer ----

class Adam:
    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---- position encoding ----

def sinusoidal_pe(position, d):
    """Encoding vector: even slots sin(pos/10000^(2i/d)), odd slots cos."""
    if d % 2 != 0:
        raise OddDimension(f"dimension must be even, got {d}")
    i = np.arange(d // 2)
    angles = position / np.power(10000.0, 2.0 * i / d)
    pe = np.empty(d, dtype=default_dtype())
    pe[0::2] = np.sin(angles)
    pe[1::2] = np.cos(angles)
    return pe


def pe_matrix(length, d):
    return np.stack([sinusoidal_pe(pos, d) for pos in range(length)])


# ---- checkpoint IO ----

def save_checkpoint(path, config, params):
    """Binary checkpoint: magic, version, JSON config, named f32 tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(params)))
    for name in params:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    view = memoryview(data)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", view, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", view, 6)
    off = 10
    config = json.loads(bytes(view[off:off + blob_len]).decode("utf-8"))
    off += blob_len
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + name_len]).decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        params[name] = arr.copy()
    return config, params
