"""Neural-network building blocks: attention/transformer primitives plus
conv, norm, mixer, residual and U-Net blocks.

All blocks are pure functions over (inputs, params, state). Parameters
live in flat ``name -> Tensor`` dicts; composite blocks are wired
together with '/'-separated prefixes via ``prefixed``/``scoped``.
"""

from __future__ import annotations

import numpy as np

from . import rng as R
from . import tensor as T
from .tensor import Tensor


def prefixed(prefix: str, d: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in d.items()}


def scoped(params: dict, prefix: str) -> dict:
    pre = prefix + "/"
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def merge(*dicts: dict) -> dict:
    out = {}
    for d in dicts:
        out.update(d)
    return out


# ---------------------------------------------------------------------------
# initializers


def he_uniform(key: R.RngKey, shape, fan_in: int, dtype="f32") -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    u = R.uniform(key, shape)
    return Tensor(((u * 2.0 - 1.0) * limit), dtype=dtype)


def trunc_normal(key: R.RngKey, shape, std: float = 0.02, dtype="f32") -> Tensor:
    z = R.normal(key, shape)
    return Tensor(np.clip(z, -2.0, 2.0) * std, dtype=dtype)


# ---------------------------------------------------------------------------
# dense / conv / norms


def init_dense(key, d_in: int, d_out: int, dtype="f32") -> dict:
    kw, = R.split(key, 1)
    return {
        "w": he_uniform(kw, (d_in, d_out), fan_in=d_in, dtype=dtype),
        "b": T.zeros((d_out,), dtype=dtype),
    }


def dense(x: Tensor, p: dict) -> Tensor:
    return x @ p["w"] + p["b"]


def init_conv(key, kh: int, kw: int, cin: int, cout: int, dtype="f32") -> dict:
    k, = R.split(key, 1)
    return {
        "w": he_uniform(k, (kh, kw, cin, cout), fan_in=kh * kw * cin, dtype=dtype),
        "b": T.zeros((cout,), dtype=dtype),
    }


def conv(x: Tensor, p: dict, stride: int = 1, padding: str = "same") -> Tensor:
    return T.conv2d(x, p["w"], stride=stride, padding=padding) + p["b"]


def init_layer_norm(dim: int, dtype="f32") -> dict:
    return {"scale": T.ones((dim,), dtype=dtype), "bias": T.zeros((dim,), dtype=dtype)}


def layer_norm(x: Tensor, p: dict, eps: float = 1e-6) -> Tensor:
    mu = T.tmean(x, axis=-1, keepdims=True)
    var = T.tmean((x - mu) ** 2.0, axis=-1, keepdims=True)
    return (x - mu) / ((var + eps) ** 0.5) * p["scale"] + p["bias"]


def init_batch_norm(dim: int, dtype="f32") -> tuple[dict, dict]:
    params = {"scale": T.ones((dim,), dtype=dtype), "bias": T.zeros((dim,), dtype=dtype)}
    state = {"mean": T.zeros((dim,), dtype=dtype), "var": T.ones((dim,), dtype=dtype)}
    return params, state


def batch_norm(x: Tensor, p: dict, state: dict, train: bool,
               momentum: float = 0.9, eps: float = 1e-5):
    """Channel-wise batch norm over all leading axes; returns (y, new_state).

    In train mode, running statistics move toward the batch statistics:
    mu' = momentum * mu + (1 - momentum) * batch_mean.
    """
    if train:
        flat = x.reshape((-1, x.shape[-1]))
        batch_mu = T.tmean(flat, axis=0)
        batch_var = T.tmean((flat - batch_mu) ** 2.0, axis=0)
        y = (x - batch_mu) / ((batch_var + eps) ** 0.5) * p["scale"] + p["bias"]
        new_state = {
            "mean": Tensor(momentum * state["mean"].data
                           + (1.0 - momentum) * batch_mu.data),
            "var": Tensor(momentum * state["var"].data
                          + (1.0 - momentum) * batch_var.data),
        }
        return y, new_state
    y = (x - state["mean"]) / ((state["var"] + eps) ** 0.5) * p["scale"] + p["bias"]
    return y, state


def dropout(x: Tensor, rate: float, train: bool, key: R.RngKey | None) -> Tensor:
    if not train or rate <= 0.0:
        return x
    if key is None:
        raise ValueError("dropout with rate > 0 in train mode needs an rng key")
    keep = (R.uniform(key, x.shape) >= rate).astype(x.data.dtype)
    return x * Tensor(keep / (1.0 - rate))


# ---------------------------------------------------------------------------
# attention / transformer


def init_attention(key, dim: int, dtype="f32") -> dict:
    kq, kk, kv, ko = R.split(key, 4)
    out = {}
    for name, k in (("q", kq), ("k", kk), ("v", kv), ("o", ko)):
        out.update(prefixed(name, init_dense(k, dim, dim, dtype)))
    return out


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         p: dict, mask: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention over [b, n, d] inputs.

    ``mask``, when given, is added to the attention logits (use large
    negative values to forbid positions).
    """
    b, nq, d = q.shape
    nk = k.shape[1]
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split_heads(x, n):
        # [b, n, d] -> [b, heads, n, dh]
        return x.reshape((b, n, heads, dh)).transpose((0, 2, 1, 3))

    qh = split_heads(dense(q, scoped(p, "q")), nq)
    kh = split_heads(dense(k, scoped(p, "k")), nk)
    vh = split_heads(dense(v, scoped(p, "v")), nk)

    logits = (qh @ kh.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if mask is not None:
        logits = logits + mask
    weights = T.softmax(logits, axis=-1)
    out = weights @ vh  # [b, heads, nq, dh]
    out = out.transpose((0, 2, 1, 3)).reshape((b, nq, d))
    return dense(out, scoped(p, "o"))


def init_mlp(key, dim: int, hidden: int, dtype="f32") -> dict:
    k1, k2 = R.split(key, 2)
    return merge(
        prefixed("fc1", init_dense(k1, dim, hidden, dtype)),
        prefixed("fc2", init_dense(k2, hidden, dim, dtype)),
    )


def mlp(x: Tensor, p: dict) -> Tensor:
    return dense(T.gelu(dense(x, scoped(p, "fc1"))), scoped(p, "fc2"))


def init_transformer_block(key, dim: int, mlp_dim: int, dtype="f32") -> dict:
    ka, km = R.split(key, 2)
    return merge(
        prefixed("ln1", init_layer_norm(dim, dtype)),
        prefixed("attn", init_attention(ka, dim, dtype)),
        prefixed("ln2", init_layer_norm(dim, dtype)),
        prefixed("mlp", init_mlp(km, dim, mlp_dim, dtype)),
    )


def transformer_block(x: Tensor, p: dict, heads: int,
                      train: bool = False, drop_rate: float = 0.0,
                      key: R.RngKey | None = None) -> Tensor:
    """Pre-LayerNorm encoder block: x + MHA(LN(x)), then x + MLP(LN(x))."""
    k1 = k2 = None
    if train and drop_rate > 0.0:
        k1, k2 = R.split(key, 2)
    h = layer_norm(x, scoped(p, "ln1"))
    x = x + dropout(multi_head_attention(h, h, h, heads, scoped(p, "attn")),
                    drop_rate, train, k1)
    h = layer_norm(x, scoped(p, "ln2"))
    return x + dropout(mlp(h, scoped(p, "mlp")), drop_rate, train, k2)


def init_decoder_block(key, dim: int, mlp_dim: int, dtype="f32") -> dict:
    ks, kc, km = R.split(key, 3)
    return merge(
        prefixed("ln1", init_layer_norm(dim, dtype)),
        prefixed("self_attn", init_attention(ks, dim, dtype)),
        prefixed("ln2", init_layer_norm(dim, dtype)),
        prefixed("cross_attn", init_attention(kc, dim, dtype)),
        prefixed("ln3", init_layer_norm(dim, dtype)),
        prefixed("mlp", init_mlp(km, dim, mlp_dim, dtype)),
    )


def decoder_block(x: Tensor, memory: Tensor, p: dict, heads: int) -> Tensor:
    """Pre-LN decoder block: self-attention, cross-attention, MLP."""
    h = layer_norm(x, scoped(p, "ln1"))
    x = x + multi_head_attention(h, h, h, heads, scoped(p, "self_attn"))
    h = layer_norm(x, scoped(p, "ln2"))
    x = x + multi_head_attention(h, memory, memory, heads, scoped(p, "cross_attn"))
    h = layer_norm(x, scoped(p, "ln3"))
    return x + mlp(h, scoped(p, "mlp"))


# ---------------------------------------------------------------------------
# mixer


def init_mixer_block(key, tokens: int, dim: int, token_mlp: int,
                     channel_mlp: int, dtype="f32") -> dict:
    kt, kc = R.split(key, 2)
    return merge(
        prefixed("ln1", init_layer_norm(dim, dtype)),
        prefixed("token_mix", init_mlp(kt, tokens, token_mlp, dtype)),
        prefixed("ln2", init_layer_norm(dim, dtype)),
        prefixed("channel_mix", init_mlp(kc, dim, channel_mlp, dtype)),
    )


def mixer_block(x: Tensor, p: dict) -> Tensor:
    """Token-mixing MLP across positions, then channel-mixing MLP."""
    h = layer_norm(x, scoped(p, "ln1")).transpose((0, 2, 1))
    h = mlp(h, scoped(p, "token_mix")).transpose((0, 2, 1))
    x = x + h
    h = layer_norm(x, scoped(p, "ln2"))
    return x + mlp(h, scoped(p, "channel_mix"))


# ---------------------------------------------------------------------------
# resnet


def init_resnet_block(key, cin: int, cout: int, stride: int = 1, dtype="f32"):
    k1, k2, kp = R.split(key, 3)
    params = merge(
        prefixed("conv1", init_conv(k1, 3, 3, cin, cout, dtype)),
        prefixed("conv2", init_conv(k2, 3, 3, cout, cout, dtype)),
    )
    state = {}
    for name, dim in (("bn1", cout), ("bn2", cout)):
        bp, bs = init_batch_norm(dim, dtype)
        params.update(prefixed(name, bp))
        state.update(prefixed(name, bs))
    if stride != 1 or cin != cout:
        params.update(prefixed("proj", init_conv(kp, 1, 1, cin, cout, dtype)))
    return params, state


def resnet_block(x: Tensor, p: dict, state: dict, train: bool,
                 stride: int = 1, momentum: float = 0.9):
    """conv-BN-relu twice plus a (projected) shortcut; returns (y, new_state)."""
    shortcut = x
    if "proj/w" in p:
        shortcut = conv(x, scoped(p, "proj"), stride=stride, padding="valid")
    h = conv(x, scoped(p, "conv1"), stride=stride)
    h, bn1 = batch_norm(h, scoped(p, "bn1"), scoped(state, "bn1"), train, momentum)
    h = T.relu(h)
    h = conv(h, scoped(p, "conv2"))
    h, bn2 = batch_norm(h, scoped(p, "bn2"), scoped(state, "bn2"), train, momentum)
    y = T.relu(h + shortcut)
    return y, merge(prefixed("bn1", bn1), prefixed("bn2", bn2))


# ---------------------------------------------------------------------------
# u-net


def init_double_conv(key, cin: int, cout: int, dtype="f32") -> dict:
    k1, k2 = R.split(key, 2)
    return merge(
        prefixed("conv1", init_conv(k1, 3, 3, cin, cout, dtype)),
        prefixed("conv2", init_conv(k2, 3, 3, cout, cout, dtype)),
    )


def double_conv(x: Tensor, p: dict) -> Tensor:
    h = T.relu(conv(x, scoped(p, "conv1")))
    return T.relu(conv(h, scoped(p, "conv2")))


def unet_down(x: Tensor, p: dict):
    """Returns (skip, pooled): features at this scale and 2x downsampled."""
    skip = double_conv(x, p)
    return skip, T.max_pool2d(skip, 2)


def unet_up(x: Tensor, skip: Tensor, p: dict) -> Tensor:
    """2x nearest upsample, concatenate the skip, double conv."""
    if skip is None:
        raise ValueError("unet_up requires the matching skip tensor")
    h = T.upsample_nearest2d(x, 2)
    if h.shape[1:3] != skip.shape[1:3]:
        raise ValueError(f"skip spatial shape {skip.shape} does not match {h.shape}")
    h = T.concat([h, skip], axis=3)
    return double_conv(h, p)


# ---------------------------------------------------------------------------
# patching / position


def init_patch_embed(key, patch: int, cin: int, dim: int, dtype="f32") -> dict:
    k, = R.split(key, 1)
    d_in = patch * patch * cin
    return {
        "w": he_uniform(k, (d_in, dim), fan_in=d_in, dtype=dtype),
        "b": T.zeros((dim,), dtype=dtype),
    }


def patch_embed(x: Tensor, p: dict, patch: int) -> Tensor:
    """Split [b,H,W,C] into non-overlapping patches and project to dim."""
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise ValueError(f"spatial dims {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    tokens = x.reshape((b, gh, patch, gw, patch, c))
    tokens = tokens.transpose((0, 1, 3, 2, 4, 5)).reshape((b, gh * gw, patch * patch * c))
    return tokens @ p["w"] + p["b"]


def init_positional_embedding(key, tokens: int, dim: int, dtype="f32") -> dict:
    return {"pos": trunc_normal(key, (tokens, dim), std=0.02, dtype=dtype)}


def add_positional_embedding(x: Tensor, p: dict) -> Tensor:
    return x + p["pos"]
