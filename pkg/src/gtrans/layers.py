"""Transformer sublayers: multi-head attention, position-wise FFN, residual units."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Literal

import numpy as np

from .autograd import (
    ParameterError,
    ShapeError,
    Tensor,
    dropout,
    get_default_dtype,
    layer_norm,
    linear,
    relu,
    softmax,
)

NormStyle = Literal["post", "pre"]


@dataclass
class ForwardContext:
    """Training-time switches for one forward pass.

    ``None`` in place of a context means evaluation mode (no dropout).
    """

    dropout: float
    rng: np.random.Generator
    training: bool = True

    def drop(self, x: Tensor) -> Tensor:
        if not self.training or self.dropout <= 0:
            return x
        return dropout(x, self.dropout, self.rng)


def maybe_drop(x: Tensor, ctx: ForwardContext | None) -> Tensor:
    return x if ctx is None else ctx.drop(x)


@dataclass
class LNParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


@dataclass
class AttentionParams:
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    o_w: Tensor
    o_b: Tensor


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderLayerParams:
    self_attn: AttentionParams
    self_ln: LNParams
    ffn: FFNParams
    ffn_ln: LNParams


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    self_ln: LNParams
    cross_attn: AttentionParams
    cross_ln: LNParams
    ffn: FFNParams
    ffn_ln: LNParams


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk a params dataclass (or list of them) yielding dotted names."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, (Tensor, list, tuple)) or dataclasses.is_dataclass(value):
                yield from named_tensors(value, f"{prefix}.{f.name}" if prefix else f.name)


# initialization


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return Tensor(data.astype(get_default_dtype()), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_ln(d: int, eps: float = 1e-5) -> LNParams:
    return LNParams(ones(d), zeros(d), eps)


def init_attention(rng: np.random.Generator, d: int) -> AttentionParams:
    return AttentionParams(
        xavier_uniform(rng, d, d), zeros(d),
        xavier_uniform(rng, d, d), zeros(d),
        xavier_uniform(rng, d, d), zeros(d),
        xavier_uniform(rng, d, d), zeros(d),
    )


def init_ffn(rng: np.random.Generator, d: int, f: int) -> FFNParams:
    return FFNParams(xavier_uniform(rng, d, f), zeros(f), xavier_uniform(rng, f, d), zeros(d))


def init_encoder_layer(rng: np.random.Generator, d: int, f: int, eps: float = 1e-5) -> EncoderLayerParams:
    return EncoderLayerParams(init_attention(rng, d), init_ln(d, eps), init_ffn(rng, d, f), init_ln(d, eps))


def init_decoder_layer(rng: np.random.Generator, d: int, f: int, eps: float = 1e-5) -> DecoderLayerParams:
    return DecoderLayerParams(
        init_attention(rng, d), init_ln(d, eps),
        init_attention(rng, d), init_ln(d, eps),
        init_ffn(rng, d, f), init_ln(d, eps),
    )


# masks


def causal_mask(length: int) -> np.ndarray:
    """Lower-triangular boolean mask; True means attendable."""
    return np.tril(np.ones((length, length), dtype=bool))


def padding_mask(ids: np.ndarray, pad_id: int) -> np.ndarray:
    """Key mask of shape ``(..., 1, S)`` blocking pad columns."""
    return (np.asarray(ids) != pad_id)[..., None, :]


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return table


# sublayers


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    return x.reshape(*lead, t, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, t, h * dh)


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    params: AttentionParams,
    mask: np.ndarray | None,
    heads: int,
    ctx: ForwardContext | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``heads`` heads.

    Inputs are ``(..., T, D)``. ``mask`` broadcasts to ``(..., T_q, T_k)``.
    """
    d = query.shape[-1]
    if heads < 1 or d % heads:
        raise ParameterError(f"{heads} heads do not divide model dim {d}")
    if key.shape[-1] != d or value.shape[-1] != d:
        raise ShapeError("query, key and value must share the model dimension")
    q = _split_heads(linear(query, params.q_w, params.q_b), heads)
    k = _split_heads(linear(key, params.k_w, params.k_b), heads)
    v = _split_heads(linear(value, params.v_w, params.v_b), heads)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // heads))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)[..., None, :, :]
    weights = softmax(scores, mask=mask)
    out = linear(_merge_heads(maybe_drop(weights, ctx) @ v), params.o_w, params.o_b)
    if return_weights:
        return out, weights
    return out


def feed_forward(x: Tensor, params: FFNParams, ctx: ForwardContext | None = None) -> Tensor:
    hidden = maybe_drop(relu(linear(x, params.w1, params.b1)), ctx)
    return linear(hidden, params.w2, params.b2)


def residual_apply(
    x: Tensor,
    sublayer: Callable[[Tensor], Tensor],
    style: NormStyle,
    ln: LNParams,
    ctx: ForwardContext | None = None,
) -> Tensor:
    """Post-norm ``LN(x + f(x))`` or pre-norm ``x + f(LN(x))``."""
    if style == "post":
        return ln(x + maybe_drop(sublayer(x), ctx))
    if style == "pre":
        return x + maybe_drop(sublayer(ln(x)), ctx)
    raise ParameterError(f"unknown norm style {style!r}")


def encoder_layer_forward(
    x: Tensor,
    params: EncoderLayerParams,
    mask: np.ndarray | None,
    heads: int,
    style: NormStyle = "post",
    ctx: ForwardContext | None = None,
) -> Tensor:
    x = residual_apply(
        x, lambda h: multi_head_attention(h, h, h, params.self_attn, mask, heads, ctx),
        style, params.self_ln, ctx)
    return residual_apply(x, lambda h: feed_forward(h, params.ffn, ctx), style, params.ffn_ln, ctx)


def decoder_layer_forward(
    y: Tensor,
    memory: Tensor,
    params: DecoderLayerParams,
    self_mask: np.ndarray | None,
    cross_mask: np.ndarray | None,
    heads: int,
    style: NormStyle = "post",
    ctx: ForwardContext | None = None,
) -> Tensor:
    """One decoder layer; ``memory`` is the (fused) encoder representation."""
    y = residual_apply(
        y, lambda h: multi_head_attention(h, h, h, params.self_attn, self_mask, heads, ctx),
        style, params.self_ln, ctx)
    y = residual_apply(
        y, lambda h: multi_head_attention(h, memory, memory, params.cross_attn, cross_mask, heads, ctx),
        style, params.cross_ln, ctx)
    return residual_apply(y, lambda h: feed_forward(h, params.ffn, ctx), style, params.ffn_ln, ctx)
