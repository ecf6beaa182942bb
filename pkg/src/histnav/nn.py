"""Transformer primitives: multi-head attention, encoder layers and the
dual-stream cross-modal layer, all parameterized by plain DiffTensor
containers so the same blocks serve the text, panoramic, temporal and
cross-modal stacks.

Every attention call feeds a global entry counter (one count per computed
query/key score per head), which backs the history-encoding complexity
measurements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .rng import Rng


class EmptyMaskError(ValueError):
    """An attention mask kept no key positions."""


class AttentionEntryCounter:
    """Exact count of attention score entries: one per (query, key) pair per head."""

    def __init__(self):
        self.entries = 0

    def reset(self) -> None:
        self.entries = 0


ATTENTION_COUNTER = AttentionEntryCounter()


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class AttentionParams:
    wq: DiffTensor
    bq: DiffTensor
    wk: DiffTensor
    bk: DiffTensor
    wv: DiffTensor
    bv: DiffTensor
    wo: DiffTensor
    bo: DiffTensor
    head_count: int

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self.head_count


@dataclass
class FeedForwardParams:
    w1: DiffTensor
    b1: DiffTensor
    w2: DiffTensor
    b2: DiffTensor


@dataclass
class LayerNormParams:
    gain: DiffTensor
    bias: DiffTensor


@dataclass
class TransformerLayerParams:
    attn: AttentionParams
    ffn: FeedForwardParams
    ln_attn: LayerNormParams
    ln_ffn: LayerNormParams


@dataclass
class CrossModalLayerParams:
    """Dual-stream layer: per-stream cross-attention, self-attention and FFN."""

    text_cross: AttentionParams
    vis_cross: AttentionParams
    text_self: AttentionParams
    vis_self: AttentionParams
    text_ffn: FeedForwardParams
    vis_ffn: FeedForwardParams
    text_ln_cross: LayerNormParams
    vis_ln_cross: LayerNormParams
    text_ln_self: LayerNormParams
    vis_ln_self: LayerNormParams
    text_ln_ffn: LayerNormParams
    vis_ln_ffn: LayerNormParams


# ---------------------------------------------------------------------------
# parameter construction


def _xavier(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal((fan_in, fan_out), std=std)


def init_attention(reg: dict, prefix: str, d_model: int, head_count: int, rng: Rng) -> AttentionParams:
    def param(name, value):
        t = DiffTensor(value, requires_grad=True)
        reg[f"{prefix}.{name}"] = t
        return t

    return AttentionParams(
        wq=param("wq", _xavier(rng, d_model, d_model)),
        bq=param("bq", np.zeros(d_model)),
        wk=param("wk", _xavier(rng, d_model, d_model)),
        bk=param("bk", np.zeros(d_model)),
        wv=param("wv", _xavier(rng, d_model, d_model)),
        bv=param("bv", np.zeros(d_model)),
        wo=param("wo", _xavier(rng, d_model, d_model)),
        bo=param("bo", np.zeros(d_model)),
        head_count=head_count,
    )


def init_ffn(reg: dict, prefix: str, d_model: int, hidden: int, rng: Rng) -> FeedForwardParams:
    def param(name, value):
        t = DiffTensor(value, requires_grad=True)
        reg[f"{prefix}.{name}"] = t
        return t

    return FeedForwardParams(
        w1=param("w1", _xavier(rng, d_model, hidden)),
        b1=param("b1", np.zeros(hidden)),
        w2=param("w2", _xavier(rng, hidden, d_model)),
        b2=param("b2", np.zeros(d_model)),
    )


def init_layer_norm(reg: dict, prefix: str, d_model: int) -> LayerNormParams:
    gain = DiffTensor(np.ones(d_model), requires_grad=True)
    bias = DiffTensor(np.zeros(d_model), requires_grad=True)
    reg[f"{prefix}.gain"] = gain
    reg[f"{prefix}.bias"] = bias
    return LayerNormParams(gain=gain, bias=bias)


def init_transformer_layer(reg: dict, prefix: str, d_model: int, head_count: int,
                           ffn_mult: int, rng: Rng) -> TransformerLayerParams:
    return TransformerLayerParams(
        attn=init_attention(reg, f"{prefix}.attn", d_model, head_count, rng),
        ffn=init_ffn(reg, f"{prefix}.ffn", d_model, d_model * ffn_mult, rng),
        ln_attn=init_layer_norm(reg, f"{prefix}.ln_attn", d_model),
        ln_ffn=init_layer_norm(reg, f"{prefix}.ln_ffn", d_model),
    )


def init_cross_modal_layer(reg: dict, prefix: str, d_model: int, head_count: int,
                           ffn_mult: int, rng: Rng) -> CrossModalLayerParams:
    return CrossModalLayerParams(
        text_cross=init_attention(reg, f"{prefix}.text_cross", d_model, head_count, rng),
        vis_cross=init_attention(reg, f"{prefix}.vis_cross", d_model, head_count, rng),
        text_self=init_attention(reg, f"{prefix}.text_self", d_model, head_count, rng),
        vis_self=init_attention(reg, f"{prefix}.vis_self", d_model, head_count, rng),
        text_ffn=init_ffn(reg, f"{prefix}.text_ffn", d_model, d_model * ffn_mult, rng),
        vis_ffn=init_ffn(reg, f"{prefix}.vis_ffn", d_model, d_model * ffn_mult, rng),
        text_ln_cross=init_layer_norm(reg, f"{prefix}.text_ln_cross", d_model),
        vis_ln_cross=init_layer_norm(reg, f"{prefix}.vis_ln_cross", d_model),
        text_ln_self=init_layer_norm(reg, f"{prefix}.text_ln_self", d_model),
        vis_ln_self=init_layer_norm(reg, f"{prefix}.vis_ln_self", d_model),
        text_ln_ffn=init_layer_norm(reg, f"{prefix}.text_ln_ffn", d_model),
        vis_ln_ffn=init_layer_norm(reg, f"{prefix}.vis_ln_ffn", d_model),
    )


# ---------------------------------------------------------------------------
# forward blocks


def _split_heads(x: DiffTensor, head_count: int) -> DiffTensor:
    # (..., S, d) -> (..., H, S, d/H)
    s, d = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    split = ad.reshape(x, lead + (s, head_count, d // head_count))
    return ad.swapaxes(split, -3, -2)


def _merge_heads(x: DiffTensor) -> DiffTensor:
    # (..., H, S, dh) -> (..., S, d)
    h, s, dh = x.shape[-3], x.shape[-2], x.shape[-1]
    lead = x.shape[:-3]
    merged = ad.swapaxes(x, -3, -2)
    return ad.reshape(merged, lead + (s, h * dh))


def multi_head_attention(queries_in: DiffTensor, keys_values_in: DiffTensor,
                         mask: np.ndarray | None, params: AttentionParams) -> DiffTensor:
    """Scaled dot-product attention; mask is a boolean keep-array over key
    positions, shaped (Sk,) or (batch, Sk). Masked keys get exactly zero weight.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise EmptyMaskError("attention mask keeps no key positions")
    q = _split_heads(ad.linear(queries_in, params.wq, params.bq), params.head_count)
    k = _split_heads(ad.linear(keys_values_in, params.wk, params.bk), params.head_count)
    v = _split_heads(ad.linear(keys_values_in, params.wv, params.bv), params.head_count)
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2))
    scores = ad.scale(scores, 1.0 / math.sqrt(params.head_dim))
    ATTENTION_COUNTER.entries += int(np.prod(scores.shape))
    if mask is not None:
        # broadcast key mask up to (..., H, Sq, Sk)
        key_mask = mask.reshape(mask.shape[:-1] + (1, 1, mask.shape[-1]))
    else:
        key_mask = None
    weights = ad.softmax(scores, axis=-1, mask=key_mask)
    out = _merge_heads(ad.matmul(weights, v))
    return ad.linear(out, params.wo, params.bo)


def _ffn(x: DiffTensor, p: FeedForwardParams) -> DiffTensor:
    return ad.linear(ad.gelu(ad.linear(x, p.w1, p.b1)), p.w2, p.b2)


def _sublayer(x: DiffTensor, update: DiffTensor, ln: LayerNormParams) -> DiffTensor:
    return ad.layer_norm(ad.add(x, update), ln.gain, ln.bias)


def transformer_layer(x: DiffTensor, mask: np.ndarray | None,
                      p: TransformerLayerParams) -> DiffTensor:
    """Post-norm encoder layer: self-attention then FFN, each residual + norm."""
    x = _sublayer(x, multi_head_attention(x, x, mask, p.attn), p.ln_attn)
    return _sublayer(x, _ffn(x, p.ffn), p.ln_ffn)


def cross_modal_layer(text: DiffTensor, text_mask: np.ndarray | None,
                      vis: DiffTensor, vis_mask: np.ndarray | None,
                      p: CrossModalLayerParams) -> tuple[DiffTensor, DiffTensor]:
    """Dual-stream layer: each stream first cross-attends the other stream's
    layer input, then self-attends, then passes its FFN; residual + norm after
    each sublayer.
    """
    text_cross = multi_head_attention(text, vis, vis_mask, p.text_cross)
    vis_cross = multi_head_attention(vis, text, text_mask, p.vis_cross)
    text = _sublayer(text, text_cross, p.text_ln_cross)
    vis = _sublayer(vis, vis_cross, p.vis_ln_cross)
    text = _sublayer(text, multi_head_attention(text, text, text_mask, p.text_self), p.text_ln_self)
    vis = _sublayer(vis, multi_head_attention(vis, vis, vis_mask, p.vis_self), p.vis_ln_self)
    text = _sublayer(text, _ffn(text, p.text_ffn), p.text_ln_ffn)
    vis = _sublayer(vis, _ffn(vis, p.vis_ffn), p.vis_ln_ffn)
    return text, vis


def cross_modal_layer_decoder_variant(text_memory: DiffTensor, text_mask: np.ndarray | None,
                                      vis: DiffTensor, vis_mask: np.ndarray | None,
                                      p: CrossModalLayerParams) -> DiffTensor:
    """Vision half only: attend a fixed, already-encoded text memory, then
    self-attend and FFN. The text stream is never updated.
    """
    vis = _sublayer(vis, multi_head_attention(vis, text_memory, text_mask, p.vis_cross), p.vis_ln_cross)
    vis = _sublayer(vis, multi_head_attention(vis, vis, vis_mask, p.vis_self), p.vis_ln_self)
    return _sublayer(vis, _ffn(vis, p.vis_ffn), p.vis_ln_ffn)


def cross_modal_layer_text_half(text: DiffTensor, text_mask: np.ndarray | None,
                                p: CrossModalLayerParams) -> DiffTensor:
    """Text-stream evolution with a zero cross-attention contribution.

    Bit-identical to the full layer's text output when the text cross-attention
    output projection and bias are zero, which is what lets the decoder variant
    precompute its per-layer text memories once per episode.
    """
    text = _sublayer(text, ad.scale(text, 0.0), p.text_ln_cross)
    text = _sublayer(text, multi_head_attention(text, text, text_mask, p.text_self), p.text_ln_self)
    return _sublayer(text, _ffn(text, p.text_ffn), p.text_ln_ffn)
