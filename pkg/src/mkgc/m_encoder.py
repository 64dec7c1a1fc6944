"""Fused layers: prefix-guided interaction (PGI) and correlation-aware fusion (CAF).

In a fusion layer the visual queries attend over the visual keys with the
textual keys/values appended along the sequence axis (text -> vision). The
textual heads stay plain self-attention. Vision -> text flows only through the
CAF term: each textual token aggregates the visual tokens by a softmax over
inner-product similarity, and the result enters the textual FFN through
``W_3``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import numerics
from .autograd import Parameter, Tensor
from .encoders import (
    MASK_LOGIT,
    BlockWeights,
    _head_mask,
    attention,
    ffn,
    merge_heads,
    multi_head_attention,
    post_ln_residual,
    split_heads,
)
from .errors import ShapeError

_w3_grad_factor = 1.0


@contextlib.contextmanager
def corrupt_w3_gradient(factor: float = 0.5):
    """Negative control for gradient checks: scales the backward signal of the
    ``Agg W_3`` term while leaving the forward value untouched."""
    global _w3_grad_factor
    prev = _w3_grad_factor
    _w3_grad_factor = factor
    try:
        yield
    finally:
        _w3_grad_factor = prev


@dataclass
class MEncoderLayer:
    text: BlockWeights
    visual: BlockWeights
    w3: Parameter | None

    @classmethod
    def init(cls, prefix: str, d: int, n_heads: int, d_ff: int, rng: np.random.Generator,
             std: float = 0.02, with_w3: bool = True):
        text = BlockWeights.init(f"{prefix}.text", d, n_heads, d_ff, rng, std)
        visual = BlockWeights.init(f"{prefix}.visual", d, n_heads, d_ff, rng, std)
        w3 = Parameter(rng.normal(0.0, std, size=(d, d_ff)), f"{prefix}.w3") if with_w3 else None
        return cls(text, visual, w3)

    def parameters(self) -> list[Parameter]:
        ps = self.text.parameters() + self.visual.parameters()
        if self.w3 is not None:
            ps.append(self.w3)
        return ps


@dataclass
class LayerTrace:
    lambdas: np.ndarray | None  # (..., H, m); None without PGI
    similarity: np.ndarray  # (..., n, m)
    aggregated: np.ndarray  # (..., n, d)
    text_mid: np.ndarray
    visual_mid: np.ndarray
    text_out: np.ndarray
    visual_out: np.ndarray


@dataclass
class FusionTrace:
    layers: list[LayerTrace] = field(default_factory=list)


# ---------------------------------------------------------------------------
# PGI


def lambda_weights(q_v, k_v, k_t, text_mask=None, scale: float | None = None) -> np.ndarray:
    """Share of attention mass each visual query puts on the textual keys.

    ``sum exp(q K_t^T) / (sum exp(q K_t^T) + sum exp(q K_v^T))`` per query row,
    with logits scaled by ``1/sqrt(d_h)`` as in the attention itself. Shapes:
    ``q_v (..., m, dh)``, ``k_v (..., m', dh)``, ``k_t (..., n, dh)``; returns
    ``(..., m)``.
    """
    q_v, k_v, k_t = (np.asarray(a, dtype=np.float64) for a in (q_v, k_v, k_t))
    if scale is None:
        scale = 1.0 / math.sqrt(q_v.shape[-1])
    lt = q_v @ np.swapaxes(k_t, -1, -2) * scale
    lv = q_v @ np.swapaxes(k_v, -1, -2) * scale
    if text_mask is not None:
        lt = np.where(np.asarray(text_mask, dtype=bool)[..., None, :], lt, -np.inf)
    top = np.maximum(lt.max(axis=-1), lv.max(axis=-1))[..., None]
    st = np.exp(lt - top).sum(axis=-1)
    sv = np.exp(lv - top).sum(axis=-1)
    return st / (st + sv)


def hybrid_visual_heads(h_t, h_v, layer: MEncoderLayer, text_mask=None, no_pgi: bool = False, eps: float = 1e-5):
    """Per-head visual attention over ``[visual; textual]`` keys and values.

    Returns ``(heads, (q_v, k_v, k_t))`` where ``heads`` is ``(..., H, m, d_h)``
    before the output projection.
    """
    h_t, h_v = ag.as_tensor(h_t), ag.as_tensor(h_v)
    vw, tw = layer.visual, layer.text
    x_v = ag.layer_norm(h_v, vw.ln1_g, vw.ln1_b, eps)
    q_v = split_heads(x_v @ vw.wq, vw.n_heads)
    k_v = split_heads(x_v @ vw.wk, vw.n_heads)
    v_v = split_heads(x_v @ vw.wv, vw.n_heads)
    k_t = split_heads(h_t @ tw.wk, tw.n_heads)
    if no_pgi:
        return attention(q_v, k_v, v_v), (q_v, k_v, k_t)
    v_t = split_heads(h_t @ tw.wv, tw.n_heads)
    keys = ag.concat([k_v, k_t], axis=-2)
    values = ag.concat([v_v, v_t], axis=-2)
    mask = None
    if text_mask is not None:
        text_mask = np.asarray(text_mask, dtype=bool)
        vis = np.ones(text_mask.shape[:-1] + (h_v.shape[-2],), dtype=bool)
        mask = _head_mask(np.concatenate([vis, text_mask], axis=-1))
    return attention(q_v, keys, values, mask), (q_v, k_v, k_t)


def pgi(h_t, h_v, layer: MEncoderLayer, text_mask=None, no_pgi: bool = False, eps: float = 1e-5,
        _keep: dict | None = None):
    """Attention half of a fusion layer for both streams.

    Text: ``h_t + LN(MHA(h_t))``. Vision: ``h_v + W_o^v * hybrid_heads(LN(h_v))``.
    """
    h_t, h_v = ag.as_tensor(h_t), ag.as_tensor(h_v)
    if h_t.shape[-1] != h_v.shape[-1]:
        raise ShapeError(f"stream widths differ: {h_t.shape[-1]} vs {h_v.shape[-1]}")
    tw, vw = layer.text, layer.visual
    text_mid = post_ln_residual(h_t, multi_head_attention(h_t, tw, text_mask), tw.ln1_g, tw.ln1_b, eps)
    heads, qk = hybrid_visual_heads(h_t, h_v, layer, text_mask, no_pgi, eps)
    visual_mid = h_v + merge_heads(heads) @ vw.wo
    if _keep is not None:
        _keep["qk"] = qk
    return text_mid, visual_mid


def pgi_interpolated(h_t, h_v, layer: MEncoderLayer, text_mask=None, eps: float = 1e-5) -> np.ndarray:
    """Blend of visual self-attention and text->vision cross-attention by lambda.

    Computed directly from the weights with numpy; returns the per-head visual
    outputs ``(..., H, m, d_h)`` before the output projection.
    """
    vw, tw = layer.visual, layer.text
    h_t = np.asarray(ag.as_tensor(h_t).data)
    h_v = np.asarray(ag.as_tensor(h_v).data)
    n_heads = vw.n_heads

    def heads(x, w):
        y = x @ w.data
        *lead, n, d = y.shape
        return np.moveaxis(y.reshape(*lead, n, n_heads, d // n_heads), -2, -3)

    x_v = numerics.layer_norm(h_v, vw.ln1_g.data, vw.ln1_b.data, eps)
    q_v, k_v, v_v = heads(x_v, vw.wq), heads(x_v, vw.wk), heads(x_v, vw.wv)
    k_t, v_t = heads(h_t, tw.wk), heads(h_t, tw.wv)
    scale = 1.0 / math.sqrt(q_v.shape[-1])

    own = numerics.softmax_rows(q_v @ np.swapaxes(k_v, -1, -2) * scale) @ v_v
    cross_logits = q_v @ np.swapaxes(k_t, -1, -2) * scale
    mask = None
    if text_mask is not None:
        mask = np.asarray(text_mask, dtype=bool)[..., None, None, :]
        cross_logits = np.where(mask, cross_logits, MASK_LOGIT)
    cross = numerics.softmax_rows(cross_logits) @ v_t
    lam = lambda_weights(q_v, k_v, k_t, None if mask is None else np.asarray(text_mask, bool)[..., None, :], scale)
    lam = lam[..., None]
    return (1.0 - lam) * own + lam * cross


# ---------------------------------------------------------------------------
# CAF


def caf_similarity(x_t, x_v) -> Tensor:
    """``S = x_t x_v^T`` (no scaling)."""
    x_t, x_v = ag.as_tensor(x_t), ag.as_tensor(x_v)
    if x_t.shape[-1] != x_v.shape[-1]:
        raise ShapeError(f"similarity needs equal widths, got {x_t.shape[-1]} and {x_v.shape[-1]}")
    return x_t @ ag.swap_last(x_v)


def caf_aggregate(s, x_v) -> Tensor:
    """Row ``i`` is ``softmax(S_i) x_v``: the visual tokens weighted for textual token ``i``."""
    s, x_v = ag.as_tensor(s), ag.as_tensor(x_v)
    if s.shape[-1] != x_v.shape[-2]:
        raise ShapeError(f"S has {s.shape[-1]} columns but there are {x_v.shape[-2]} visual tokens")
    return ag.softmax(s) @ x_v


def caf_ffn(x_t, agg, weights: BlockWeights, w3: Tensor | None) -> Tensor:
    """``ReLU(x_t W_1 + b_1 + Agg W_3) W_2 + b_2``; plain FFN when ``w3`` is None."""
    if w3 is None:
        return ffn(x_t, weights)
    x_t, agg = ag.as_tensor(x_t), ag.as_tensor(agg)
    if agg.shape != x_t.shape or w3.shape != weights.w1.shape:
        raise ShapeError(f"caf_ffn shapes: x_t{x_t.shape} agg{agg.shape} w3{w3.shape} w1{weights.w1.shape}")
    fused = agg @ w3
    if _w3_grad_factor != 1.0:
        fused = ag.scale_grad(fused, _w3_grad_factor)
    return ag.relu(x_t @ weights.w1 + weights.b1 + fused) @ weights.w2 + weights.b2


def caf(text_mid, visual_mid, layer: MEncoderLayer, no_caf: bool = False, eps: float = 1e-5,
        _keep: dict | None = None):
    """FFN half of a fusion layer: CAF-modified textual FFN, standard visual FFN."""
    text_mid, visual_mid = ag.as_tensor(text_mid), ag.as_tensor(visual_mid)
    tw, vw = layer.text, layer.visual
    if no_caf or layer.w3 is None:
        sub_t = ffn(text_mid, tw)
    else:
        s = caf_similarity(text_mid, visual_mid)
        agg = caf_aggregate(s, visual_mid)
        sub_t = caf_ffn(text_mid, agg, tw, layer.w3)
        if _keep is not None:
            _keep["s"], _keep["agg"] = s, agg
    text_out = post_ln_residual(text_mid, sub_t, tw.ln2_g, tw.ln2_b, eps)
    visual_out = visual_mid + ffn(ag.layer_norm(visual_mid, vw.ln2_g, vw.ln2_b, eps), vw)
    return text_out, visual_out


def m_encoder_forward(h_t, h_v, layers: list[MEncoderLayer], text_mask=None, no_pgi: bool = False,
                      no_caf: bool = False, eps: float = 1e-5, trace: bool = False):
    """Run the fusion layers; returns ``(text, visual, FusionTrace | None)``."""
    h_t, h_v = ag.as_tensor(h_t), ag.as_tensor(h_v)
    record = FusionTrace() if trace else None
    for layer in layers:
        keep: dict | None = {} if trace else None
        text_mid, visual_mid = pgi(h_t, h_v, layer, text_mask, no_pgi, eps, _keep=keep)
        h_t, h_v = caf(text_mid, visual_mid, layer, no_caf, eps, _keep=keep)
        if record is not None:
            q_v, k_v, k_t = keep["qk"]
            lam = None
            if not no_pgi:
                tm = None if text_mask is None else np.asarray(text_mask, bool)[..., None, :]
                lam = lambda_weights(q_v.data, k_v.data, k_t.data, tm)
            if "s" in keep:
                s, agg = keep["s"].data, keep["agg"].data
            else:
                s = caf_similarity(text_mid.data, visual_mid.data).data
                agg = caf_aggregate(s, visual_mid.data).data
            record.layers.append(LayerTrace(lam, s, agg, text_mid.data, visual_mid.data, h_t.data, h_v.data))
    return h_t, h_v, record


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def format_trace(trace: FusionTrace, example: int | None = None) -> str:
    """Plain-text dump: one block per layer with lambda rows and S/Agg as TSV."""
    lines: list[str] = []
    for li, lt in enumerate(trace.layers):
        def pick(a):
            return a if example is None or a.ndim <= 2 else a[example]

        lines.append(f"layer {li}")
        if lt.lambdas is not None:
            lam = lt.lambdas if example is None or lt.lambdas.ndim <= 2 else lt.lambdas[example]
            for h in range(lam.shape[0]):
                for j in range(lam.shape[1]):
                    lines.append(f"lambda head={h} qrow={j} value={_fmt(lam[h, j])}")
        for label, mat in (("S", pick(lt.similarity)), ("Agg", pick(lt.aggregated))):
            lines.append(label)
            for row in mat:
                lines.append("\t".join(_fmt(v) for v in row))
        lines.append("")
    return "\n".join(lines)
