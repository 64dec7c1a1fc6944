"""Embeddings and the unimodal transformer stacks.

The textual stack uses the post-LN residual form ``x + LN(sublayer(x))`` and
the visual stack the pre-LN form ``x + sublayer(LN(x))``. All functions accept
optional leading batch dimensions: text is ``(..., n, d)``, vision
``(..., m, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import LengthError, ShapeError, VocabularyError

MASK_LOGIT = -1e30
ABLATIONS = ("no_pgi", "no_caf", "independent")


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_text_layers: int = 1
    n_visual_layers: int = 1
    n_fusion_layers: int = 3
    height: int = 8
    width: int = 8
    channels: int = 1
    patch: int = 4
    n_images: int = 2
    max_len: int = 64
    eps: float = 1e-5
    init_std: float = 0.02
    no_pgi: bool = False
    no_caf: bool = False
    independent: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ShapeError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.height % self.patch or self.width % self.patch:
            raise ShapeError(f"image {self.height}x{self.width} not divisible by patch {self.patch}")
        if min(self.n_text_layers, self.n_visual_layers) < 0 or self.n_fusion_layers < 0:
            raise ShapeError("layer counts must be nonnegative")
        if self.n_fusion_layers < 1 and not self.independent:
            raise ShapeError("at least one fusion layer is required")
        if self.n_images < 1:
            raise ShapeError("n_images must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def patches_per_image(self) -> int:
        return (self.height * self.width) // (self.patch * self.patch)

    @property
    def n_visual_tokens(self) -> int:
        return self.patches_per_image * self.n_images

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def ablation(self) -> str:
        active = [name for name in ABLATIONS if getattr(self, name)]
        return ",".join(active) if active else "none"

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# weights


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


@dataclass
class BlockWeights:
    """One transformer block.

    ``wq``, ``wk`` and ``wv`` are ``d x d`` with head ``i`` owning the column
    slice ``[i*d_h, (i+1)*d_h)``; this is the per-head ``d x d_h`` projection
    stacked side by side.
    """

    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    ln1_g: Parameter
    ln1_b: Parameter
    ln2_g: Parameter
    ln2_b: Parameter
    n_heads: int = field(default=1)

    @classmethod
    def init(cls, prefix: str, d: int, n_heads: int, d_ff: int, rng: np.random.Generator, std: float = 0.02):
        def p(name, value):
            return Parameter(value, f"{prefix}.{name}")

        return cls(
            wq=p("wq", _normal(rng, (d, d), std)),
            wk=p("wk", _normal(rng, (d, d), std)),
            wv=p("wv", _normal(rng, (d, d), std)),
            wo=p("wo", _normal(rng, (d, d), std)),
            w1=p("w1", _normal(rng, (d, d_ff), std)),
            b1=p("b1", np.zeros((1, d_ff))),
            w2=p("w2", _normal(rng, (d_ff, d), std)),
            b2=p("b2", np.zeros((1, d))),
            ln1_g=p("ln1_g", np.ones((1, d))),
            ln1_b=p("ln1_b", np.zeros((1, d))),
            ln2_g=p("ln2_g", np.ones((1, d))),
            ln2_b=p("ln2_b", np.zeros((1, d))),
            n_heads=n_heads,
        )

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo, self.w1, self.b1, self.w2, self.b2,
                self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b]

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads


# ---------------------------------------------------------------------------
# patches and embeddings


def patchify(image, patch: int) -> np.ndarray:
    """Split an ``H x W x C`` image into ``u = HW/P^2`` flattened patches.

    Patches are taken in raster order over the patch grid; each row is the
    patch flattened in ``(row, col, channel)`` order.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"image must be H x W x C, got shape {image.shape}")
    h, w, c = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    return image.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * c)


def unpatchify(patches, height: int, width: int, channels: int, patch: int) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    gh, gw = height // patch, width // patch
    if patches.shape != (gh * gw, patch * patch * channels):
        raise ShapeError(f"expected {(gh * gw, patch * patch * channels)} patches, got {patches.shape}")
    return patches.reshape(gh, gw, patch, patch, channels).transpose(0, 2, 1, 3, 4).reshape(height, width, channels)


def embed_text(token_ids, word_table: Tensor, pos_table: Tensor, entity_table: Tensor | None = None) -> Tensor:
    """``X_wd + T_pos``: word rows (entity rows for ids past the word table) plus positions."""
    ids = np.asarray(token_ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise VocabularyError("token ids must be integers")
    n = ids.shape[-1]
    if n > pos_table.shape[0]:
        raise LengthError(f"sequence length {n} exceeds maximum {pos_table.shape[0]}")
    table = word_table if entity_table is None else ag.concat([word_table, entity_table], axis=0)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise VocabularyError(f"token id {int(bad)} outside vocabulary of size {table.shape[0]}")
    return ag.index(table, ids) + ag.index(pos_table, slice(0, n))


def embed_patches(images, projection: Tensor, pos_table: Tensor, patch: int) -> Tensor:
    """``X_pc + V_pos`` for ``o`` images, shape ``(..., o, H, W, C)`` -> ``(..., o*u, d)``.

    Image ``j`` occupies rows ``[j*u, (j+1)*u)``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim < 4:
        raise ShapeError(f"expected (..., o, H, W, C) images, got shape {images.shape}")
    lead, (o, h, w, c) = images.shape[:-4], images.shape[-4:]
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    if patch * patch * c != projection.shape[0]:
        raise ShapeError(f"patch dim {patch * patch * c} does not match projection rows {projection.shape[0]}")
    gh, gw = h // patch, w // patch
    flat = images.reshape(*lead, o, gh, patch, gw, patch, c)
    nd = len(lead)
    axes = tuple(range(nd)) + tuple(nd + a for a in (0, 1, 3, 2, 4, 5))
    flat = flat.transpose(axes).reshape(*lead, o * gh * gw, patch * patch * c)
    m = flat.shape[-2]
    if m != pos_table.shape[0]:
        raise ShapeError(f"{m} visual tokens but position table has {pos_table.shape[0]} rows")
    return ag.matmul(Tensor(flat), projection) + pos_table


# ---------------------------------------------------------------------------
# attention


def _additive_mask(key_mask) -> np.ndarray | None:
    if key_mask is None:
        return None
    key_mask = np.asarray(key_mask, dtype=bool)
    return np.where(key_mask, 0.0, MASK_LOGIT)[..., None, :]


def attention(q, k, v, key_mask=None) -> Tensor:
    """``softmax(Q K^T / sqrt(d_k)) V`` with an optional boolean key mask (True = attend)."""
    q, k, v = ag.as_tensor(q), ag.as_tensor(k), ag.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes incompatible: Q{q.shape} K{k.shape} V{v.shape}")
    scores = ag.matmul(q, ag.swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    mask = _additive_mask(key_mask)
    if mask is not None:
        scores = scores + mask
    return ag.matmul(ag.softmax(scores), v)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """``(..., n, d)`` -> ``(..., H, n, d/H)``."""
    *lead, n, d = x.shape
    nd = len(lead)
    x = ag.reshape(x, (*lead, n, n_heads, d // n_heads))
    return ag.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = len(lead)
    x = ag.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return ag.reshape(x, (*lead, n, h * dh))


def _head_mask(key_mask):
    return None if key_mask is None else np.asarray(key_mask, dtype=bool)[..., None, :]


def multi_head_attention(x, w: BlockWeights, key_mask=None) -> Tensor:
    """``[head_1; ...; head_h] W_o`` with ``head_i = Attn(x Wq_i, x Wk_i, x Wv_i)``."""
    x = ag.as_tensor(x)
    if x.shape[-1] != w.d or w.d % w.n_heads:
        raise ShapeError(f"input width {x.shape[-1]} vs block width {w.d} / heads {w.n_heads}")
    q = split_heads(x @ w.wq, w.n_heads)
    k = split_heads(x @ w.wk, w.n_heads)
    v = split_heads(x @ w.wv, w.n_heads)
    heads = attention(q, k, v, _head_mask(key_mask))
    return merge_heads(heads) @ w.wo


def ffn(x, w: BlockWeights) -> Tensor:
    """``ReLU(x W_1 + b_1) W_2 + b_2``."""
    x = ag.as_tensor(x)
    if x.shape[-1] != w.w1.shape[0]:
        raise ShapeError(f"ffn input width {x.shape[-1]} != {w.w1.shape[0]}")
    return ag.relu(x @ w.w1 + w.b1) @ w.w2 + w.b2


def post_ln_residual(x: Tensor, sub: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    return x + ag.layer_norm(sub, gamma, beta, eps)


def text_block(x, w: BlockWeights, eps: float = 1e-5, key_mask=None) -> Tensor:
    x = ag.as_tensor(x)
    h = post_ln_residual(x, multi_head_attention(x, w, key_mask), w.ln1_g, w.ln1_b, eps)
    return post_ln_residual(h, ffn(h, w), w.ln2_g, w.ln2_b, eps)


def visual_block(x, w: BlockWeights, eps: float = 1e-5) -> Tensor:
    x = ag.as_tensor(x)
    h = x + multi_head_attention(ag.layer_norm(x, w.ln1_g, w.ln1_b, eps), w)
    return h + ffn(ag.layer_norm(h, w.ln2_g, w.ln2_b, eps), w)


def t_encoder_forward(x, blocks: list[BlockWeights], eps: float = 1e-5, key_mask=None) -> Tensor:
    x = ag.as_tensor(x)
    for w in blocks:
        x = text_block(x, w, eps, key_mask)
    return x


def v_encoder_forward(x, blocks: list[BlockWeights], eps: float = 1e-5) -> Tensor:
    x = ag.as_tensor(x)
    for w in blocks:
        x = visual_block(x, w, eps)
    return x
