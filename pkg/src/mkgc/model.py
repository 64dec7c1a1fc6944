"""The hybrid dual-stream transformer with its task-head parameters."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .encoders import BlockWeights, ModelConfig, embed_patches, embed_text, t_encoder_forward, v_encoder_forward
from .heads import CRFParams
from .m_encoder import MEncoderLayer, m_encoder_forward


class HybridTransformer:
    """Text and vision stacks whose top layers are fused.

    Word ids ``< vocab_size`` index the word table; ids
    ``vocab_size + k`` index entity row ``k``. Entity rows double as the
    prediction targets of the masked-entity head.
    """

    def __init__(self, config: ModelConfig, vocab_size: int, n_entities: int = 0,
                 n_classes: int = 0, tags=None, seed: int = 0):
        self.config = config
        self.vocab_size = vocab_size
        self.n_entities = n_entities
        rng = np.random.default_rng(seed)
        c = config
        std = c.init_std
        d = c.d_model

        self.word = Parameter(rng.normal(0, std, (vocab_size, d)), "embed.word")
        self.entity = Parameter(rng.normal(0, std, (n_entities, d)), "embed.entity") if n_entities else None
        self.text_pos = Parameter(rng.normal(0, std, (c.max_len, d)), "embed.text_pos")
        self.patch_proj = Parameter(rng.normal(0, std, (c.patch_dim, d)), "embed.patch")
        self.visual_pos = Parameter(rng.normal(0, std, (c.n_visual_tokens, d)), "embed.visual_pos")

        extra = c.n_fusion_layers if c.independent else 0
        self.text_blocks = [BlockWeights.init(f"text.{i}", d, c.n_heads, c.d_ff, rng, std)
                            for i in range(c.n_text_layers + extra)]
        self.visual_blocks = [BlockWeights.init(f"visual.{i}", d, c.n_heads, c.d_ff, rng, std)
                              for i in range(c.n_visual_layers + extra)]
        self.fusion = [MEncoderLayer.init(f"fusion.{i}", d, c.n_heads, c.d_ff, rng, std, with_w3=not c.no_caf)
                       for i in range(c.n_fusion_layers)]

        self.classifier = Parameter(rng.normal(0, std, (d, n_classes)), "head.re") if n_classes else None
        self.crf = CRFParams.init(list(tags), d, rng, std) if tags else None

    # -- parameters -----------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for p in self.parameters():
            yield p.name, p

    def parameters(self) -> list[Parameter]:
        ps = [self.word]
        if self.entity is not None:
            ps.append(self.entity)
        ps += [self.text_pos, self.patch_proj, self.visual_pos]
        for b in self.text_blocks:
            ps += b.parameters()
        for b in self.visual_blocks:
            ps += b.parameters()
        for layer in self.fusion:
            ps += layer.parameters()
        if self.classifier is not None:
            ps.append(self.classifier)
        if self.crf is not None:
            ps += self.crf.parameters()
        return ps

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if params[name].shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {params[name].shape}")
            params[name].data[...] = value

    def freeze_all_but(self, trainable: list[Parameter]) -> None:
        keep = {id(p) for p in trainable}
        for p in self.parameters():
            p.freeze(id(p) not in keep)

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.freeze(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward --------------------------------------------------------------

    def encode(self, token_ids, images, pad_mask=None, trace: bool = False):
        """Returns ``(text_hidden, visual_hidden, FusionTrace | None)``.

        ``token_ids`` is ``(..., n)``; ``images`` is ``(..., o, H, W, C)``;
        ``pad_mask`` marks real tokens with True.
        """
        c = self.config
        x_t = embed_text(token_ids, self.word, self.text_pos, self.entity)
        x_v = embed_patches(images, self.patch_proj, self.visual_pos, c.patch)
        h_t = t_encoder_forward(x_t, self.text_blocks, c.eps, pad_mask)
        h_v = v_encoder_forward(x_v, self.visual_blocks, c.eps)
        return m_encoder_forward(h_t, h_v, self.fusion, pad_mask, c.no_pgi, c.no_caf, c.eps, trace)

    def entity_logits(self, h_mask: Tensor) -> Tensor:
        from .heads import masked_entity_logits

        return masked_entity_logits(h_mask, self.entity)

    def class_logits(self, h_cls: Tensor) -> Tensor:
        return ag.matmul(h_cls, self.classifier)
