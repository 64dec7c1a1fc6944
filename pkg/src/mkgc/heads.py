"""Task paradigms: masked-entity link prediction, [CLS] relation
classification and linear-chain CRF tagging over BIO tags."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from . import numerics
from .autograd import Parameter, Tensor
from .errors import LabelError, ShapeError, VocabularyError

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
HEAD_OPEN, HEAD_CLOSE, TAIL_OPEN, TAIL_CLOSE = "<h>", "</h>", "<t>", "</t>"
SPECIALS = (PAD, CLS, SEP, MASK, UNK, HEAD_OPEN, HEAD_CLOSE, TAIL_OPEN, TAIL_CLOSE)
DESCRIPTION_SUFFIX = ("is", "the", "description", "of")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def entity_token(entity_id: str) -> str:
    return f"<e:{entity_id}>"


class Vocab:
    """Word vocabulary: special tokens first, then words in sorted order."""

    def __init__(self, words: Sequence[str] = ()):
        extra = sorted(set(words) - set(SPECIALS))
        self.itos: list[str] = list(SPECIALS) + extra
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def id(self, word: str) -> int:
        return self.stoi.get(word, self.stoi[UNK])

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]


@dataclass
class EntityRecord:
    id: str
    name: str
    description: str
    images: list = field(default_factory=list)  # arrays (H, W, C)


class EntityVocabulary:
    """Entity ids mapped one-to-one onto appended embedding rows."""

    def __init__(self, records: Sequence[EntityRecord]):
        self.records = list(records)
        self.index = {}
        for i, rec in enumerate(self.records):
            if rec.id in self.index:
                raise VocabularyError(f"duplicate entity id {rec.id!r}")
            self.index[rec.id] = i

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.index

    def __getitem__(self, entity_id: str) -> EntityRecord:
        try:
            return self.records[self.index[entity_id]]
        except KeyError:
            raise VocabularyError(f"unknown entity {entity_id!r}") from None

    def row(self, entity_id: str) -> int:
        if entity_id not in self.index:
            raise VocabularyError(f"unknown entity {entity_id!r}")
        return self.index[entity_id]


class RelationLabelSet:
    def __init__(self, names: Sequence[str]):
        self.names = list(dict.fromkeys(names))
        self.index = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def id(self, name: str) -> int:
        try:
            return self.index[name]
        except KeyError:
            raise VocabularyError(f"unknown label {name!r}") from None


class Template(NamedTuple):
    tokens: list[str]
    mask_index: int


# ---------------------------------------------------------------------------
# link-prediction templates


def build_entity_modeling_input(entity: EntityRecord) -> Template:
    """``[CLS] d_e is the description of [MASK] [SEP]``."""
    tokens = [CLS, *tokenize(entity.description), *DESCRIPTION_SUFFIX, MASK, SEP]
    return Template(tokens, len(tokens) - 2)


def build_triple_query_input(head: str, relation: str, entities: EntityVocabulary,
                             relations: Sequence[str] | None = None) -> Template:
    """``[CLS] <e_h> d_h [SEP] r [SEP] [MASK] [SEP]``."""
    rec = entities[head]
    if relations is not None and relation not in relations:
        raise VocabularyError(f"unknown relation {relation!r}")
    tokens = [CLS, entity_token(rec.id), *tokenize(rec.description), SEP, *tokenize(relation), SEP, MASK, SEP]
    return Template(tokens, len(tokens) - 2)


def build_head_query_input(tail: str, relation: str, entities: EntityVocabulary,
                           relations: Sequence[str] | None = None) -> Template:
    """Reverse direction: ``[CLS] [MASK] [SEP] r [SEP] <e_t> d_t [SEP]``."""
    rec = entities[tail]
    if relations is not None and relation not in relations:
        raise VocabularyError(f"unknown relation {relation!r}")
    tokens = [CLS, MASK, SEP, *tokenize(relation), SEP, entity_token(rec.id), *tokenize(rec.description), SEP]
    return Template(tokens, 1)


def encode_tokens(tokens: Sequence[str], vocab: Vocab, entities: EntityVocabulary | None = None) -> list[int]:
    ids = []
    for tok in tokens:
        if tok.startswith("<e:") and tok.endswith(">"):
            if entities is None:
                raise VocabularyError(f"entity token {tok} without an entity vocabulary")
            ids.append(len(vocab) + entities.row(tok[3:-1]))
        else:
            ids.append(vocab.id(tok))
    return ids


def masked_entity_logits(h_mask, entity_table) -> Tensor:
    """Inner product of the [MASK] state with every entity row: ``(..., d) -> (..., |E|)``."""
    h_mask, entity_table = ag.as_tensor(h_mask), ag.as_tensor(entity_table)
    if h_mask.shape[-1] != entity_table.shape[-1]:
        raise ShapeError(f"hidden width {h_mask.shape[-1]} vs entity width {entity_table.shape[-1]}")
    return h_mask @ ag.swap_last(entity_table)


def relation_classify(h_cls, weight) -> Tensor:
    """``softmax(W h_[CLS])`` with ``W`` stored as ``d x |classes|``."""
    h_cls, weight = ag.as_tensor(h_cls), ag.as_tensor(weight)
    return ag.softmax(h_cls @ weight)


# ---------------------------------------------------------------------------
# BIO


def bio_allowed(prev: str | None, cur: str) -> bool:
    """Whether tag ``cur`` may follow ``prev`` (``None`` = sentence start)."""
    if not cur.startswith("I-"):
        return True
    if prev is None or prev == "O":
        return False
    return prev[2:] == cur[2:] and prev[:2] in ("B-", "I-")


def validate_bio(tags: Sequence[str]) -> None:
    prev = None
    for i, tag in enumerate(tags):
        if tag != "O" and tag[:2] not in ("B-", "I-"):
            raise LabelError(f"tag {tag!r} at position {i} is not BIO")
        if not bio_allowed(prev, tag):
            raise LabelError(f"tag {tag!r} at position {i} cannot follow {prev or 'sentence start'!r}")
        prev = tag


def bio_spans(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """Half-open ``(start, end, type)`` spans; a stray ``I-X`` opens a new span."""
    spans = set()
    start, kind = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        inside = tag.startswith("I-") and kind == tag[2:]
        if start is not None and not inside:
            spans.add((start, i, kind))
            start, kind = None, None
        if tag.startswith("B-") or (tag.startswith("I-") and not inside):
            start, kind = i, tag[2:]
    return spans


# ---------------------------------------------------------------------------
# CRF


@dataclass
class CRFParams:
    """Emission projection plus a ``(|Y|+2) x (|Y|+2)`` transition matrix.

    Index ``|Y|`` is the virtual start tag and ``|Y|+1`` the virtual end tag.
    """

    tags: list[str]
    emit_w: Parameter
    emit_b: Parameter
    transitions: Parameter
    constrained: bool = False

    @classmethod
    def init(cls, tags: Sequence[str] | int, d: int, rng: np.random.Generator, std: float = 0.02,
             constrained: bool = False):
        tags = [f"T{i}" for i in range(tags)] if isinstance(tags, int) else list(tags)
        y = len(tags)
        return cls(
            tags,
            Parameter(rng.normal(0, std, (d, y)), "head.crf.emit_w"),
            Parameter(np.zeros((1, y)), "head.crf.emit_b"),
            Parameter(np.zeros((y + 2, y + 2)), "head.crf.transitions"),
            constrained,
        )

    @classmethod
    def from_transitions(cls, transitions, tags: Sequence[str] | None = None, constrained: bool = False):
        transitions = np.asarray(transitions, dtype=np.float64)
        y = transitions.shape[0] - 2
        tags = list(tags) if tags is not None else [f"T{i}" for i in range(y)]
        return cls(tags, Parameter(np.zeros((1, y)), "head.crf.emit_w"), Parameter(np.zeros((1, y)), "head.crf.emit_b"),
                   Parameter(transitions, "head.crf.transitions"), constrained)

    @property
    def n_tags(self) -> int:
        return len(self.tags)

    @property
    def start(self) -> int:
        return self.n_tags

    @property
    def end(self) -> int:
        return self.n_tags + 1

    def parameters(self) -> list[Parameter]:
        return [self.emit_w, self.emit_b, self.transitions]

    def hard_mask(self) -> np.ndarray:
        """Additive mask: ``-inf`` on BIO-illegal transitions, zero elsewhere."""
        y = self.n_tags
        mask = np.zeros((y + 2, y + 2))
        if not self.constrained:
            return mask
        for j, cur in enumerate(self.tags):
            if not bio_allowed(None, cur):
                mask[self.start, j] = -np.inf
            for i, prev in enumerate(self.tags):
                if not bio_allowed(prev, cur):
                    mask[i, j] = -np.inf
        return mask

    def effective_transitions(self) -> Tensor:
        if self.constrained:
            return self.transitions + self.hard_mask()
        return self.transitions

    def emissions(self, hidden) -> Tensor:
        return ag.as_tensor(hidden) @ self.emit_w + self.emit_b

    def tag_ids(self, tags: Sequence[str]) -> list[int]:
        index = {t: i for i, t in enumerate(self.tags)}
        try:
            return [index[t] for t in tags]
        except KeyError as exc:
            raise LabelError(f"unknown tag {exc.args[0]!r}") from None


def _batched(emissions, lengths):
    em = ag.as_tensor(emissions)
    single = em.ndim == 2
    if single:
        em = ag.reshape(em, (1, *em.shape))
    b, n, _ = em.shape
    if n < 1:
        raise ShapeError("CRF needs at least one position")
    lengths = np.full(b, n) if lengths is None else np.asarray(lengths)
    if lengths.shape != (b,) or np.any(lengths < 1) or np.any(lengths > n):
        raise ShapeError(f"invalid lengths {lengths} for emissions of shape {em.shape}")
    return em, lengths, single


def crf_log_partition(emissions, params: CRFParams, lengths=None) -> Tensor:
    """Log of the sum over all tag sequences of ``exp(score)`` via the forward algorithm.

    ``emissions`` is ``(n, |Y|)`` or ``(B, n, |Y|)``; ``lengths`` gives the
    number of valid positions per sequence.
    """
    em, lengths, single = _batched(emissions, lengths)
    y = params.n_tags
    if em.shape[-1] != y:
        raise ShapeError(f"emissions have {em.shape[-1]} tags, CRF has {y}")
    trans = params.effective_transitions()
    inner = ag.index(trans, (slice(0, y), slice(0, y)))
    alpha = ag.index(trans, (params.start, slice(0, y))) + em[:, 0, :]
    for t in range(1, em.shape[1]):
        step = ag.logsumexp(ag.reshape(alpha, (*alpha.shape, 1)) + inner + ag.reshape(em[:, t, :], (em.shape[0], 1, y)), axis=1)
        alpha = ag.where((t < lengths)[:, None], step, alpha)
    out = ag.logsumexp(alpha + ag.index(trans, (slice(0, y), params.end)), axis=-1)
    return ag.reshape(out, ()) if single else out


def crf_sequence_score(emissions, tags, params: CRFParams, lengths=None) -> Tensor:
    em, lengths, single = _batched(emissions, lengths)
    tags = np.asarray(tags)
    if single:
        tags = tags[None, :]
    b, n, y = em.shape
    if tags.shape[0] != b or tags.shape[1] < lengths.max():
        raise ShapeError(f"tags of shape {tags.shape} do not cover emissions {em.shape}")
    tags = tags[:, :n]
    valid = np.arange(n)[None, :] < lengths[:, None]
    safe = np.where(valid, tags, 0)
    trans = params.effective_transitions()
    rows = np.repeat(np.arange(b), n).reshape(b, n)
    cols = np.tile(np.arange(n), (b, 1))
    emit = ag.sum(em[rows, cols, safe] * valid.astype(float), axis=1)
    first = trans[np.full(b, params.start), safe[:, 0]]
    score = emit + first
    if n > 1:
        pair_valid = valid[:, 1:].astype(float)
        score = score + ag.sum(trans[safe[:, :-1], safe[:, 1:]] * pair_valid, axis=1)
    last = safe[np.arange(b), lengths - 1]
    score = score + trans[last, np.full(b, params.end)]
    return ag.reshape(score, ()) if single else score


def crf_nll(emissions, gold_tags, params: CRFParams, lengths=None) -> Tensor:
    """Mean negative log-likelihood of the gold sequences."""
    gold = np.asarray(gold_tags)
    if params.constrained:
        rows = gold[None, :] if gold.ndim == 1 else gold
        lens = [rows.shape[1]] * rows.shape[0] if lengths is None else list(lengths)
        for r, ln in zip(rows, lens):
            validate_bio([params.tags[int(t)] for t in r[:ln]])
    z = crf_log_partition(emissions, params, lengths)
    s = crf_sequence_score(emissions, gold, params, lengths)
    return ag.mean(z - s)


def crf_viterbi(emissions, params: CRFParams) -> list[int]:
    """Best-scoring tag sequence for one ``(n, |Y|)`` emission matrix.

    Ties resolve to the lower tag index.
    """
    em = np.asarray(ag.as_tensor(emissions).data, dtype=np.float64)
    if em.ndim != 2 or em.shape[0] < 1:
        raise ShapeError(f"viterbi expects (n, |Y|) emissions, got {em.shape}")
    y = params.n_tags
    trans = params.transitions.data + params.hard_mask()
    inner = trans[:y, :y]
    score = trans[params.start, :y] + em[0]
    back = []
    for t in range(1, em.shape[0]):
        cand = score[:, None] + inner
        best_prev = np.argmax(cand, axis=0)
        score = cand[best_prev, np.arange(y)] + em[t]
        back.append(best_prev)
    score = score + trans[:y, params.end]
    path = [int(np.argmax(score))]
    for bp in reversed(back):
        path.append(int(bp[path[-1]]))
    return path[::-1]
