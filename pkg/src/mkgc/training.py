"""Losses, optimisation and evaluation for the three tasks.

Link prediction runs in two phases: first only the entity rows are fitted
against ``[CLS] d_e is the description of [MASK] [SEP]`` (cross-entropy over
entities, everything else frozen), then the whole model is trained on
``(h, r, ?)`` and ``(?, r, t)`` queries with a multilabel BCE over entities.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .data import SequenceExample, TripleStore, load_link_dataset, load_sequence_corpus, pad_images
from .encoders import ModelConfig
from .errors import InputError, LengthError, ParseError, ShapeError
from .heads import (
    CLS, DESCRIPTION_SUFFIX, HEAD_CLOSE, HEAD_OPEN, SEP, TAIL_CLOSE, TAIL_OPEN,
    EntityVocabulary, RelationLabelSet, Vocab, build_entity_modeling_input, build_head_query_input,
    build_triple_query_input, crf_nll, crf_viterbi, encode_tokens, masked_entity_logits, tokenize,
)
from .metrics import MetricsReport, evaluate_f1, filtered_rank, ranking_report
from .model import HybridTransformer

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MKGC"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    task: str = "link"
    data_dir: str = ""
    epochs: int = 100
    entity_epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    entity_lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_split: str = "test"
    k_shot: int = 0
    seeds: int = 1
    null_label: str = ""
    bio_constraints: bool = True
    stop_at: float = 0.0  # stop once the headline metric on eval_split reaches this (0 = never)
    eval_every: int = 10

    def __post_init__(self):
        if self.task not in ("link", "re", "ner"):
            raise InputError(f"unknown task {self.task!r}")
        if self.lr <= 0 or self.entity_lr <= 0:
            raise InputError("learning rate must be positive")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with bias correction; frozen parameters are skipped entirely."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p in self.params:
            if p.frozen:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ShapeError(f"{p.name}: gradient shape {g.shape} != {p.data.shape}")
            m = self.m[id(p)]
            v = self.v[id(p)]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# encoded inputs


@dataclass
class Example:
    ids: list[int]
    images: np.ndarray  # (o, H, W, C)
    mask_index: int = 0
    target: object = None
    gold: int = -1
    known: tuple[int, ...] = ()
    length: int = 0


@dataclass
class Batch:
    token_ids: np.ndarray
    pad_mask: np.ndarray
    images: np.ndarray
    examples: list[Example]

    @property
    def size(self) -> int:
        return len(self.examples)


def collate(examples: Sequence[Example], pad_id: int = 0) -> Batch:
    n = max(len(e.ids) for e in examples)
    ids = np.full((len(examples), n), pad_id, dtype=np.int64)
    mask = np.zeros((len(examples), n), dtype=bool)
    for i, e in enumerate(examples):
        ids[i, : len(e.ids)] = e.ids
        mask[i, : len(e.ids)] = True
    images = np.stack([e.images for e in examples])
    return Batch(ids, mask, images, list(examples))


def iterate_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator | None = None,
                    pad_id: int = 0):
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield collate([examples[i] for i in order[start:start + batch_size]], pad_id)


def _check_len(ids: list[int], cfg: ModelConfig) -> list[int]:
    if len(ids) > cfg.max_len:
        raise LengthError(f"sequence of {len(ids)} tokens exceeds max_len={cfg.max_len}")
    return ids


@dataclass
class LinkData:
    entities: EntityVocabulary
    store: TripleStore
    vocab: Vocab
    relations: list[str]

    @classmethod
    def load(cls, data_dir, cfg: ModelConfig) -> "LinkData":
        entities, store = load_link_dataset(data_dir, cfg.n_images, (cfg.height, cfg.width, cfg.channels))
        return cls.build(entities, store)

    @classmethod
    def build(cls, entities: EntityVocabulary, store: TripleStore) -> "LinkData":
        words = set(DESCRIPTION_SUFFIX)
        for rec in entities.records:
            words.update(tokenize(rec.description))
        relations = store.relations()
        for r in relations:
            words.update(tokenize(r))
        return cls(entities, store, Vocab(sorted(words)), relations)

    def entity_examples(self, cfg: ModelConfig) -> list[Example]:
        out = []
        for rec in self.entities.records:
            tpl = build_entity_modeling_input(rec)
            ids = _check_len(encode_tokens(tpl.tokens, self.vocab, self.entities), cfg)
            out.append(Example(ids, np.stack(rec.images), tpl.mask_index, target=self.entities.row(rec.id)))
        return out

    def query_examples(self, cfg: ModelConfig, split: str = "train", train_targets: bool = True) -> list[Example]:
        """Tail and head queries for ``split``.

        With ``train_targets`` the queries are deduplicated and carry a 0/1
        target over all entities built from the training triples; otherwise
        there is one query per triple and direction with ``gold`` and the
        filter set ``known``.
        """
        n_ent = len(self.entities)
        out = []
        seen = set()
        for h, r, t in self.store.triples(split):
            for direction in ("tail", "head"):
                anchor, gold = (h, t) if direction == "tail" else (t, h)
                key = (direction, anchor, r)
                if train_targets and key in seen:
                    continue
                seen.add(key)
                if direction == "tail":
                    tpl = build_triple_query_input(h, r, self.entities, self.relations)
                    positives = {x for hh, rr, x in self.store.triples("train") if hh == h and rr == r}
                    known = self.store.tails[(h, r)]
                else:
                    tpl = build_head_query_input(t, r, self.entities, self.relations)
                    positives = {x for x, rr, tt in self.store.triples("train") if tt == t and rr == r}
                    known = self.store.heads[(r, t)]
                ids = _check_len(encode_tokens(tpl.tokens, self.vocab, self.entities), cfg)
                images = np.stack(self.entities[anchor].images)
                target = None
                if train_targets:
                    target = np.zeros(n_ent)
                    target[[self.entities.row(e) for e in positives]] = 1.0
                out.append(Example(ids, images, tpl.mask_index, target=target, gold=self.entities.row(gold),
                                   known=tuple(sorted(self.entities.row(e) for e in known))))
        return out


def mark_spans(tokens: Sequence[str], head: tuple[int, int], tail: tuple[int, int]) -> list[str]:
    """Wrap the head span in ``<h> ... </h>`` and the tail span in ``<t> ... </t>``."""
    out = []
    for i in range(len(tokens) + 1):
        if head[1] == i:
            out.append(HEAD_CLOSE)
        if tail[1] == i:
            out.append(TAIL_CLOSE)
        if head[0] == i:
            out.append(HEAD_OPEN)
        if tail[0] == i:
            out.append(TAIL_OPEN)
        if i < len(tokens):
            out.append(tokens[i].lower())
    return out


@dataclass
class SequenceData:
    task: str
    splits: dict[str, list[SequenceExample]]
    vocab: Vocab
    labels: list[str] = field(default_factory=list)  # RE classes or NER tags

    @classmethod
    def load(cls, data_dir, task: str, cfg: ModelConfig, enforce_bio: bool = True) -> "SequenceData":
        data_dir = Path(data_dir)
        shape = (cfg.height, cfg.width, cfg.channels)
        splits = {}
        for split in ("train", "dev", "test"):
            p = data_dir / f"{split}.txt"
            splits[split] = load_sequence_corpus(p, task, shape, cfg.n_images, enforce_bio) if p.exists() else []
        if not splits["train"]:
            raise InputError(f"{data_dir}: no training examples")
        return cls.build(task, splits)

    @classmethod
    def build(cls, task: str, splits: dict[str, list[SequenceExample]]) -> "SequenceData":
        words, labels = set(), set()
        for exs in splits.values():
            for ex in exs:
                words.update(t.lower() for t in ex.tokens)
                if task == "re":
                    labels.add(ex.relation)
                else:
                    labels.update(t[2:] for t in ex.tags if t != "O")
        if task == "re":
            label_list = sorted(labels)
        else:
            label_list = ["O"] + [f"{p}-{k}" for k in sorted(labels) for p in ("B", "I")]
        return cls(task, splits, Vocab(sorted(words)), label_list)

    def examples(self, split: str, cfg: ModelConfig, subset: Sequence[SequenceExample] | None = None) -> list[Example]:
        source = self.splits.get(split, []) if subset is None else subset
        shape = (cfg.height, cfg.width, cfg.channels)
        out = []
        for ex in source:
            images = np.stack(ex.images if ex.images else pad_images([], cfg.n_images, shape))
            if self.task == "re":
                toks = [CLS, *mark_spans(ex.tokens, ex.head, ex.tail), SEP]
                ids = _check_len(encode_tokens(toks, self.vocab), cfg)
                out.append(Example(ids, images, 0, target=self.labels.index(ex.relation)))
            else:
                toks = [CLS, *(t.lower() for t in ex.tokens), SEP]
                ids = _check_len(encode_tokens(toks, self.vocab), cfg)
                tag_ids = np.array([self.labels.index(t) for t in ex.tags])
                out.append(Example(ids, images, 0, target=tag_ids, length=len(ex.tokens)))
        return out


# ---------------------------------------------------------------------------
# losses


def _rows_at(hidden: Tensor, positions: np.ndarray) -> Tensor:
    return hidden[np.arange(hidden.shape[0]), positions]


def entity_modeling_loss(model: HybridTransformer, batch: Batch) -> Tensor:
    h_t, _, _ = model.encode(batch.token_ids, batch.images, batch.pad_mask)
    h_mask = _rows_at(h_t, np.array([e.mask_index for e in batch.examples]))
    logits = masked_entity_logits(h_mask, model.entity)
    return ag.cross_entropy(logits, np.array([e.target for e in batch.examples]))


def link_loss(model: HybridTransformer, batch: Batch) -> Tensor:
    h_t, _, _ = model.encode(batch.token_ids, batch.images, batch.pad_mask)
    h_mask = _rows_at(h_t, np.array([e.mask_index for e in batch.examples]))
    logits = masked_entity_logits(h_mask, model.entity)
    return ag.binary_cross_entropy(logits, np.stack([e.target for e in batch.examples]))


def re_loss(model: HybridTransformer, batch: Batch) -> Tensor:
    h_t, _, _ = model.encode(batch.token_ids, batch.images, batch.pad_mask)
    logits = model.class_logits(h_t[:, 0, :])
    return ag.cross_entropy(logits, np.array([e.target for e in batch.examples]))


def _ner_emissions(model: HybridTransformer, batch: Batch):
    h_t, _, _ = model.encode(batch.token_ids, batch.images, batch.pad_mask)
    lengths = np.array([e.length for e in batch.examples])
    n = int(lengths.max())
    return model.crf.emissions(h_t[:, 1:1 + n, :]), lengths


def ner_loss(model: HybridTransformer, batch: Batch) -> Tensor:
    em, lengths = _ner_emissions(model, batch)
    gold = np.zeros((batch.size, em.shape[1]), dtype=np.int64)
    for i, e in enumerate(batch.examples):
        gold[i, : e.length] = e.target
    return crf_nll(em, gold, model.crf, lengths)


LOSSES: dict[str, Callable[[HybridTransformer, Batch], Tensor]] = {
    "entity": entity_modeling_loss,
    "link": link_loss,
    "re": re_loss,
    "ner": ner_loss,
}


# ---------------------------------------------------------------------------
# loops


def fit(model: HybridTransformer, examples: Sequence[Example], loss_fn, epochs: int, lr: float,
        batch_size: int, seed: int, betas=(0.9, 0.999), eps: float = 1e-8,
        on_epoch: Callable[[int, float], bool | None] | None = None) -> list[float]:
    """Minibatch Adam over the unfrozen parameters; returns the mean loss per epoch.

    ``on_epoch(epoch, loss)`` may return True to stop early.
    """
    params = [p for p in model.parameters() if not p.frozen]
    opt = Adam(params, lr, betas, eps)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for batch in iterate_batches(examples, batch_size, rng):
            opt.zero_grad()
            loss = loss_fn(model, batch)
            loss.backward()
            opt.step()
            total += float(loss) * batch.size
            count += batch.size
        history.append(total / count)
        if on_epoch is not None and on_epoch(epoch, history[-1]):
            break
    return history


def train_entity_modeling(model: HybridTransformer, data: LinkData, mcfg: ModelConfig, tcfg: TrainConfig) -> list[float]:
    """Fit only the entity rows; every other parameter stays bit-identical."""
    model.freeze_all_but([model.entity])
    try:
        return fit(model, data.entity_examples(mcfg), entity_modeling_loss, tcfg.entity_epochs, tcfg.entity_lr,
                   tcfg.batch_size, tcfg.seed, (tcfg.beta1, tcfg.beta2), tcfg.adam_eps)
    finally:
        model.unfreeze()


def train_link_prediction(model: HybridTransformer, data: LinkData, mcfg: ModelConfig, tcfg: TrainConfig,
                          queries: list[Example] | None = None, on_epoch=None) -> list[float]:
    model.unfreeze()
    queries = data.query_examples(mcfg, "train") if queries is None else queries
    return fit(model, queries, link_loss, tcfg.epochs, tcfg.lr, tcfg.batch_size, tcfg.seed + 1,
               (tcfg.beta1, tcfg.beta2), tcfg.adam_eps, on_epoch)


def train_classifier_head(model: HybridTransformer, examples: list[Example], tcfg: TrainConfig,
                          on_epoch=None) -> list[float]:
    model.unfreeze()
    loss = re_loss if tcfg.task == "re" else ner_loss
    return fit(model, examples, loss, tcfg.epochs, tcfg.lr, tcfg.batch_size, tcfg.seed + 1,
               (tcfg.beta1, tcfg.beta2), tcfg.adam_eps, on_epoch)


# ---------------------------------------------------------------------------
# evaluation


def score_queries(model: HybridTransformer, queries: Sequence[Example], batch_size: int = 64) -> np.ndarray:
    rows = []
    with ag.no_grad():
        for batch in iterate_batches(queries, batch_size):
            h_t, _, _ = model.encode(batch.token_ids, batch.images, batch.pad_mask)
            h_mask = _rows_at(h_t, np.array([e.mask_index for e in batch.examples]))
            rows.append(masked_entity_logits(h_mask, model.entity).data)
    return np.concatenate(rows)


def evaluate_ranking(model: HybridTransformer, data: LinkData, mcfg: ModelConfig, split: str = "test") -> MetricsReport:
    """Filtered MR and Hits@{1,3,10} over head and tail queries of ``split``."""
    queries = data.query_examples(mcfg, split, train_targets=False)
    if not queries:
        raise InputError(f"split {split!r} is empty")
    scores = score_queries(model, queries)
    ranks = [filtered_rank(s, q.gold, q.known) for s, q in zip(scores, queries)]
    rep = ranking_report(ranks)
    rep.meta["split"] = split
    return rep


def predict_classes(model: HybridTransformer, examples: Sequence[Example], batch_size: int = 64) -> list[int]:
    preds = []
    with ag.no_grad():
        for batch in iterate_batches(examples, batch_size):
            h_t, _, _ = model.encode(batch.token_ids, batch.images, batch.pad_mask)
            preds.extend(np.argmax(model.class_logits(h_t[:, 0, :]).data, axis=-1).tolist())
    return preds


def predict_tags(model: HybridTransformer, examples: Sequence[Example], batch_size: int = 64) -> list[list[int]]:
    out = []
    with ag.no_grad():
        for batch in iterate_batches(examples, batch_size):
            em, lengths = _ner_emissions(model, batch)
            for i, n in enumerate(lengths):
                out.append(crf_viterbi(em.data[i, :n], model.crf))
    return out


def evaluate_sequence_task(model: HybridTransformer, data: SequenceData, examples: Sequence[Example],
                           null_label: str = "") -> MetricsReport:
    if not examples:
        raise InputError("no examples to evaluate")
    if data.task == "re":
        pred = [data.labels[i] for i in predict_classes(model, examples)]
        gold = [data.labels[e.target] for e in examples]
        return evaluate_f1(pred, gold, "micro", [null_label] if null_label else [])
    pred = [[data.labels[i] for i in seq] for seq in predict_tags(model, examples)]
    gold = [[data.labels[i] for i in e.target] for e in examples]
    return evaluate_f1(pred, gold, "span")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: HybridTransformer) -> None:
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            rows, cols = p.data.shape
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError("not a checkpoint file", path=str(path))
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path=str(path))
    off = 10
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + ln].decode("utf-8")
        off += ln
        rows, cols = struct.unpack_from("<II", raw, off)
        off += 8
        nbytes = 8 * rows * cols
        state[name] = np.frombuffer(raw[off:off + nbytes], dtype="<f8").reshape(rows, cols).copy()
        off += nbytes
    if off != len(raw):
        raise ParseError("trailing bytes after last parameter", path=str(path))
    return state


# ---------------------------------------------------------------------------
# end-to-end runs


@dataclass
class RunResult:
    model: HybridTransformer
    report: MetricsReport
    history: list[float]
    entity_history: list[float] = field(default_factory=list)
    frozen_intact: bool | None = None


def build_model(task: str, data, mcfg: ModelConfig, seed: int) -> HybridTransformer:
    if task == "link":
        return HybridTransformer(mcfg, len(data.vocab), n_entities=len(data.entities), seed=seed)
    if task == "re":
        return HybridTransformer(mcfg, len(data.vocab), n_classes=len(data.labels), seed=seed)
    return HybridTransformer(mcfg, len(data.vocab), tags=data.labels, seed=seed)


def load_task_data(task: str, data_dir, mcfg: ModelConfig, tcfg: TrainConfig | None = None):
    if task == "link":
        return LinkData.load(data_dir, mcfg)
    return SequenceData.load(data_dir, task, mcfg, enforce_bio=True if tcfg is None else tcfg.bio_constraints)


def headline(report: MetricsReport) -> float:
    """Hits@1 for ranking reports, F1 otherwise."""
    return report.hits1 if report.hits1 is not None else report.f1


def _early_stop(model, data, mcfg: ModelConfig, tcfg: TrainConfig):
    if tcfg.stop_at <= 0:
        return None

    def check(epoch: int, loss: float) -> bool:
        if (epoch + 1) % tcfg.eval_every:
            return False
        score = headline(evaluate(model, data, mcfg, tcfg))
        log.info("epoch %d loss %.6g %s %.4f", epoch + 1, loss, tcfg.eval_split, score)
        return score >= tcfg.stop_at

    return check


def evaluate(model: HybridTransformer, data, mcfg: ModelConfig, tcfg: TrainConfig, split: str | None = None) -> MetricsReport:
    split = split or tcfg.eval_split
    if tcfg.task == "link":
        return evaluate_ranking(model, data, mcfg, split)
    rep = evaluate_sequence_task(model, data, data.examples(split, mcfg), tcfg.null_label)
    rep.meta["split"] = split
    return rep


def run_training(data, mcfg: ModelConfig, tcfg: TrainConfig, seed: int | None = None,
                 subset: Sequence | None = None) -> RunResult:
    """Build a fresh model and train it on ``data`` for ``tcfg.task``.

    ``subset`` restricts training to a K-shot sample (triples for link,
    examples otherwise).
    """
    seed = tcfg.seed if seed is None else seed
    model = build_model(tcfg.task, data, mcfg, seed)
    if tcfg.task == "link":
        before = {n: v for n, v in model.state_dict().items() if n != "embed.entity"}
        ent_hist = train_entity_modeling(model, data, mcfg, tcfg)
        after = model.state_dict()
        intact = all(np.array_equal(v, after[n]) for n, v in before.items())
        queries = None
        if subset is not None:
            sub = TripleStore()
            for tr in subset:
                sub.add(*tr, split="train")
            sub.tails, sub.heads = data.store.tails, data.store.heads
            queries = LinkData(data.entities, sub, data.vocab, data.relations).query_examples(mcfg, "train")
        hist = train_link_prediction(model, data, mcfg, tcfg, queries, _early_stop(model, data, mcfg, tcfg))
        report = evaluate(model, data, mcfg, tcfg)
        return RunResult(model, report, hist, ent_hist, intact)
    examples = data.examples("train", mcfg, subset)
    hist = train_classifier_head(model, examples, tcfg, _early_stop(model, data, mcfg, tcfg))
    report = evaluate(model, data, mcfg, tcfg)
    return RunResult(model, report, hist)
