"""Corpora on disk: KG triples, entity records with images, RE/NER corpora,
deterministic synthetic generators and K-shot subsampling."""

from __future__ import annotations

import logging
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InputError, LabelError, ParseError, ShapeError, VocabularyError
from .heads import EntityRecord, EntityVocabulary, validate_bio

log = logging.getLogger(__name__)

IMAGE_MAGIC = b"MKGI"
SPLITS = ("train", "dev", "test")


# ---------------------------------------------------------------------------
# images


def write_image(path, image) -> None:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"image must be H x W x C, got {image.shape}")
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != IMAGE_MAGIC or len(raw) < 16:
        raise ParseError("not an MKGI image file", path=str(path))
    h, w, c = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if len(body) != 4 * h * w * c:
        raise ParseError(f"expected {h * w * c} floats, found {len(body) // 4}", path=str(path))
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(h, w, c)


def pad_images(images: Sequence[np.ndarray], count: int, shape: tuple[int, int, int]) -> list[np.ndarray]:
    """Exactly ``count`` images: truncate, repeat the last one, or use a zero image."""
    images = list(images)[:count]
    if not images:
        return [np.zeros(shape) for _ in range(count)]
    while len(images) < count:
        images.append(images[-1])
    return images


def _load_image_list(paths: Sequence[str], base: Path, shape: tuple[int, int, int]) -> list[np.ndarray]:
    out = []
    for rel in paths:
        p = base / rel
        if not p.exists():
            log.warning("missing image %s; substituting a zero image", p)
            out.append(np.zeros(shape))
            continue
        img = read_image(p)
        if img.shape != tuple(shape):
            raise ShapeError(f"{p}: image shape {img.shape}, expected {tuple(shape)}")
        out.append(img)
    return out


# ---------------------------------------------------------------------------
# triples


class TripleStore:
    """Triples per split with ``(h, r) -> tails`` and ``(r, t) -> heads`` indexes.

    The indexes cover every split currently loaded, which is the filtered
    setting: all known positives are removed when ranking.
    """

    def __init__(self):
        self.splits: dict[str, list[tuple[str, str, str]]] = {s: [] for s in SPLITS}
        self._seen: dict[str, set] = {s: set() for s in SPLITS}
        self.tails: dict[tuple[str, str], set[str]] = defaultdict(set)
        self.heads: dict[tuple[str, str], set[str]] = defaultdict(set)

    def add(self, head: str, relation: str, tail: str, split: str = "train") -> bool:
        if split not in self.splits:
            raise InputError(f"unknown split {split!r}")
        triple = (head, relation, tail)
        if triple in self._seen[split]:
            return False
        self._seen[split].add(triple)
        self.splits[split].append(triple)
        self.tails[(head, relation)].add(tail)
        self.heads[(relation, tail)].add(head)
        return True

    def __len__(self) -> int:
        return sum(len(v) for v in self.splits.values())

    def triples(self, split: str = "train") -> list[tuple[str, str, str]]:
        return self.splits[split]

    def relations(self) -> list[str]:
        return sorted({r for trs in self.splits.values() for _, r, _ in trs})

    def entities(self) -> list[str]:
        return sorted({e for trs in self.splits.values() for h, _, t in trs for e in (h, t)})

    def train_tails(self, head: str, relation: str) -> set[str]:
        return {t for h, r, t in self.splits["train"] if h == head and r == relation}


def load_triples(path, split: str = "train", store: TripleStore | None = None,
                 entities: EntityVocabulary | None = None) -> TripleStore:
    """Read ``head<TAB>relation<TAB>tail`` lines; blank lines are skipped."""
    store = TripleStore() if store is None else store
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise ParseError(f"expected head<TAB>relation<TAB>tail, got {line!r}", lineno, str(path))
            h, r, t = parts
            if entities is not None:
                for e in (h, t):
                    if e not in entities:
                        raise VocabularyError(f"{path}:{lineno}: unknown entity {e!r}")
            if not store.add(h, r, t, split):
                log.warning("%s:%d: duplicate triple %s dropped", path, lineno, (h, r, t))
    return store


def save_triples(store: TripleStore, path, split: str = "train") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in sorted(store.triples(split)):
            fh.write(f"{h}\t{r}\t{t}\n")


def load_link_dataset(data_dir, n_images: int, image_shape: tuple[int, int, int]) -> tuple[EntityVocabulary, TripleStore]:
    data_dir = Path(data_dir)
    entities = load_entities(data_dir / "entities.tsv", data_dir, n_images, image_shape)
    store = TripleStore()
    for split in SPLITS:
        p = data_dir / f"{split}.tsv"
        if p.exists():
            load_triples(p, split, store, entities)
    if not store.triples("train"):
        raise InputError(f"{data_dir}: no training triples")
    return entities, store


# ---------------------------------------------------------------------------
# entities


def load_entities(path, image_dir, n_images: int, image_shape: tuple[int, int, int]) -> EntityVocabulary:
    """Read ``id<TAB>name<TAB>description<TAB>img1,img2,...`` records.

    Each record ends up with exactly ``n_images`` images.
    """
    image_dir = Path(image_dir)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4 or not parts[0]:
                raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", lineno, str(path))
            eid, name, desc, imgs = parts
            paths = [p for p in imgs.split(",") if p]
            if len(paths) > n_images:
                paths = paths[:n_images]
            images = pad_images(_load_image_list(paths, image_dir, image_shape), n_images, image_shape)
            records.append(EntityRecord(eid, name, desc, images))
    return EntityVocabulary(records)


# ---------------------------------------------------------------------------
# sequence corpora


@dataclass
class SequenceExample:
    tokens: list[str]
    tags: list[str] | None = None
    head: tuple[int, int] | None = None
    tail: tuple[int, int] | None = None
    relation: str | None = None
    image_path: str = ""
    images: list = field(default_factory=list)

    @property
    def label(self) -> str:
        """Class used for K-shot sampling: the relation, or the first entity type."""
        if self.relation is not None:
            return self.relation
        for tag in self.tags or ():
            if tag != "O":
                return tag[2:]
        return "O"


def _span(text: str, lineno: int, path) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise ParseError(f"bad span {text!r}", lineno, str(path)) from None


def load_sequence_corpus(path, task: str, image_shape: tuple[int, int, int] | None = None,
                         n_images: int = 1, enforce_bio: bool = True) -> list[SequenceExample]:
    """Read an NER or RE corpus (one record per line, tab-separated)."""
    if task not in ("ner", "re"):
        raise ValueError(f"unknown task {task!r}")
    base = Path(path).parent
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            tokens = parts[0].split()
            if task == "ner":
                if len(parts) != 3:
                    raise ParseError(f"NER record needs 3 fields, got {len(parts)}", lineno, str(path))
                tags = parts[1].split()
                if len(tags) != len(tokens):
                    raise ParseError(f"{len(tags)} tags for {len(tokens)} tokens", lineno, str(path))
                if enforce_bio:
                    try:
                        validate_bio(tags)
                    except LabelError as exc:
                        raise LabelError(str(exc), lineno, str(path)) from None
                ex = SequenceExample(tokens, tags=tags, image_path=parts[2])
            else:
                if len(parts) != 5:
                    raise ParseError(f"RE record needs 5 fields, got {len(parts)}", lineno, str(path))
                head, tail = _span(parts[1], lineno, path), _span(parts[2], lineno, path)
                for s, e in (head, tail):
                    if not 0 <= s < e <= len(tokens):
                        raise ParseError(f"span {s}:{e} outside 0:{len(tokens)}", lineno, str(path))
                if head[0] < tail[1] and tail[0] < head[1]:
                    raise ParseError(f"head {head} and tail {tail} overlap", lineno, str(path))
                ex = SequenceExample(tokens, head=head, tail=tail, relation=parts[3], image_path=parts[4])
            if image_shape is not None:
                paths = [p for p in ex.image_path.split(",") if p]
                ex.images = pad_images(_load_image_list(paths, base, image_shape), n_images, image_shape)
            out.append(ex)
    return out


def save_sequence_corpus(examples: Iterable[SequenceExample], path, task: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            if task == "ner":
                fh.write(f"{' '.join(ex.tokens)}\t{' '.join(ex.tags)}\t{ex.image_path}\n")
            else:
                fh.write(f"{' '.join(ex.tokens)}\t{ex.head[0]}:{ex.head[1]}\t{ex.tail[0]}:{ex.tail[1]}"
                         f"\t{ex.relation}\t{ex.image_path}\n")


# ---------------------------------------------------------------------------
# K-shot


def sample_k_shot(examples: Sequence, k: int, seed: int, key: Callable = None) -> list:
    """``min(k, class size)`` examples per class, without replacement.

    Output keeps the source order so the subset is independent of dict order.
    """
    if not examples:
        raise InputError("cannot sample from an empty dataset")
    if k < 1:
        raise InputError("k must be >= 1")
    key = key or (lambda ex: ex.label)
    by_class: dict = defaultdict(list)
    for i, ex in enumerate(examples):
        by_class[key(ex)].append(i)
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in sorted(by_class, key=str):
        idx = by_class[cls]
        take = min(k, len(idx))
        chosen.extend(rng.choice(idx, size=take, replace=False).tolist())
    return [examples[i] for i in sorted(chosen)]


# ---------------------------------------------------------------------------
# synthetic data

RE_RELATIONS = ("founded_by", "located_in", "member_of", "born_in", "works_for", "part_of", "married_to", "capital_of")
NER_TYPES = ("PER", "LOC", "ORG", "MISC")


def _trigger(label_index: int) -> str:
    return f"trig{label_index}"


def _filler(rng, pool: int = 30) -> str:
    return f"w{int(rng.integers(pool))}"


def _random_image(rng, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0, size=shape).astype(np.float32)


def generate_link(out_dir, seed: int = 0, n_entities: int = 20, n_relations: int = 5, n_triples: int = 100,
                  n_test: int = 0, n_images: int = 2, image_shape=(8, 8, 1)) -> Path:
    """KG whose relation ``r`` maps entity ``h`` to ``(a_r * h + b_r) mod N``.

    Every ``a_r`` is coprime to ``N``, so both the tail and the head of any
    query are unique. Images of entity ``i`` are noise around an
    entity-specific pattern.
    """
    if n_triples + n_test > n_entities * n_relations:
        raise InputError(f"at most {n_entities * n_relations} distinct (head, relation) pairs")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    coprime = [a for a in range(1, n_entities) if math.gcd(a, n_entities) == 1] or [1]
    params = [(int(rng.choice(coprime)), int(rng.integers(n_entities))) for _ in range(n_relations)]
    rel_names = [f"rel{r}" for r in range(n_relations)]

    with open(out / "entities.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for i in range(n_entities):
            base = rng.normal(0.0, 1.0, size=image_shape)
            count = int(rng.integers(1, n_images + 1))
            paths = []
            for j in range(count):
                rel = f"images/e{i}_{j}.mkgi"
                write_image(out / rel, (base + 0.1 * rng.normal(size=image_shape)).astype(np.float32))
                paths.append(rel)
            desc = f"ent{i} {_filler(rng, 10)} {_filler(rng, 10)}"
            fh.write(f"e{i}\tentity {i}\t{desc}\t{','.join(paths)}\n")

    pairs = [(h, r) for h in range(n_entities) for r in range(n_relations)]
    picked = rng.choice(len(pairs), size=n_triples + n_test, replace=False)
    triples = []
    for idx in picked:
        h, r = pairs[int(idx)]
        a, b = params[r]
        triples.append((f"e{h}", rel_names[r], f"e{(a * h + b) % n_entities}"))
    store = TripleStore()
    for tr in triples[:n_triples]:
        store.add(*tr, split="train")
    for tr in triples[n_triples:]:
        store.add(*tr, split="test")
    for split in SPLITS:
        save_triples(store, out / f"{split}.tsv", split)
    return out


def generate_re(out_dir, seed: int = 0, n_classes: int = 4, n_examples: int = 80, n_test: int = 0,
                image_shape=(8, 8, 1)) -> Path:
    """Sentences ``... <head> ... trig{c} ... <tail> ...`` whose label is fixed by the trigger word."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = list(RE_RELATIONS[:n_classes]) + [f"rel{c}" for c in range(len(RE_RELATIONS), n_classes)]
    examples = []
    for i in range(n_examples + n_test):
        c = i % n_classes
        head = [f"ent{int(rng.integers(20))}" for _ in range(int(rng.integers(1, 3)))]
        tail = [f"ent{int(rng.integers(20))}" for _ in range(int(rng.integers(1, 3)))]
        pre = [_filler(rng) for _ in range(int(rng.integers(0, 3)))]
        mid_a = [_filler(rng) for _ in range(int(rng.integers(0, 2)))]
        mid_b = [_filler(rng) for _ in range(int(rng.integers(0, 2)))]
        post = [_filler(rng) for _ in range(int(rng.integers(0, 3)))]
        first, second = (head, tail) if rng.random() < 0.5 else (tail, head)
        tokens = pre + first + mid_a + [_trigger(c)] + mid_b + second + post
        s1 = len(pre)
        s2 = len(pre) + len(first) + len(mid_a) + 1 + len(mid_b)
        span1, span2 = (s1, s1 + len(first)), (s2, s2 + len(second))
        h_span, t_span = (span1, span2) if first is head else (span2, span1)
        rel = f"images/re{i}.mkgi"
        write_image(out / rel, _random_image(rng, image_shape))
        examples.append(SequenceExample(tokens, head=h_span, tail=t_span, relation=names[c], image_path=rel))
    save_sequence_corpus(examples[:n_examples], out / "train.txt", "re")
    save_sequence_corpus(examples[n_examples:], out / "test.txt", "re")
    return out


def planted_re_rule(tokens: Sequence[str], n_classes: int = 4) -> str:
    """The generator's decision rule: the relation named by the trigger word."""
    names = list(RE_RELATIONS[:n_classes]) + [f"rel{c}" for c in range(len(RE_RELATIONS), n_classes)]
    for tok in tokens:
        if tok.startswith("trig"):
            return names[int(tok[4:])]
    raise ValueError("no trigger token")


def generate_ner(out_dir, seed: int = 0, n_types: int = 3, n_examples: int = 80, n_test: int = 0,
                 image_shape=(8, 8, 1)) -> Path:
    """Sentences mixing filler words with typed lexicon words (``per3``, ``loc7``...).

    Entities of 1-2 tokens are always separated by at least one filler word,
    so every tag follows from the token and its left neighbour.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    types = list(NER_TYPES[:n_types])
    examples = []
    for i in range(n_examples + n_test):
        tokens, tags = [], []
        for _ in range(int(rng.integers(1, 4))):
            for _ in range(int(rng.integers(1, 3))):
                tokens.append(_filler(rng))
                tags.append("O")
            kind = types[int(rng.integers(len(types)))]
            for j in range(int(rng.integers(1, 3))):
                tokens.append(f"{kind.lower()}{int(rng.integers(12))}")
                tags.append(("B-" if j == 0 else "I-") + kind)
        if rng.random() < 0.5:
            tokens.append(_filler(rng))
            tags.append("O")
        rel = f"images/ner{i}.mkgi"
        write_image(out / rel, _random_image(rng, image_shape))
        examples.append(SequenceExample(tokens, tags=tags, image_path=rel))
    save_sequence_corpus(examples[:n_examples], out / "train.txt", "ner")
    save_sequence_corpus(examples[n_examples:], out / "test.txt", "ner")
    return out


def generate_synthetic(task: str, out_dir, seed: int = 0, **size) -> Path:
    generators = {"link": generate_link, "re": generate_re, "ner": generate_ner}
    if task not in generators:
        raise InputError(f"unknown task {task!r}")
    return generators[task](out_dir, seed=seed, **size)
