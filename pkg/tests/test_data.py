import logging

import numpy as np
import pytest

from mkgc.data import (
    TripleStore, generate_synthetic, load_entities, load_link_dataset, load_sequence_corpus, load_triples,
    pad_images, planted_re_rule, read_image, sample_k_shot, save_sequence_corpus, write_image,
)
from mkgc.errors import InputError, LabelError, ParseError, VocabularyError
from mkgc.heads import build_entity_modeling_input


def test_triples(tmp_path, caplog):
    p = tmp_path / "t.tsv"
    p.write_text("a\tr\tb\nb\tr\tc\n\nc\ts\ta\n")
    store = load_triples(p)
    assert len(store) == 3 and store.tails[("a", "r")] == {"b"} and store.heads[("s", "a")] == {"c"}
    p.write_text("a\tr\tb\na\tr\tb\n")
    with caplog.at_level(logging.WARNING):
        store = load_triples(p)
    assert len(store) == 1 and "duplicate" in caplog.text.lower()


def test_triples_errors(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("a\tr\tb\na\tr\n")
    with pytest.raises(ParseError, match=":2:"):
        load_triples(p)


def test_store_indexes_span_splits():
    s = TripleStore()
    assert s.add("a", "r", "b", "train") and not s.add("a", "r", "b", "train")
    s.add("a", "r", "c", "test")
    assert s.tails[("a", "r")] == {"b", "c"} and s.train_tails("a", "r") == {"b"}


def test_images_roundtrip_and_padding(tmp_path):
    img = np.arange(12, dtype=float).reshape(2, 3, 2)
    write_image(tmp_path / "x.img", img)
    np.testing.assert_array_equal(read_image(tmp_path / "x.img"), img)
    (tmp_path / "bad.img").write_bytes(b"nope")
    with pytest.raises(ParseError):
        read_image(tmp_path / "bad.img")
    a, b = np.ones((2, 2, 1)), np.full((2, 2, 1), 2.0)
    padded = pad_images([a, b], 3, (2, 2, 1))
    assert [float(x[0, 0, 0]) for x in padded] == [1, 2, 2]
    assert all(np.all(x == 0) for x in pad_images([], 2, (2, 2, 1)))


def test_entities(tmp_path, caplog):
    shape = (2, 2, 1)
    for i in (1, 2):
        write_image(tmp_path / f"i{i}.img", np.full(shape, float(i)))
    p = tmp_path / "entities.tsv"
    p.write_text("e1\tOne\tfirst thing\ti1.img,i2.img\ne2\tTwo\t\tmissing.img\n")
    with caplog.at_level(logging.WARNING):
        ents = load_entities(p, tmp_path, 3, shape)
    assert [float(x[0, 0, 0]) for x in ents["e1"].images] == [1, 2, 2]
    assert np.all(ents["e2"].images[0] == 0) and "missing" in caplog.text
    assert build_entity_modeling_input(ents["e2"]).tokens[1] == "is"
    assert len(load_entities(p, tmp_path, 1, shape)["e1"].images) == 1
    p.write_text("e1\tOne\n")
    with pytest.raises(ParseError):
        load_entities(p, tmp_path, 1, shape)


def test_link_dataset_rejects_unknown_entities(tmp_path):
    generate_synthetic("link", tmp_path, seed=0, n_entities=5, n_relations=2, n_triples=6)
    with open(tmp_path / "train.tsv", "a") as fh:
        fh.write("e0\trel0\tghost\n")
    with pytest.raises(VocabularyError):
        load_link_dataset(tmp_path, 2, (8, 8, 1))


def test_sequence_corpora(tmp_path):
    p = tmp_path / "ner.txt"
    p.write_text("John lives here\tB-PER O O\t\nParis\tB-LOC\t\n")
    assert len(load_sequence_corpus(p, "ner")) == 2
    p.write_text("John lives\tB-PER O O\t\n")
    with pytest.raises(ParseError, match=":1:"):
        load_sequence_corpus(p, "ner")
    p.write_text("a b\tI-PER O\t\n")
    with pytest.raises(LabelError):
        load_sequence_corpus(p, "ner")
    assert len(load_sequence_corpus(p, "ner", enforce_bio=False)) == 1
    r = tmp_path / "re.txt"
    r.write_text("a b c d\t0:2\t1:3\trel\t\n")
    with pytest.raises(ParseError, match="overlap"):
        load_sequence_corpus(r, "re")
    r.write_text("a b c d\t0:1\t2:5\trel\t\n")
    with pytest.raises(ParseError):
        load_sequence_corpus(r, "re")
    r.write_text("a b c d\t0:1\t2:4\trel\t\n")
    ex = load_sequence_corpus(r, "re")
    save_sequence_corpus(ex, tmp_path / "copy.txt", "re")
    assert (tmp_path / "copy.txt").read_text() == r.read_text()


@pytest.mark.parametrize("task", ["link", "re", "ner"])
def test_generators_are_deterministic(tmp_path, task):
    generate_synthetic(task, tmp_path / "a", seed=3)
    generate_synthetic(task, tmp_path / "b", seed=3)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_link_generator_counts(tmp_path):
    generate_synthetic("link", tmp_path, seed=0)
    ents, store = load_link_dataset(tmp_path, 2, (8, 8, 1))
    assert len(ents) == 20 and len(store.relations()) == 5
    assert len(set(store.triples("train"))) == 100


def test_re_generator_has_planted_rule(tmp_path):
    generate_synthetic("re", tmp_path, seed=1)
    examples = load_sequence_corpus(tmp_path / "train.txt", "re")
    assert len(examples) == 80 and len({e.relation for e in examples}) == 4
    assert all(planted_re_rule(e.tokens, 4) == e.relation for e in examples)


def test_ner_generator(tmp_path):
    generate_synthetic("ner", tmp_path, seed=1)
    examples = load_sequence_corpus(tmp_path / "train.txt", "ner", (8, 8, 1), 1)
    assert len(examples) == 80
    assert {t[2:] for e in examples for t in e.tags if t != "O"} == {"PER", "LOC", "ORG"}
    assert all(len(e.images) == 1 for e in examples)


def test_k_shot():
    data = [("x", i % 4) for i in range(100)]
    key = lambda e: e[1]  # noqa: E731
    assert len(sample_k_shot(data, 1, 0, key)) == 4
    assert len(sample_k_shot(data, 1000, 0, key)) == 100
    a, b = sample_k_shot(list(enumerate(data)), 5, 0, lambda e: e[1][1]), sample_k_shot(list(enumerate(data)), 5, 1, lambda e: e[1][1])
    assert len(a) == len(b) == 20 and a != b
    with pytest.raises(InputError):
        sample_k_shot([], 1, 0)
    with pytest.raises(InputError):
        sample_k_shot(data, 0, 0, key)
