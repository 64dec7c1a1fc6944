import math

import numpy as np
import pytest

from mkgc import autograd as ag
from mkgc.autograd import Parameter
from mkgc.data import SequenceExample, TripleStore, generate_synthetic
from mkgc.encoders import ModelConfig
from mkgc.errors import InputError, ParseError, ShapeError
from mkgc.heads import HEAD_CLOSE, HEAD_OPEN, TAIL_CLOSE, TAIL_OPEN, EntityRecord, EntityVocabulary
from mkgc.training import (
    Adam, LinkData, SequenceData, TrainConfig, build_model, collate, entity_modeling_loss, evaluate_ranking,
    iterate_batches, load_checkpoint, mark_spans, run_training, save_checkpoint, train_entity_modeling,
)

SMALL = ModelConfig(d_model=8, n_heads=2, d_ff=16, n_fusion_layers=1, height=4, width=4, patch=2, max_len=32)


@pytest.fixture(scope="module")
def link_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("link")
    generate_synthetic("link", d, seed=0, n_entities=6, n_relations=2, n_triples=8, n_test=2, image_shape=(4, 4, 1))
    return LinkData.load(d, SMALL)


def test_adam_zero_grad_and_frozen():
    p = Parameter(np.ones((2, 2)), "p")
    f = Parameter(np.ones((2, 2)), "f", frozen=True)
    opt = Adam([p, f])
    opt.step()
    np.testing.assert_array_equal(p.data, 1.0)
    f.grad[...] = 5.0
    p.grad[...] = 1.0
    opt.step()
    np.testing.assert_array_equal(f.data, 1.0)
    assert np.all(p.data < 1.0)
    p.grad = np.ones(3)
    with pytest.raises(ShapeError):
        opt.step()


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.zeros((1, 3)), "p")
    opt = Adam([p], lr=0.1)
    p.grad[...] = [[2.0, -3.0, 0.5]]
    opt.step()
    np.testing.assert_allclose(p.data, [[-0.1, 0.1, -0.1]], atol=1e-8)


def _ten_steps(seed):
    r = np.random.default_rng(seed)
    w = Parameter(r.normal(size=(3, 3)), "w")
    x = r.normal(size=(5, 3))
    opt = Adam([w])
    for _ in range(10):
        opt.zero_grad()
        ag.sum(ag.relu(x @ w) * (x @ w)).backward()
        opt.step()
    return w.data


def test_adam_is_deterministic():
    np.testing.assert_array_equal(_ten_steps(4), _ten_steps(4))


def test_mark_spans():
    toks = ["a", "b", "c", "d"]
    assert mark_spans(toks, (0, 1), (2, 4)) == [HEAD_OPEN, "a", HEAD_CLOSE, "b", TAIL_OPEN, "c", "d", TAIL_CLOSE]
    assert mark_spans(toks, (3, 4), (0, 3)) == [TAIL_OPEN, "a", "b", "c", TAIL_CLOSE, HEAD_OPEN, "d", HEAD_CLOSE]


def test_collate_pads(link_data):
    exs = link_data.entity_examples(SMALL)[:3]
    b = collate(exs)
    assert b.token_ids.shape[0] == 3 and b.images.shape == (3, 2, 4, 4, 1)
    for i, e in enumerate(exs):
        assert b.pad_mask[i].sum() == len(e.ids)
        assert np.all(b.token_ids[i, len(e.ids):] == 0)
    assert sum(bt.size for bt in iterate_batches(exs, 2)) == 3


def test_query_targets(link_data):
    queries = link_data.query_examples(SMALL, "train")
    store = link_data.store
    for h, r, t in store.triples("train"):
        rows = [q for q in queries if q.ids[1] == len(link_data.vocab) + link_data.entities.row(h)
                and q.mask_index != 1]
        tails = {x for hh, rr, x in store.triples("train") if (hh, rr) == (h, r)}
        match = [q for q in rows if all(q.target[link_data.entities.row(x)] == 1 for x in tails)]
        assert match
    # evaluation queries: one per triple and direction, filters cover all splits
    ev = link_data.query_examples(SMALL, "test", train_targets=False)
    assert len(ev) == 2 * len(store.triples("test"))
    for q in ev:
        assert q.gold in q.known


def test_all_positive_target():
    ents = EntityVocabulary([EntityRecord("a", "A", "x", [np.zeros((4, 4, 1))] * 2),
                             EntityRecord("b", "B", "y", [np.zeros((4, 4, 1))] * 2)])
    store = TripleStore()
    store.add("a", "r", "a")
    store.add("a", "r", "b")
    data = LinkData.build(ents, store)
    tail_q = [q for q in data.query_examples(SMALL) if q.mask_index != 1]
    np.testing.assert_array_equal(tail_q[0].target, [1.0, 1.0])


def test_single_entity_loss_is_zero():
    ents = EntityVocabulary([EntityRecord("a", "A", "x", [np.zeros((4, 4, 1))] * 2)])
    data = LinkData.build(ents, TripleStore())
    model = build_model("link", data, SMALL, 0)
    b = collate(data.entity_examples(SMALL))
    assert float(entity_modeling_loss(model, b)) == pytest.approx(0.0, abs=1e-12)


def test_entity_phase_touches_only_entity_rows(link_data):
    model = build_model("link", link_data, SMALL, 0)
    before = model.state_dict()
    hist = train_entity_modeling(model, link_data, SMALL, TrainConfig(entity_epochs=50, batch_size=4))
    after = model.state_dict()
    for name, value in before.items():
        if name == "embed.entity":
            assert not np.array_equal(value, after[name])
        else:
            np.testing.assert_array_equal(value, after[name])
    assert hist[49] < hist[0]
    assert not any(p.frozen for p in model.parameters())


def test_link_run_is_deterministic_and_reports(link_data):
    cfg = TrainConfig(task="link", epochs=3, entity_epochs=2, batch_size=4, eval_split="test")
    a = run_training(link_data, SMALL, cfg)
    b = run_training(link_data, SMALL, cfg)
    assert a.report.to_text() == b.report.to_text() and a.frozen_intact
    assert a.report.count == 2 * len(link_data.store.triples("test"))
    assert a.report.hits1 <= a.report.hits3 <= a.report.hits10
    with pytest.raises(InputError):
        evaluate_ranking(a.model, link_data, SMALL, "dev")


def test_one_class_re_is_trivially_perfect():
    exs = [SequenceExample(["a", "b", "c"], head=(0, 1), tail=(2, 3), relation="only") for _ in range(4)]
    data = SequenceData.build("re", {"train": exs})
    res = run_training(data, SMALL, TrainConfig(task="re", epochs=2, batch_size=4, eval_split="train"))
    assert res.report.f1 == 1.0
    assert res.history[-1] == pytest.approx(0.0, abs=1e-12)


def test_ner_labels_cover_both_prefixes():
    exs = [SequenceExample(["a", "b"], tags=["B-X", "O"]), SequenceExample(["c"], tags=["B-Y"])]
    data = SequenceData.build("ner", {"train": exs})
    assert data.labels == ["O", "B-X", "I-X", "B-Y", "I-Y"]
    encoded = data.examples("train", SMALL)
    assert encoded[0].length == 2 and list(encoded[0].target) == [1, 0]


def test_checkpoint_roundtrip(tmp_path, link_data):
    model = build_model("link", link_data, SMALL, 3)
    save_checkpoint(tmp_path / "m.mkgc", model)
    raw = (tmp_path / "m.mkgc").read_bytes()
    assert raw[:4] == b"MKGC" and int.from_bytes(raw[4:6], "little") == 1
    state = load_checkpoint(tmp_path / "m.mkgc")
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(state[name], value)
    other = build_model("link", link_data, SMALL, 4)
    other.load_state_dict(state)
    np.testing.assert_array_equal(other.entity.data, model.entity.data)
    (tmp_path / "bad.mkgc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "bad.mkgc")
    (tmp_path / "long.mkgc").write_bytes(raw + b"\0")
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "long.mkgc")


def test_train_config_validation():
    with pytest.raises(InputError):
        TrainConfig(task="vqa")
    with pytest.raises(InputError):
        TrainConfig(lr=0)
    assert math.isclose(TrainConfig().lr, 1e-3)
