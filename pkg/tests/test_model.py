import numpy as np
import pytest

from mkgc.encoders import ModelConfig
from mkgc.model import HybridTransformer

CFG = ModelConfig(d_model=8, n_heads=2, d_ff=16, n_fusion_layers=2, height=4, width=4, patch=2, max_len=10)


def test_parameter_names_are_unique_and_heads_optional():
    m = HybridTransformer(CFG, 12, n_entities=3)
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))
    assert "embed.entity" in names and "head.re" not in names and "fusion.1.w3" in names
    m = HybridTransformer(CFG, 12, n_classes=4, tags=["O", "B-X", "I-X"])
    names = {n for n, _ in m.named_parameters()}
    assert {"head.re", "head.crf.transitions"} <= names and "embed.entity" not in names


def test_ablation_shapes():
    import dataclasses

    m = HybridTransformer(dataclasses.replace(CFG, independent=True), 12)
    assert len(m.text_blocks) == 1 + 2 and len(m.visual_blocks) == 1 + 2 and len(m.fusion) == 2
    m = HybridTransformer(dataclasses.replace(CFG, no_caf=True), 12)
    assert all(layer.w3 is None for layer in m.fusion)


def test_encode_shapes_and_batching(rng):
    m = HybridTransformer(CFG, 12, n_entities=3, seed=1)
    ids = np.array([[1, 4, 12, 2], [1, 14, 2, 0]])
    mask = ids != 0
    images = rng.normal(size=(2, 2, 4, 4, 1))
    t, v, _ = m.encode(ids, images, mask)
    assert t.shape == (2, 4, 8) and v.shape == (2, 8, 8)
    t0, _, _ = m.encode(ids[0], images[0])
    np.testing.assert_allclose(t.data[0], t0.data, atol=1e-12)
    t1, _, _ = m.encode(ids[1, :3], images[1])
    np.testing.assert_allclose(t.data[1, :3], t1.data, atol=1e-10)


def test_state_dict_roundtrip_and_mismatch():
    a, b = HybridTransformer(CFG, 12, seed=1), HybridTransformer(CFG, 12, seed=2)
    b.load_state_dict(a.state_dict())
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    with pytest.raises(KeyError):
        b.load_state_dict({"embed.word": a.word.data})
    state = a.state_dict()
    state["embed.word"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        b.load_state_dict(state)


def test_freeze_all_but():
    m = HybridTransformer(CFG, 12, n_entities=3)
    m.freeze_all_but([m.entity])
    assert [p.name for p in m.parameters() if not p.frozen] == ["embed.entity"]
    m.unfreeze()
    assert not any(p.frozen for p in m.parameters())
