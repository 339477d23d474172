from __future__ import annotations

import numpy as np
import pytest

from lilt_lab import adapters as ad
from lilt_lab import corpus, encoders, freeze
from lilt_lab import tensor as T
from lilt_lab.encoders import DualEncoder, TowerConfig

from .conftest import micro_size, random_ids


@pytest.fixture(scope="module")
def tiny():
    return DualEncoder.create("tiny", seed=3)


def test_text_output_shape_and_identical_rows(tiny, rng):
    ids = np.repeat(random_ids(rng, 1, 16), 3, axis=0)
    h = tiny.encode_text(ids)
    assert h.shape == (3, 128)
    assert np.array_equal(h.data[0], h.data[1]) and np.array_equal(h.data[1], h.data[2])


def test_appending_pads_leaves_non_pad_positions_unchanged(rng):
    with T.precision(64):
        m = DualEncoder.create(micro_size(), seed=0)
        ids = random_ids(rng, 3, 4, vocab=20)
        padded = np.concatenate([ids, np.zeros((3, 2), dtype=ids.dtype)], axis=1)
        a = m.encode_text(ids).data
        b = m.encode_text(padded).data
    # position embeddings for the pads are added, but pads are masked out of attention
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_vocabulary_error(tiny):
    with pytest.raises(encoders.VocabularyError):
        tiny.encode_text(np.array([[1, 512]]))


def test_image_token_count_and_shape(tiny, rng):
    cfg = tiny.size.image
    assert cfg.n_tokens == (32 // 8) ** 2 + 1
    assert tiny.params["image.embed.position"].shape == (cfg.n_tokens, 128)
    h = tiny.encode_image(rng.uniform(-1, 1, (2, 3, 32, 32)))
    assert h.shape == (2, 128)


def test_image_wrong_resolution(tiny):
    with pytest.raises(T.ShapeError):
        tiny.encode_image(np.zeros((1, 3, 16, 16)))


def test_batch_permutation_permutes_rows(tiny, rng):
    px = rng.uniform(-1, 1, (5, 3, 32, 32)).astype(np.float32)
    perm = np.array([3, 0, 4, 1, 2])
    a = tiny.encode_image(px).data
    b = tiny.encode_image(px[perm]).data
    np.testing.assert_allclose(b, a[perm], rtol=1e-5, atol=1e-6)


def test_distinct_images_distinct_embeddings(tiny, rng):
    px = rng.uniform(-1, 1, (2, 3, 32, 32))
    h = tiny.encode_image(px).data
    assert not np.allclose(h[0], h[1])


def test_projection_unit_norm(tiny, rng):
    z = tiny.embed_image(rng.uniform(-1, 1, (4, 3, 32, 32)))
    np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), 1.0, atol=1e-6)


def test_zero_projection_is_degenerate(rng):
    m = DualEncoder.create("tiny", seed=0)
    m.params["head.text_proj"].data[:] = 0
    with pytest.raises(T.DegenerateEmbeddingError):
        m.embed_text(random_ids(rng, 2, 16))


def test_seed_determinism():
    a, b = DualEncoder.create("tiny", seed=11), DualEncoder.create("tiny", seed=11)
    c = DualEncoder.create("tiny", seed=12)
    assert all(a.params[p].data.tobytes() == b.params[p].data.tobytes() for p in a.params)
    assert any(a.params[p].data.tobytes() != c.params[p].data.tobytes() for p in a.params)


def test_schema_matches_instantiated_model():
    m = DualEncoder.create("tiny", seed=0)
    for spec in (ad.AdapterSpec("layerwise"), ad.AdapterSpec("deep", count=2)):
        ad.insert(m, spec)
    shapes, _ = encoders.model_schema(m.size, m.adapter_specs)
    assert shapes == m.shapes()


def test_base_proj_dim_and_projection_params():
    base = encoders.size_preset("base")
    assert base.proj_dim == 256
    shapes = encoders.head_schema(base)
    assert shapes["head.image_proj"] == (768, 256)
    proj = encoders.param_count({k: v for k, v in shapes.items() if k.endswith("_proj")})
    assert proj == 2 * 768 * 256 == 393_216


def test_schema_only_sizes_refuse_allocation():
    with pytest.raises(encoders.ModelConfigError):
        DualEncoder.create("base")


def test_tower_config_validation():
    with pytest.raises(encoders.ModelConfigError):
        TowerConfig("text", 2, 10, 3, vocab_size=5, max_seq_len=4)
    with pytest.raises(encoders.ModelConfigError):
        TowerConfig("image", 2, 8, 2, image_size=10, patch_size=4)


def test_asymmetric_size():
    s = encoders.size_preset("base:bert_tiny")
    assert s.image.hidden == 768 and s.text.hidden == 128
    acc = freeze.schema_count(s, freeze.FreezePlan(("**",)))
    assert acc.percent_trained == 100.0


def test_paper_literal_fixes_temperature():
    assert DualEncoder.create("tiny", paper_literal=True).log_tau().data == 0.0
    assert abs(float(DualEncoder.create("tiny").log_tau().data) - np.log(0.07)) < 1e-6


def test_metadata_records_block_ordering_and_gelu(tiny):
    meta = tiny.metadata()
    assert meta["block_ordering"] == "pre-ln"
    assert meta["gelu"] in ("erf", "tanh")
