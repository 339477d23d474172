from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lilt_lab import corpus
from lilt_lab.corpus import CorpusError, SyntheticSpec


@pytest.fixture(scope="module")
def default_corpus():
    spec = SyntheticSpec()
    return corpus.generate(spec), spec


def test_generation_is_deterministic(default_corpus):
    records, spec = default_corpus
    again = corpus.generate(spec)
    assert [r.caption for r in records] == [r.caption for r in again]
    assert all(a.pixels.tobytes() == b.pixels.tobytes() for a, b in zip(records, again))
    other = corpus.generate(SyntheticSpec(n_pairs=64, seed=1))
    assert [r.caption for r in other] != [r.caption for r in records[:64]]


def test_default_corpus_covers_every_combination_once(default_corpus):
    records, _ = default_corpus
    assert len(records) == 512
    assert len({r.caption for r in records}) == 512
    assert [r.id for r in records] == list(range(512))
    assert records[0].pixels.shape == (32, 32, 3) and records[0].pixels.dtype == np.uint8


def test_images_are_injective_in_attributes(default_corpus):
    records, _ = default_corpus
    assert len({r.pixels.tobytes() for r in records}) == len(records)


def test_caption_parse_round_trip(default_corpus):
    records, spec = default_corpus
    for r in records[:50]:
        assert corpus.parse_caption(r.caption, spec) == r.attributes
    with pytest.raises(CorpusError):
        corpus.parse_caption("a giant red circle in the top left", spec)


def test_caption_example():
    spec = SyntheticSpec()
    assert corpus.caption_for(("circle", "red", "top left", "large"), spec) == "a large red circle in the top left"


def test_render_places_shape_in_its_quadrant():
    spec = SyntheticSpec()
    img = corpus.render(("square", "red", "bottom right", "medium"), spec)
    painted = np.all(img == corpus.COLORS["red"], axis=-1)
    ys, xs = np.nonzero(painted)
    assert ys.min() >= 16 and xs.min() >= 16
    assert not painted[:16].any() and not painted[:, :16].any()


def test_sizes_grow():
    spec = SyntheticSpec()
    areas = [
        np.all(corpus.render(("circle", "blue", "top left", s), spec) == corpus.COLORS["blue"], axis=-1).sum()
        for s in spec.sizes
    ]
    assert areas == sorted(areas) and len(set(areas)) == len(areas)


def test_model_input_range_and_layout(default_corpus):
    records, _ = default_corpus
    x = corpus.to_model_input(np.stack([r.pixels for r in records[:4]]))
    assert x.shape == (4, 3, 32, 32) and x.dtype == np.float32
    assert x.min() >= -1.0 and x.max() <= 1.0


def test_split_is_disjoint_and_sized(default_corpus):
    records, spec = default_corpus
    train, held = corpus.split(records, spec)
    assert len(held) == 64 and len(train) == 448
    assert not {r.id for r in train} & {r.id for r in held}


def test_tokenize_examples():
    spec = SyntheticSpec()
    vocab = corpus.build_vocab(spec)
    ids = corpus.tokenize("a large red circle in the top left", vocab, 16)
    assert ids[0] == corpus.CLS
    assert (ids[9:] == corpus.PAD).all() and (ids[1:9] > corpus.UNK).all()
    assert corpus.detokenize(ids, vocab) == "a large red circle in the top left"
    # case folds and unknown words map to [unk]
    assert corpus.tokenize("A Zebra", vocab, 4).tolist() == [corpus.CLS, vocab.id_of("a"), corpus.UNK, corpus.PAD]
    assert len(corpus.tokenize(" ".join(["red"] * 40), vocab, 16)) == 16


def test_vocab_fits_tiny_text_tower():
    assert corpus.build_vocab(SyntheticSpec(colors=tuple(corpus.COLORS))).size < 512


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 200), data=st.data())
def test_batch_iter_partitions(n, data):
    b = data.draw(st.integers(1, n))
    seed, epoch = data.draw(st.integers(0, 100)), data.draw(st.integers(0, 100))
    batches = list(corpus.batch_iter(n, b, seed, epoch))
    assert len(batches) == n // b and all(len(x) == b for x in batches)
    flat = np.concatenate(batches)
    assert len(set(flat.tolist())) == len(flat)
    assert flat.min() >= 0 and flat.max() < n


def test_batch_iter_rejects_oversized_batch():
    with pytest.raises(CorpusError):
        list(corpus.batch_iter(4, 5, 0, 0))


def test_save_load_round_trip(tmp_path):
    spec = SyntheticSpec(n_pairs=20, seed=4)
    records = corpus.generate(spec)
    corpus.save_corpus(records, spec, tmp_path)
    loaded, spec2 = corpus.load_corpus(tmp_path)
    assert spec2 == spec
    assert [(r.id, r.caption, r.attributes) for r in loaded] == [(r.id, r.caption, r.attributes) for r in records]
    assert all(a.pixels.tobytes() == b.pixels.tobytes() for a, b in zip(loaded, records))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"shapes": ("hexagon",)},
        {"colors": ("mauve",)},
        {"positions": ("center",)},
        {"image_size": 7},
        {"n_pairs": 10_000},
        {"n_pairs": 0},
    ],
)
def test_invalid_specs(kwargs):
    with pytest.raises(CorpusError):
        corpus.generate(SyntheticSpec(**kwargs))


def test_unknown_spec_keys():
    with pytest.raises(CorpusError):
        SyntheticSpec.from_dict({"n_pairs": 3, "flavour": "x"})


def test_non_unique_sampling_allows_repeats():
    records = corpus.generate(SyntheticSpec(n_pairs=600, unique=False))
    assert len(records) == 600 and len({r.caption for r in records}) < 600
