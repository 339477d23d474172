"""Bidirectional retrieval recall and zero-shot classification.

Ranks break ties toward the lower candidate index, so every metric is a
deterministic function of the similarity matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import corpus, kernels
from . import tensor as T

RANKS = (1, 5, 10)
DEFAULT_TEMPLATE = "a photo of {}"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    pattern: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if self.pattern.count("{}") != 1:
            raise ValueError(f"prompt template needs exactly one '{{}}' placeholder: {self.pattern!r}")

    def fill(self, name: str) -> str:
        return self.pattern.format(name)


@dataclass
class RetrievalResult:
    tr_at: dict  # rank -> recall (percent), image queries over texts
    ir_at: dict  # rank -> recall (percent), text queries over images

    @property
    def mean_tr(self) -> float:
        return float(np.mean([self.tr_at[k] for k in RANKS]))

    @property
    def mean_ir(self) -> float:
        return float(np.mean([self.ir_at[k] for k in RANKS]))

    def to_dict(self) -> dict:
        out = {f"tr@{k}": self.tr_at[k] for k in RANKS}
        out.update({f"ir@{k}": self.ir_at[k] for k in RANKS})
        out["mean_tr"] = self.mean_tr
        out["mean_ir"] = self.mean_ir
        return out


def match_ranks(sim: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """1-based rank of ``target[q]`` among the columns of row ``q``."""
    return kernels.match_ranks(np.asarray(sim), np.asarray(target, dtype=np.int64))


def recall_from_ranks(ranks: np.ndarray, ks=RANKS) -> dict:
    return {k: 100.0 * float(np.mean(ranks <= k)) for k in ks}


def retrieval_from_similarity(sim: np.ndarray, text_to_image: Sequence[int] | None = None) -> RetrievalResult:
    """Recall@k in both directions for an image x text similarity matrix.

    ``text_to_image[j]`` is the image described by text ``j``; by default the
    pairing is the identity (one caption per image). With several captions
    per image an image query counts as a hit if any of its captions ranks
    within ``k``.
    """
    sim = np.asarray(sim)
    n_img, n_txt = sim.shape
    if text_to_image is None:
        if n_img != n_txt:
            raise DataError("identity pairing needs a square similarity matrix")
        t2i = np.arange(n_txt)
    else:
        t2i = np.asarray(text_to_image, dtype=np.int64)
        if t2i.shape != (n_txt,) or t2i.min() < 0 or t2i.max() >= n_img:
            raise DataError("text_to_image must map every text to a valid image")
        if len(np.unique(t2i)) != n_img:
            raise DataError("every image needs at least one caption")
    ir_ranks = match_ranks(sim.T, t2i)
    if n_img == n_txt and np.array_equal(t2i, np.arange(n_txt)):
        tr_ranks = match_ranks(sim, np.arange(n_img))
    else:
        # best-ranked caption per image
        tr_ranks = np.full(n_img, n_txt + 1, dtype=np.int64)
        for j in range(n_txt):
            img = t2i[j]
            r = match_ranks(sim[img : img + 1], [j])[0]
            tr_ranks[img] = min(tr_ranks[img], r)
    return RetrievalResult(recall_from_ranks(tr_ranks), recall_from_ranks(ir_ranks))


def _check_pair_ids(pair_ids) -> None:
    if pair_ids is None:
        return
    ids = list(pair_ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate pair ids")


def embed_images(model, pixels: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model.embed_image(pixels[i : i + batch_size]).data for i in range(0, len(pixels), batch_size)]
    return np.concatenate(out, axis=0)


def embed_texts(model, token_ids: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model.embed_text(token_ids[i : i + batch_size]).data for i in range(0, len(token_ids), batch_size)]
    return np.concatenate(out, axis=0)


def retrieval(model, pixels: np.ndarray, token_ids: np.ndarray, text_to_image=None, pair_ids=None) -> RetrievalResult:
    """Embed images and texts with ``model`` and score retrieval."""
    _check_pair_ids(pair_ids)
    zi = embed_images(model, pixels)
    zt = embed_texts(model, token_ids)
    return retrieval_from_similarity(zi.astype(np.float64) @ zt.T.astype(np.float64), text_to_image)


def topk_accuracy(sim: np.ndarray, labels: Sequence[int], ks=(1, 5)) -> dict:
    """Percent of rows whose label is within the top ``k`` columns."""
    n_classes = sim.shape[1]
    for k in ks:
        if k > n_classes:
            raise ValueError(f"top-{k} requested with only {n_classes} classes")
    ranks = match_ranks(sim, labels)
    return {k: 100.0 * float(np.mean(ranks <= k)) for k in ks}


def zero_shot_classify(
    model,
    pixels: np.ndarray,
    labels: Sequence[int],
    class_names: Sequence[str],
    vocab: corpus.TokenVocab,
    template: PromptTemplate | str = DEFAULT_TEMPLATE,
    ks=(1, 5),
) -> dict:
    """Top-k accuracy of prompt-based classification (ties -> lowest class index)."""
    if not class_names:
        raise ValueError("need at least one class")
    if isinstance(template, str):
        template = PromptTemplate(template)
    ks = tuple(k for k in ks if k <= len(class_names)) if ks == (1, 5) else ks
    prompts = [template.fill(c) for c in class_names]
    ids = corpus.tokenize_batch(prompts, vocab, model.size.text.max_seq_len)
    zt = embed_texts(model, ids)
    zi = embed_images(model, pixels)
    acc = topk_accuracy(zi.astype(np.float64) @ zt.T.astype(np.float64), labels, ks)
    return {f"top{k}": v for k, v in acc.items()}


def evaluate_records(model, records: Sequence[corpus.PairRecord], vocab: corpus.TokenVocab) -> RetrievalResult:
    pixels = corpus.to_model_input(np.stack([r.pixels for r in records]), T.default_dtype())
    ids = corpus.tokenize_batch([r.caption for r in records], vocab, model.size.text.max_seq_len)
    return retrieval(model, pixels, ids, pair_ids=[r.id for r in records])
