"""Retrieval evaluation and two-stage inference.

Queries play the infrared stream and gallery items the visible stream.
Inference first ranks the whole gallery by cosine similarity of pooled
backbone features, then rescores only the top-K candidates with the
interaction decoder and the scoring head, so the expensive path runs a
constant number of times per query regardless of gallery size. All score
ties are broken by a stable per-item gallery key.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import qascore as qa
from .bci import BciStack, bci_stack_forward
from .encoder import EncoderModel, encode_batch, pool
from .synthdata import Dataset, SynthSample, GALLERY, QUERY


@dataclass
class InferenceConfig:
    top_k_candidates: int = 50
    use_bit_head: bool = True

    def validate(self) -> "InferenceConfig":
        if self.top_k_candidates < 1:
            raise ValueError("top_k_candidates must be >= 1")
        return self


@dataclass
class Models:
    """Everything inference needs: backbone, decoder, head, scoring config."""

    encoder: EncoderModel
    stack: BciStack
    head: qa.CasmHead
    qa_cfg: qa.QaConfig


@dataclass
class RetrievalResult:
    orders: list = field(default_factory=list)       # ranked gallery keys
    relevance: list = field(default_factory=list)    # aligned booleans
    cmc: np.ndarray | None = None
    mean_ap: float | None = None
    num_skipped: int = 0
    psi_evals_per_query: int = 0


def cmc_map(rankings, relevance):
    """Cumulative match curve and mean average precision.

    ``rankings`` is only consulted for its per-query length; ``relevance``
    holds the aligned hit flags. Queries without any relevant item are
    excluded and counted. Returns (cmc, mAP, num_skipped).
    """
    kept = []
    skipped = 0
    for order, rel in zip(rankings, relevance):
        rel = np.asarray(rel, dtype=bool)
        if len(order) != len(rel):
            raise ValueError("ranking and relevance lengths differ")
        if not rel.any():
            skipped += 1
            continue
        kept.append(rel)
    if not kept:
        raise ValueError("no query has a relevant gallery item")
    depth = len(kept[0])
    hits = np.zeros(depth)
    aps = []
    for rel in kept:
        first = int(np.argmax(rel))
        hits[first:] += 1.0
        cum = np.cumsum(rel)
        precisions = cum[rel] / (np.flatnonzero(rel) + 1.0)
        aps.append(precisions.mean())
    cmc = hits / len(kept)
    return cmc, float(np.mean(aps)), skipped


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def coarse_rank(query_pooled: np.ndarray, gallery_pooled: np.ndarray,
                gallery_keys):
    """Cosine ranking of pooled backbone features, ties by gallery key.

    Returns (order, scores) where ``order`` indexes the gallery in
    descending score and ``scores`` aligns with the gallery input order.
    """
    gallery_keys = np.asarray(gallery_keys)
    q = _unit_rows(query_pooled[None, :])[0]
    g = _unit_rows(gallery_pooled)
    scores = g @ q
    order = np.lexsort((gallery_keys, -scores))
    return order, scores


def score_pairs(query_feats: np.ndarray, candidate_feats: np.ndarray,
                stack: BciStack, head: qa.CasmHead,
                qa_cfg: qa.QaConfig) -> np.ndarray:
    """Match scores of one query against a stack of candidates.

    ``query_feats`` (N, C) rides the infrared stream, ``candidate_feats``
    (K, N, C) the visible stream. Runs untaped.
    """
    k = candidate_feats.shape[0]
    with dc.no_grad():
        f_v0 = dc.tensor(candidate_feats)
        f_i0 = dc.tensor(np.broadcast_to(query_feats, candidate_feats.shape).copy())
        f_v, f_i = bci_stack_forward(stack, f_v0, f_i0)
        psi, _, _ = qa.qa_forward_batch(f_v, f_i, qa_cfg, head)
    return psi.data.reshape(k)


def bit_rank(query: SynthSample, gallery: list[SynthSample], models: Models,
             cfg: InferenceConfig, *, precomputed=None):
    """Rank one query: coarse pass, then rescoring of the top-K candidates.

    Returns (order, psi_scores_by_gallery_index, psi_evals). Non-candidates
    keep their coarse order behind every rescored candidate. With
    ``use_bit_head`` off this degenerates exactly to coarse_rank.
    """
    cfg.validate()
    if precomputed is None:
        precomputed = precompute_gallery(gallery, models)
    gallery_feats, gallery_pooled, gallery_keys = precomputed
    with dc.no_grad():
        query_feats = encode_batch(models.encoder, [query])
        query_pooled = pool(query_feats).data[0]
    order, coarse_scores = coarse_rank(query_pooled, gallery_pooled,
                                       gallery_keys)
    if not cfg.use_bit_head:
        return order, {}, 0

    k = min(cfg.top_k_candidates, len(gallery))
    candidates = order[:k]
    psi = score_pairs(query_feats.data[0], gallery_feats[candidates],
                      models.stack, models.head, models.qa_cfg)
    cand_order = candidates[np.lexsort((gallery_keys[candidates], -psi))]
    final = np.concatenate([cand_order, order[k:]])
    psi_by_index = {int(g): float(s) for g, s in zip(candidates, psi)}
    return final, psi_by_index, k


def precompute_gallery(gallery: list[SynthSample], models: Models):
    with dc.no_grad():
        feats = encode_batch(models.encoder, gallery)
        pooled = pool(feats).data
    keys = np.array([s.identity for s in gallery])
    return feats.data, pooled, keys


def similarity_stats(values, labels) -> dict:
    """Means of positive- and negative-labeled scores and their gap."""
    values = np.asarray(values, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if values.shape != labels.shape:
        raise ValueError("values and labels must align")
    if labels.all() or not labels.any():
        raise ValueError("need at least one positive and one negative score")
    mean_pos = float(values[labels].mean())
    mean_neg = float(values[~labels].mean())
    return {"mean_pos": mean_pos, "mean_neg": mean_neg,
            "gap": mean_pos - mean_neg}


def evaluate(ds: Dataset, models: Models, cfg: InferenceConfig) -> dict:
    """Run every query of the dataset and assemble the evaluation report."""
    cfg.validate()
    gallery = ds.subset(split=GALLERY)
    queries = ds.subset(split=QUERY)
    if not gallery or not queries:
        raise ValueError("dataset has an empty query or gallery split")
    precomputed = precompute_gallery(gallery, models)
    _, gallery_pooled, gallery_keys = precomputed
    gallery_ids = np.array([s.identity for s in gallery])

    result = RetrievalResult()
    psi_values, psi_labels = [], []
    cosine_values, cosine_labels = [], []
    for query in queries:
        order, psi_by_index, evals = bit_rank(query, gallery, models, cfg,
                                              precomputed=precomputed)
        result.psi_evals_per_query = evals
        ranked_ids = gallery_ids[order]
        result.orders.append([int(gallery_keys[g]) for g in order])
        result.relevance.append((ranked_ids == query.identity).tolist())
        for g, s in sorted(psi_by_index.items()):
            psi_values.append(s)
            psi_labels.append(bool(gallery_ids[g] == query.identity))
        if not cfg.use_bit_head:
            with dc.no_grad():
                q_feats = encode_batch(models.encoder, [query])
                q_pooled = pool(q_feats).data[0]
            _, scores = coarse_rank(q_pooled, gallery_pooled, gallery_keys)
            cosine_values.extend(scores.tolist())
            cosine_labels.extend((gallery_ids == query.identity).tolist())

    cmc, mean_ap, skipped = cmc_map(result.orders, result.relevance)
    result.cmc, result.mean_ap, result.num_skipped = cmc, mean_ap, skipped

    if cfg.use_bit_head:
        stats = similarity_stats(psi_values, psi_labels)
    else:
        stats = similarity_stats(cosine_values, cosine_labels)
    return {
        "cmc": [float(v) for v in cmc],
        "mAP": mean_ap,
        "mean_pos": stats["mean_pos"],
        "mean_neg": stats["mean_neg"],
        "num_queries": len(queries) - skipped,
        "top_K": cfg.top_k_candidates,
        "psi_evals_per_query": result.psi_evals_per_query,
    }
