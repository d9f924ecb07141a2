"""Evaluation harness: retrieval, phrase grounding, ablation matrix.

Retrieval follows a coarse-then-rerank protocol: the uni-modal global
embeddings produce an exact cosine ranking, then the top-k candidates
per query are reordered by the cross-modal match probability (ties and
the tail keep their coarse order).  The merged single-stream variant
has no global embeddings and is ranked exhaustively by match score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import losses as L
from . import nn
from .corpus import Corpus, SynthPair, phrase_token_spans
from .encoders import MultiLevelAligner, SingleStreamAligner, collate_text, collate_visual
from .inputs import (
    PhraseVocab,
    SequenceCaps,
    TextSequence,
    TokenVocab,
    VisualSequence,
)
from .trainer import AblationToggles, MergedTrainer, RunConfig, Trainer, build_sequences

RECALL_DEPTHS = (1, 5, 10)


@dataclass
class RetrievalReport:
    caption_recall: dict[int, float]  # image query -> caption candidates
    image_recall: dict[int, float]  # caption query -> image candidates
    rsum: float
    coarse_caption_recall: dict[int, float]
    coarse_image_recall: dict[int, float]
    coarse_rsum: float
    n_candidates: int
    k_caption: int
    k_image: int

    def to_dict(self) -> dict:
        return {
            "caption_recall": {str(k): v for k, v in self.caption_recall.items()},
            "image_recall": {str(k): v for k, v in self.image_recall.items()},
            "rsum": self.rsum,
            "coarse_caption_recall": {str(k): v for k, v in self.coarse_caption_recall.items()},
            "coarse_image_recall": {str(k): v for k, v in self.coarse_image_recall.items()},
            "coarse_rsum": self.coarse_rsum,
            "n_candidates": self.n_candidates,
            "k_caption": self.k_caption,
            "k_image": self.k_image,
        }


@dataclass
class GroundingReport:
    mode: str
    accuracy: float
    chance: float  # 1 / (mean regions per evaluated phrase)
    n_phrases: int
    predictions: list[dict]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "accuracy": self.accuracy,
            "chance": self.chance,
            "n_phrases": self.n_phrases,
            "predictions": self.predictions,
        }


build_eval_sequences = build_sequences


def global_embedding_index(
    model: MultiLevelAligner,
    text_seqs: list[TextSequence],
    vis_seqs: list[VisualSequence],
    chunk: int = 128,
) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm global text/image embeddings for an evaluation set."""
    n = len(text_seqs)
    d = model.config.hidden
    text_g = np.empty((n, d))
    vis_g = np.empty((n, d))
    with nn.no_grad():
        for start in range(0, n, chunk):
            ts = text_seqs[start : start + chunk]
            vs = vis_seqs[start : start + chunk]
            tb = collate_text([s.token_ids for s in ts], [s.phrase_ids for s in ts])
            vb = collate_visual([s.tag_ids for s in vs], [s.region_features for s in vs])
            wg, tg = model.global_embeddings(model.encode_text(tb), model.encode_visual(vb))
            text_g[start : start + len(ts)] = wg.data
            vis_g[start : start + len(vs)] = tg.data
    return text_g, vis_g


def coarse_rank(query_embs: np.ndarray, index_embs: np.ndarray) -> np.ndarray:
    """Exact cosine ranking, descending, ties broken by candidate id."""
    if index_embs.shape[0] == 0:
        raise ValueError("empty retrieval index")
    scores = query_embs @ index_embs.T
    return np.argsort(-scores, axis=1, kind="stable")


def rerank_order(coarse_order: np.ndarray, match_scores: np.ndarray, k: int) -> np.ndarray:
    """Reorder the first min(k, n) coarse candidates by match score
    (descending, stable); the tail keeps its coarse order."""
    k = min(k, len(coarse_order))
    top = coarse_order[:k]
    reordered = top[np.argsort(-match_scores[:k], kind="stable")]
    return np.concatenate([reordered, coarse_order[k:]])


def _recalls(orders: np.ndarray, truth: np.ndarray) -> dict[int, float]:
    ranks = np.empty(len(truth), dtype=np.int64)
    for i, row in enumerate(orders):
        ranks[i] = int(np.nonzero(row == truth[i])[0][0])
    return {k: float((ranks < k).mean()) for k in RECALL_DEPTHS}


def _rsum(caption_r: dict[int, float], image_r: dict[int, float]) -> float:
    return 100.0 * (sum(caption_r.values()) + sum(image_r.values()))


def retrieval_eval(
    model: MultiLevelAligner,
    text_seqs: list[TextSequence],
    vis_seqs: list[VisualSequence],
    pair_ids: list[int],
    k_caption: int = 16,
    k_image: int = 16,
) -> RetrievalReport:
    """Coarse-then-rerank retrieval; each caption has exactly one
    positive image and vice versa."""
    n = len(pair_ids)
    if len(set(pair_ids)) != n:
        raise ValueError("duplicate pair ids in the evaluation set")
    text_g, vis_g = global_embedding_index(model, text_seqs, vis_seqs)
    truth = np.arange(n)
    cap_orders = coarse_rank(vis_g, text_g)  # per image, rank captions
    img_orders = coarse_rank(text_g, vis_g)  # per caption, rank images
    coarse_cap = _recalls(cap_orders, truth)
    coarse_img = _recalls(img_orders, truth)

    def rerank_all(orders: np.ndarray, k: int, query_is_image: bool) -> np.ndarray:
        k = min(k, n)
        q_text, q_vis = [], []
        for q in range(n):
            for c in orders[q, :k]:
                q_text.append(text_seqs[c] if query_is_image else text_seqs[q])
                q_vis.append(vis_seqs[q] if query_is_image else vis_seqs[c])
        scores = model.match_probabilities(q_text, q_vis).reshape(n, k)
        out = orders.copy()
        for q in range(n):
            out[q] = rerank_order(orders[q], scores[q], k)
        return out

    cap_rr = rerank_all(cap_orders, k_caption, query_is_image=True)
    img_rr = rerank_all(img_orders, k_image, query_is_image=False)
    cap_r = _recalls(cap_rr, truth)
    img_r = _recalls(img_rr, truth)
    return RetrievalReport(
        caption_recall=cap_r,
        image_recall=img_r,
        rsum=_rsum(cap_r, img_r),
        coarse_caption_recall=coarse_cap,
        coarse_image_recall=coarse_img,
        coarse_rsum=_rsum(coarse_cap, coarse_img),
        n_candidates=n,
        k_caption=k_caption,
        k_image=k_image,
    )


def retrieval_eval_exhaustive(
    model,
    text_seqs: list[TextSequence],
    vis_seqs: list[VisualSequence],
    pair_ids: list[int],
) -> RetrievalReport:
    """Full n x n match-score ranking (used for the merged variant)."""
    n = len(pair_ids)
    if len(set(pair_ids)) != n:
        raise ValueError("duplicate pair ids in the evaluation set")
    q_text, q_vis = [], []
    for i in range(n):
        for j in range(n):
            q_text.append(text_seqs[j])
            q_vis.append(vis_seqs[i])
    scores = model.match_probabilities(q_text, q_vis).reshape(n, n)
    truth = np.arange(n)
    cap_orders = np.argsort(-scores, axis=1, kind="stable")  # image i -> captions
    img_orders = np.argsort(-scores.T, axis=1, kind="stable")  # caption j -> images
    cap_r = _recalls(cap_orders, truth)
    img_r = _recalls(img_orders, truth)
    rsum = _rsum(cap_r, img_r)
    return RetrievalReport(
        caption_recall=cap_r,
        image_recall=img_r,
        rsum=rsum,
        coarse_caption_recall=cap_r,
        coarse_image_recall=img_r,
        coarse_rsum=rsum,
        n_candidates=n,
        k_caption=n,
        k_image=n,
    )


def iou(box_a, box_b) -> float:
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def grounding_eval(
    model,
    pairs: list[SynthPair],
    text_seqs: list[TextSequence],
    vis_seqs: list[VisualSequence],
    mode: str = "concept",
) -> GroundingReport:
    """Ground each kept phrase to its best region; a prediction counts
    as correct when its box overlaps a ground-truth region's box with
    IoU strictly greater than 0.5.

    concept mode uses the unit-norm grounding-layer phrase/region
    states; token mode mean-pools the final cross-modal states of the
    phrase's constituent tokens against the final region states.
    """
    if mode not in ("concept", "token"):
        raise ValueError(f"unknown grounding mode {mode!r}")
    predictions: list[dict] = []
    correct = 0
    region_counts: list[int] = []
    for pair, ts, vs in zip(pairs, text_seqs, vis_seqs):
        if ts.n_phrases == 0:
            continue
        enc = model.encode_pair(ts, vs)
        spans = phrase_token_spans(pair)
        if mode == "concept":
            phrase_vecs = enc.grounding_phrases
            region_vecs = enc.grounding_regions
        else:
            token_out = enc.mm_out[: 1 + ts.n_tokens]
            region_out = enc.mm_out[1 + ts.n_tokens + ts.n_phrases :]
            region_vecs = _unit_rows(region_out)
            phrase_rows = []
            for pi in ts.phrase_pair_indices:
                pos = [p for p in spans[pi] if p < ts.n_tokens]
                pooled = token_out[1 + np.array(pos)].mean(axis=0) if pos else np.zeros(token_out.shape[1])
                phrase_rows.append(pooled)
            phrase_vecs = _unit_rows(np.stack(phrase_rows))
        valid = np.sqrt((region_vecs**2).sum(axis=1)) > 0
        sims = phrase_vecs @ region_vecs.T
        sims[:, ~valid] = -np.inf
        best = sims.argmax(axis=1)
        for slot, pi in enumerate(ts.phrase_pair_indices):
            gt_regions = pair.phrases[pi].regions
            pred = int(best[slot])
            hit = max(iou(pair.boxes[pred], pair.boxes[g]) for g in gt_regions) > 0.5
            correct += int(hit)
            region_counts.append(vs.n_regions)
            predictions.append(
                {
                    "pair_id": pair.pair_id,
                    "phrase_index": int(pi),
                    "phrase": list(pair.phrases[pi].words),
                    "predicted_region": pred,
                    "similarity": float(sims[slot, pred]),
                    "correct": bool(hit),
                }
            )
    if not predictions:
        raise ValueError("phrase-free evaluation set; grounding undefined")
    n = len(predictions)
    return GroundingReport(
        mode=mode,
        accuracy=correct / n,
        chance=1.0 / float(np.mean(region_counts)),
        n_phrases=n,
        predictions=predictions,
    )


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x**2).sum(axis=1, keepdims=True))
    return x / np.where(norms == 0, 1.0, norms)


# ---- ablation matrix ----

_ALL = L.LOSS_NAMES


@dataclass(frozen=True)
class AblationVariant:
    name: str
    use_phrases: bool = True
    use_tags: bool = True
    losses: tuple[str, ...] = _ALL
    merged: bool = False


def _without(*drop: str) -> tuple[str, ...]:
    return tuple(n for n in _ALL if n not in drop)


TABLE_VARIANTS = (
    AblationVariant("full"),
    AblationVariant("no_masked_tag", losses=_without("masked_tag")),
    AblationVariant("no_tags", use_tags=False),
    AblationVariant("no_phrase_alignment", losses=_without("masked_phrase", "grounding")),
    AblationVariant("no_phrases", use_phrases=False),
    AblationVariant("merged_attention", losses=_without("contrastive"), merged=True),
)


def ablation_run(
    train_corpus: Corpus,
    eval_corpus: Corpus,
    base_cfg: RunConfig,
    variants: tuple[AblationVariant, ...] = TABLE_VARIANTS,
    max_steps_per_stage: int | None = None,
    rerank_k: int = 16,
) -> list[dict]:
    """Train and evaluate each variant with shared seeds and corpus.

    Input toggles propagate to the sequences; dependency rules (no tags
    -> no masked-tag loss, no phrases -> no masked-phrase/grounding
    loss) are applied by AblationToggles.
    """
    rows = []
    for variant in variants:
        toggles = AblationToggles(
            use_phrases=variant.use_phrases,
            use_tags=variant.use_tags,
            losses=variant.losses,
        )
        toggles.active_losses()  # validate early: raises if empty
        cfg = replace(base_cfg, toggles=toggles, merged=variant.merged)
        trainer_cls = MergedTrainer if variant.merged else Trainer
        trainer = trainer_cls(train_corpus, cfg)
        if variant.merged:
            state = trainer.run_merged(
                max_steps=None if max_steps_per_stage is None else 2 * max_steps_per_stage
            )
        else:
            s1 = trainer.run_stage1(max_steps=max_steps_per_stage)
            state = trainer.run_stage2(s1, max_steps=max_steps_per_stage)
        text_seqs, vis_seqs = build_eval_sequences(
            eval_corpus, cfg.caps, trainer.token_vocab, trainer.phrase_vocab,
            use_tags=variant.use_tags, use_phrases=variant.use_phrases,
        )
        ids = [p.pair_id for p in eval_corpus.pairs]
        if variant.merged:
            retrieval = retrieval_eval_exhaustive(trainer.model, text_seqs, vis_seqs, ids)
        else:
            retrieval = retrieval_eval(
                trainer.model, text_seqs, vis_seqs, ids, k_caption=rerank_k, k_image=rerank_k
            )
        grounding_acc = None
        if variant.use_phrases:
            grounding = grounding_eval(trainer.model, eval_corpus.pairs, text_seqs, vis_seqs, "concept")
            grounding_acc = grounding.accuracy
        active = toggles.active_losses()
        rows.append(
            {
                "variant": variant.name,
                "inputs": _input_label(variant),
                "losses": [name for name in L.LOSS_NAMES if name in active],
                "merged": variant.merged,
                "steps": state.step_in_stage if variant.merged else state.global_step,
                "rsum": retrieval.rsum,
                "coarse_rsum": retrieval.coarse_rsum,
                "grounding_accuracy": grounding_acc,
                "final_losses": trainer.metrics[-1]["losses"] if trainer.metrics else None,
            }
        )
    return rows


def _input_label(v: AblationVariant) -> str:
    parts = ["tokens"]
    if v.use_phrases:
        parts.append("phrases")
    parts.append("regions")
    if v.use_tags:
        parts.append("tags")
    return "+".join(parts)


def format_ablation_table(rows: list[dict]) -> str:
    header = f"{'variant':<22} {'inputs':<28} {'rsum':>8} {'grounding':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        g = "n/a" if r["grounding_accuracy"] is None else f"{r['grounding_accuracy']:.3f}"
        lines.append(f"{r['variant']:<22} {r['inputs']:<28} {r['rsum']:>8.1f} {g:>10}")
    return "\n".join(lines)


def write_report(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
