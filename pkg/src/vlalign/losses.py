"""The five training objectives and their supporting machinery.

* masked_concept_loss - masked tag/phrase recovery with order-free
  labels: a Hungarian assignment reorders the label set to best match
  the per-slot predictions before the cross entropy is taken.
* similarity_block / contrastive_loss - symmetric in-batch
  temperature-scaled cross entropy over the cosine matrix of the global
  [CLS] embeddings (diagonal pairs are the positives).
* phrase_region_similarity / grounding_hinge_loss - text-to-image
  similarity as the mean over phrases of the max cosine over regions,
  trained with a margin hinge against a hard-negative image.
* match_loss - binary pair-match classification on the cross-modal
  [CLS] output.
* masked_token_loss - masked-token recovery conditioned on regions and
  phrases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels, nn
from .nn import Tensor

HINGE_MARGIN = 0.2
TEMPERATURE_INIT = 0.07
TEMPERATURE_FLOOR = 0.01

LOSS_NAMES = ("masked_tag", "masked_phrase", "contrastive", "grounding", "match", "masked_token")


@dataclass
class Assignment:
    """Bijection from prediction slots to label indices, minimum total cost."""

    perm: np.ndarray
    total_cost: float


def _lap_cost(cost: np.ndarray) -> float:
    perm = kernels.lap_min(np.ascontiguousarray(cost, dtype=np.float64))
    return float(cost[np.arange(cost.shape[0]), perm].sum())


def hungarian_match(cost) -> Assignment:
    """Minimum-cost assignment; among optima, the lexicographically
    smallest permutation is returned (deterministic tie-break)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1] or cost.shape[0] < 1:
        raise ValueError(f"cost matrix must be square and non-empty, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    m = cost.shape[0]
    best = _lap_cost(cost)
    tol = 1e-11 * (1.0 + abs(best))
    avail = list(range(m))
    perm = np.empty(m, dtype=np.int64)
    remaining = best
    for i in range(m):
        for j in avail:
            rest = [c for c in avail if c != j]
            if i + 1 < m:
                sub = cost[np.arange(i + 1, m)[:, None], np.array(rest)[None, :]]
                cand = cost[i, j] + _lap_cost(sub)
            else:
                cand = cost[i, j]
            if cand <= remaining + tol:
                perm[i] = j
                avail.remove(j)
                remaining -= cost[i, j]
                break
        else:  # pragma: no cover - defensive, unreachable for finite input
            raise RuntimeError("no feasible column found; inconsistent assignment state")
    total = float(cost[np.arange(m), perm].sum())
    return Assignment(perm=perm, total_cost=total)


def masked_concept_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Order-free masked concept recovery loss.

    ``probs`` holds one probability distribution per masked slot
    (rows); ``labels`` the original concept classes.  The label list is
    reordered by a Hungarian assignment on cost[i][j] = 1 - p_i(label_j)
    before averaging the per-slot cross entropies.
    """
    labels = np.asarray(labels)
    m = probs.shape[0]
    if m == 0:
        raise ValueError("masked_concept_loss needs at least one masked slot")
    if labels.shape != (m,):
        raise ValueError(f"{m} slots but {labels.shape} labels")
    sums = probs.data.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError("slot distributions are not normalized")
    cost = 1.0 - probs.data[:, labels]
    assignment = hungarian_match(cost)
    reordered = labels[assignment.perm]
    onehot = np.zeros_like(probs.data)
    onehot[np.arange(m), reordered] = 1.0
    picked = nn.tsum(nn.mul(probs, Tensor(onehot)), axis=1)
    tiny = float(np.finfo(probs.dtype).tiny)
    return nn.scale(nn.tmean(nn.log(nn.clamp_min(picked, tiny))), -1.0)


@dataclass
class SimilarityBlock:
    """In-batch cosine similarities and both softmax-normalized views.

    ``sim`` has images on rows and texts on columns.  The probability
    matrices are detached: row i of ``image_to_text`` is the
    distribution over candidate texts for image i, row j of
    ``text_to_image`` the distribution over candidate images for text j.
    """

    sim: Tensor
    temperature: Tensor
    image_to_text: np.ndarray = field(repr=False)
    text_to_image: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.sim.shape[0]


def similarity_block(
    text_globals: Tensor,
    visual_globals: Tensor,
    temperature: Tensor,
    temperature_floor: float = TEMPERATURE_FLOOR,
) -> SimilarityBlock:
    n = text_globals.shape[0]
    if n < 2:
        raise ValueError("in-batch contrastive learning needs at least 2 pairs")
    tau = float(temperature.data)
    if tau < temperature_floor * (1.0 - 1e-6):  # tolerate dtype rounding of the clamp
        raise ValueError(f"temperature {tau} below floor {temperature_floor}")
    sim = nn.matmul(visual_globals, nn.swap_last2(text_globals))
    if np.abs(sim.data).max() > 1.0 + 1e-6:
        raise ValueError("similarity entries outside [-1, 1]; embeddings must be unit-norm")
    scaled = sim.data / tau
    i2t = kernels.softmax_fwd(np.ascontiguousarray(scaled))
    t2i = kernels.softmax_fwd(np.ascontiguousarray(scaled.T))
    return SimilarityBlock(sim=sim, temperature=temperature, image_to_text=i2t, text_to_image=t2i)


def contrastive_loss(block: SimilarityBlock) -> Tensor:
    """Symmetric cross entropy against the diagonal positives."""
    n = block.n
    scaled = nn.div(block.sim, block.temperature)
    diag = np.arange(n)
    ce_i2t = nn.cross_entropy(scaled, diag)
    ce_t2i = nn.cross_entropy(nn.transpose(scaled, (1, 0)), diag)
    return nn.scale(nn.add(ce_i2t, ce_t2i), 0.5)


def sample_hard_negatives(
    block: SimilarityBlock, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Per pair i: a negative image index drawn from the text-to-image
    distribution and a negative text index from the image-to-text one,
    diagonal masked out and renormalized."""
    img_neg = _sample_off_diagonal(block.text_to_image, rng)
    txt_neg = _sample_off_diagonal(block.image_to_text, rng)
    return img_neg, txt_neg


def _sample_off_diagonal(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = p.shape[0]
    q = p.copy()
    q[np.arange(n), np.arange(n)] = 0.0
    totals = q.sum(axis=1, keepdims=True)
    uniform = np.full_like(q, 1.0 / max(n - 1, 1))
    uniform[np.arange(n), np.arange(n)] = 0.0
    q = np.where(totals > 0.0, q / np.where(totals == 0.0, 1.0, totals), uniform)
    cum = np.cumsum(q, axis=1)
    u = rng.random(n)
    idx = np.minimum((u[:, None] > cum).sum(axis=1), n - 1).astype(np.int64)
    # float-edge guard: cum may top out below u by rounding; never return the diagonal
    rows = np.arange(n)
    bump = idx == rows
    idx[bump & (idx > 0)] -= 1
    idx[bump & (idx == 0)] += 1
    return idx


def phrase_region_similarity(
    g_phrases: Tensor, g_regions: Tensor, region_valid: np.ndarray | None = None
) -> tuple[Tensor, np.ndarray]:
    """Mean over phrases of the max cosine over regions.

    Returns the scalar similarity and, as an evaluation side channel,
    the argmax region per phrase.  ``region_valid`` marks regions
    eligible for the max (zero-norm grounding vectors are excluded).
    """
    m = g_phrases.shape[0]
    if m == 0:
        raise ValueError("pair has no phrases; similarity undefined")
    sims = nn.matmul(g_phrases, nn.swap_last2(g_regions))
    if region_valid is not None:
        if not region_valid.any():
            raise ValueError("no valid regions for grounding")
        sims = nn.add(sims, Tensor(np.where(region_valid, 0.0, -4.0)[None, :].astype(sims.dtype)))
    per_phrase = nn.tmax(sims, axis=1)
    return nn.tmean(per_phrase), sims.data.argmax(axis=1)


def grounding_hinge_loss(
    positive_sims: list[Tensor], negative_sims: list[Tensor], margin: float = HINGE_MARGIN
) -> Tensor:
    """Hinge on text-to-image similarity: mean of
    max(0, margin + s(neg image, text) - s(pos image, text))."""
    if not positive_sims:
        raise ValueError("no phrase-bearing pairs in the batch")
    if len(positive_sims) != len(negative_sims):
        raise ValueError("positive/negative similarity counts differ")
    terms = []
    for pos, neg in zip(positive_sims, negative_sims):
        hinge = nn.clamp_min(nn.add(nn.sub(neg, pos), margin), 0.0)
        terms.append(nn.reshape(hinge, (1,)))
    return nn.tmean(nn.concat(terms, axis=0))


def match_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Binary image-text match cross entropy; label 1 means matched."""
    if logits.shape[0] == 0:
        raise ValueError("empty match batch")
    return nn.cross_entropy(logits, np.asarray(labels))


def masked_token_loss(logits: Tensor, original_ids: np.ndarray) -> Tensor:
    """Mean cross entropy of masked-token predictions against originals."""
    if logits.shape[0] == 0:
        raise ValueError("no masked token positions")
    return nn.cross_entropy(logits, np.asarray(original_ids))


@dataclass
class LossReport:
    """Per-objective values (None when inactive), sample counts, total."""

    values: dict[str, float | None]
    counts: dict[str, int]
    total: float
    temperature: float | None

    @staticmethod
    def assemble(
        parts: dict[str, Tensor | None], counts: dict[str, int], temperature: float | None
    ) -> "LossReport":
        values: dict[str, float | None] = {}
        total = 0.0
        for name in LOSS_NAMES:
            t = parts.get(name)
            if t is None:
                values[name] = None
            else:
                v = float(t.data)
                values[name] = v
                total += v
        return LossReport(values=values, counts=counts, total=total, temperature=temperature)
