"""Two-stage training orchestration.

Stage 1 optimizes the uni-modal encoders on masked-tag + masked-phrase
recovery plus the global contrastive loss.  Stage 2 re-initializes the
cross-modal encoder, then optimizes the full model on all six
objectives with in-batch hard negatives.  Everything is deterministic
given (corpus, configs, seeds): epoch shuffles derive from
(seed, stage, epoch), while masking and negative sampling consume one
generator whose state lives in the checkpoint.

Because recovering a masked phrase is conditioned on clean tokens while
recovering a masked token is conditioned on clean phrases, stage 2 runs
the textual encoder twice per batch: once with phrases masked (phrase
recovery) and once with tokens masked (everything else).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses as L
from . import nn
from .corpus import Corpus
from .encoders import (
    ModelConfig,
    MultiLevelAligner,
    SingleStreamAligner,
    TextBatch,
    VisualBatch,
    collate_text,
    collate_visual,
)
from .inputs import (
    MASK_RATE_CONCEPTS,
    MASK_RATE_TOKENS,
    PhraseVocab,
    SequenceCaps,
    TextSequence,
    TokenVocab,
    VisualSequence,
    apply_masking,
    build_text_sequence,
    build_visual_sequence,
    build_vocabs,
)
from .nn import OptimState, ParamStore, Tensor

FP64_ENV = "VLALIGN_FP64"

STAGE1_LOSSES = frozenset({"masked_tag", "masked_phrase", "contrastive"})


@dataclass(frozen=True)
class StageConfig:
    stage: int
    epochs: int
    batch_size: int = 32
    peak_lr: float = 2e-3
    warmup_fraction: float = 0.2
    weight_decay: float = 0.01
    seed: int = 0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (in-batch negatives)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class AblationToggles:
    """Input components and loss subset for an ablation variant."""

    use_phrases: bool = True
    use_tags: bool = True
    losses: tuple[str, ...] = L.LOSS_NAMES

    def active_losses(self) -> frozenset[str]:
        s = set(self.losses)
        unknown = s - set(L.LOSS_NAMES)
        if unknown:
            raise ValueError(f"unknown loss toggles: {sorted(unknown)}")
        if not self.use_tags:
            s.discard("masked_tag")
        if not self.use_phrases:
            s.discard("masked_phrase")
            s.discard("grounding")
        if not s:
            raise ValueError("toggle set removes every loss")
        return frozenset(s)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    caps: SequenceCaps = field(default_factory=SequenceCaps)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(stage=1, epochs=5, seed=1))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(stage=2, epochs=10, seed=2))
    toggles: AblationToggles = field(default_factory=AblationToggles)
    min_phrase_freq: int = 10
    token_mask_rate: float = MASK_RATE_TOKENS
    concept_mask_rate: float = MASK_RATE_CONCEPTS
    temperature_floor: float = L.TEMPERATURE_FLOOR
    fp64: bool = False
    merged: bool = False  # single-stream variant: no uni-modal stage, no contrastive loss

    def resolve_dtype(self):
        if self.fp64 or os.environ.get(FP64_ENV, "") == "1":
            return np.float64
        return np.float32


def run_config_to_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["toggles"]["losses"] = list(cfg.toggles.losses)
    return d


def run_config_from_dict(d: dict) -> RunConfig:
    """Build a RunConfig from a (possibly partial) plain dict."""
    base = RunConfig()
    d = dict(d)
    if "model" in d:
        d["model"] = ModelConfig(**d["model"])
    if "caps" in d:
        d["caps"] = SequenceCaps(**d["caps"])
    if "stage1" in d:
        d["stage1"] = StageConfig(**{"stage": 1, "epochs": base.stage1.epochs, **d["stage1"]})
    if "stage2" in d:
        d["stage2"] = StageConfig(**{"stage": 2, "epochs": base.stage2.epochs, **d["stage2"]})
    if "toggles" in d:
        tog = dict(d["toggles"])
        if "losses" in tog:
            tog["losses"] = tuple(tog["losses"])
        d["toggles"] = AblationToggles(**tog)
    return replace(base, **d)


def lr_at(step: int, total_steps: int, cfg: StageConfig) -> float:
    """Linear warmup over the first warmup_fraction of steps, then
    linear decay to zero at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError("step outside [0, total_steps]")
    warmup = max(1, int(total_steps * cfg.warmup_fraction))
    if step <= warmup:
        return cfg.peak_lr * step / warmup
    return cfg.peak_lr * (total_steps - step) / (total_steps - warmup)


@dataclass
class TrainState:
    stage: int
    epoch: int
    step_in_stage: int
    global_step: int
    optim: OptimState
    rng: np.random.Generator
    running: dict[str, list[float]] = field(default_factory=dict)  # name -> [sum, count]

    def update_running(self, report: L.LossReport) -> None:
        for name, value in list(report.values.items()) + [("total", report.total)]:
            if value is None:
                continue
            acc = self.running.setdefault(name, [0.0, 0])
            acc[0] += value
            acc[1] += 1

    def running_means(self) -> dict[str, float]:
        return {k: s / c for k, (s, c) in self.running.items() if c}


def build_sequences(
    corpus: Corpus,
    caps: SequenceCaps,
    token_vocab: TokenVocab,
    phrase_vocab: PhraseVocab,
    use_tags: bool = True,
    use_phrases: bool = True,
) -> tuple[list[TextSequence], list[VisualSequence]]:
    """Model-ready sequences for every pair, honoring input toggles."""
    text_seqs, vis_seqs = [], []
    for pair in corpus.pairs:
        ts = build_text_sequence(pair, token_vocab, phrase_vocab, caps)
        if not use_phrases:
            ts.phrase_ids = ts.phrase_ids[:0]
            ts.phrase_pair_indices = ts.phrase_pair_indices[:0]
            ts.position_ids = ts.position_ids[: len(ts.token_ids)]
            ts.segment_ids = ts.segment_ids[: len(ts.token_ids)]
        text_seqs.append(ts)
        vis_seqs.append(build_visual_sequence(pair, token_vocab, caps, use_tags=use_tags))
    return text_seqs, vis_seqs


def _epoch_order(seed: int, stage: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, stage, epoch]))
    return rng.permutation(n)


def _batches(n_pairs: int, batch_size: int) -> int:
    """Number of usable batches per epoch; a trailing batch of one pair
    is dropped (the contrastive loss needs at least two)."""
    full, rem = divmod(n_pairs, batch_size)
    return full + (1 if rem >= 2 else 0)


class Trainer:
    """Owns the corpus-derived sequences, the model, and the metrics log."""

    def __init__(
        self,
        corpus: Corpus,
        cfg: RunConfig,
        model: MultiLevelAligner | None = None,
        vocabs: tuple[TokenVocab, PhraseVocab] | None = None,
    ):
        if corpus.header.config.feat_dim != cfg.model.feat_dim:
            raise ValueError(
                f"model feat_dim {cfg.model.feat_dim} != corpus feat_dim "
                f"{corpus.header.config.feat_dim}"
            )
        self.cfg = cfg
        self.dtype = cfg.resolve_dtype()
        if vocabs is None:
            vocabs = build_vocabs(corpus, cfg.min_phrase_freq)
        self.token_vocab, self.phrase_vocab = vocabs
        if model is None:
            cls = SingleStreamAligner if cfg.merged else MultiLevelAligner
            model = cls(cfg.model, self.token_vocab, self.phrase_vocab,
                        seed=cfg.stage1.seed, dtype=self.dtype)
        self.model = model
        self.pairs = corpus.pairs
        self.text_seqs, self.vis_seqs = build_sequences(
            corpus, cfg.caps, self.token_vocab, self.phrase_vocab,
            use_tags=cfg.toggles.use_tags, use_phrases=cfg.toggles.use_phrases,
        )
        self.metrics: list[dict] = []
        self._metrics_file = None

    # ---- metrics ----

    def attach_metrics_file(self, path) -> None:
        self._metrics_file = open(path, "w", encoding="utf-8")

    def _log(self, record: dict) -> None:
        self.metrics.append(record)
        if self._metrics_file is not None:
            self._metrics_file.write(json.dumps(record) + "\n")
            self._metrics_file.flush()

    def close(self) -> None:
        if self._metrics_file is not None:
            self._metrics_file.close()
            self._metrics_file = None

    # ---- masking helpers ----

    def _mask_stream(self, ids: np.ndarray, kind: str, rng: np.random.Generator):
        rate = self.cfg.token_mask_rate if kind == "tokens" else self.cfg.concept_mask_rate
        return apply_masking(
            ids, kind, rng, self.token_vocab, self.phrase_vocab, rate=rate
        )

    # ---- per-batch losses ----

    def _concept_loss_from_views(
        self,
        enc_hidden: Tensor,
        views: list,
        slot_offset: int | np.ndarray,
        head,
        label_of,
    ) -> tuple[Tensor | None, int]:
        """Average the per-pair order-free concept losses over pairs with
        at least one masked slot."""
        rows_b, rows_p, labels, groups = [], [], [], []
        for b, view in enumerate(views):
            if view is None:
                continue
            off = slot_offset if np.isscalar(slot_offset) else slot_offset[b]
            rows_b.extend([b] * len(view.positions))
            rows_p.extend((off + view.positions).tolist())
            labels.extend(label_of(i) for i in view.original_ids)
            groups.append(len(view.positions))
        if not groups:
            return None, 0
        h = nn.gather_positions(enc_hidden, np.array(rows_b), np.array(rows_p))
        probs = nn.softmax(head(h), axis=-1)
        per_pair = []
        start = 0
        for g in groups:
            rows = nn.narrow(probs, 0, start, g)
            per_pair.append(nn.reshape(L.masked_concept_loss(rows, np.array(labels[start : start + g])), (1,)))
            start += g
        return nn.tmean(nn.concat(per_pair, axis=0)), len(labels)

    def _stage1_losses(self, ids: np.ndarray, rng: np.random.Generator, active: frozenset[str]):
        tseqs = [self.text_seqs[i] for i in ids]
        vseqs = [self.vis_seqs[i] for i in ids]
        phrase_views = [
            self._mask_stream(s.phrase_ids, "phrases", rng)
            if "masked_phrase" in active and s.n_phrases > 0
            else None
            for s in tseqs
        ]
        tag_views = [
            self._mask_stream(s.tag_ids, "tags", rng)
            if "masked_tag" in active and s.n_tags > 0
            else None
            for s in vseqs
        ]
        tb = collate_text(
            [s.token_ids for s in tseqs],
            [v.ids if v is not None else s.phrase_ids for s, v in zip(tseqs, phrase_views)],
        )
        vb = collate_visual(
            [v.ids if v is not None else s.tag_ids for s, v in zip(vseqs, tag_views)],
            [s.region_features for s in vseqs],
        )
        t_enc = self.model.encode_text(tb, training=True, rng=rng)
        v_enc = self.model.encode_visual(vb, training=True, rng=rng)
        parts: dict[str, Tensor | None] = {}
        counts = {"pairs": len(ids)}
        if "contrastive" in active:
            wg, tg = self.model.global_embeddings(t_enc, v_enc)
            block = L.similarity_block(
                wg, tg, self.model.params["temperature"], self.cfg.temperature_floor
            )
            parts["contrastive"] = L.contrastive_loss(block)
        if "masked_tag" in active:
            parts["masked_tag"], counts["masked_tags"] = self._concept_loss_from_views(
                v_enc.hidden, tag_views, 1, self.model.tag_logits,
                lambda tid: self.token_vocab.tag_class[int(tid)],
            )
        if "masked_phrase" in active:
            parts["masked_phrase"], counts["masked_phrases"] = self._concept_loss_from_views(
                t_enc.hidden, phrase_views, tb.token_limit, self.model.phrase_logits,
                lambda cid: self.phrase_vocab.class_of(int(cid)),
            )
        return parts, counts

    def _stage2_losses(
        self,
        ids: np.ndarray,
        rng: np.random.Generator,
        active: frozenset[str],
        fixed_negatives: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    ):
        """Per-batch stage-2 objectives.

        Masked-recovery objectives read corrupted views (tag-corrupted
        visual pass, token-corrupted text pass); the alignment
        objectives (contrastive, match) read clean views so training
        matches retrieval inference.  Grounding positives share the
        token-corrupted pass: phrase slots that can copy clean token
        context stop carrying region-discriminative features.

        ``fixed_negatives`` is a deterministic-evaluation hook (used by
        gradient checks): (negative image idx, negative text idx,
        image-side coin) replace the usual sampling so repeated calls
        see identical discrete choices.
        """
        tseqs = [self.text_seqs[i] for i in ids]
        vseqs = [self.vis_seqs[i] for i in ids]
        n = len(ids)
        parts: dict[str, Tensor | None] = {}
        counts = {"pairs": n}

        # text pass with phrases masked, tokens clean: phrase recovery
        if "masked_phrase" in active:
            phrase_views = [
                self._mask_stream(s.phrase_ids, "phrases", rng) if s.n_phrases > 0 else None
                for s in tseqs
            ]
            tbA = collate_text(
                [s.token_ids for s in tseqs],
                [v.ids if v is not None else s.phrase_ids for s, v in zip(tseqs, phrase_views)],
            )
            encA = self.model.encode_text(tbA, training=True, rng=rng)
            parts["masked_phrase"], counts["masked_phrases"] = self._concept_loss_from_views(
                encA.hidden, phrase_views, tbA.token_limit, self.model.phrase_logits,
                lambda cid: self.phrase_vocab.class_of(int(cid)),
            )

        # visual pass with tags masked: tag recovery
        if "masked_tag" in active:
            tag_views = [
                self._mask_stream(s.tag_ids, "tags", rng) if s.n_tags > 0 else None
                for s in vseqs
            ]
            vb_masked = collate_visual(
                [v.ids if v is not None else s.tag_ids for s, v in zip(vseqs, tag_views)],
                [s.region_features for s in vseqs],
            )
            v_masked = self.model.encode_visual(vb_masked, training=True, rng=rng)
            parts["masked_tag"], counts["masked_tags"] = self._concept_loss_from_views(
                v_masked.hidden, tag_views, 1, self.model.tag_logits,
                lambda tid: self.token_vocab.tag_class[int(tid)],
            )

        needs_negatives = bool(active & {"grounding", "match"})
        needs_clean = bool(active & {"contrastive", "grounding", "match", "masked_token"})
        if not needs_clean:
            return parts, counts

        # clean passes: contrastive globals, match, and the region states
        # consumed by every cross-modal pass
        tb = collate_text([s.token_ids for s in tseqs], [s.phrase_ids for s in tseqs])
        t_enc = self.model.encode_text(tb, training=True, rng=rng)
        vb = collate_visual([s.tag_ids for s in vseqs], [s.region_features for s in vseqs])
        v_enc = self.model.encode_visual(vb, training=True, rng=rng)
        region_h, region_m = self.model.region_hidden(v_enc, vb)

        block = None
        if active & {"contrastive", "grounding", "match"}:
            wg, tg = self.model.global_embeddings(t_enc, v_enc)
            block = L.similarity_block(
                wg, tg, self.model.params["temperature"], self.cfg.temperature_floor
            )
        if "contrastive" in active:
            parts["contrastive"] = L.contrastive_loss(block)

        img_neg = txt_neg = coin_img = None
        if needs_negatives:
            if fixed_negatives is not None:
                img_neg, txt_neg, coin_img = fixed_negatives
            else:
                img_neg, txt_neg = L.sample_hard_negatives(block, rng)
                coin_img = rng.random(n) < 0.5

        phrase_bearing = [b for b in range(n) if tseqs[b].n_phrases > 0]
        counts["phrase_bearing"] = len(phrase_bearing)
        counts["skipped_phrase_free"] = n - len(phrase_bearing)

        # token-corrupted text pass, joined with the clean regions: token
        # recovery, and the positive view for grounding
        t_masked = tb_masked = mm_masked = None
        if "masked_token" in active or ("grounding" in active and phrase_bearing):
            if "masked_token" in active:
                token_views = [self._mask_stream(s.token_ids, "tokens", rng) for s in tseqs]
                tb_masked = collate_text(
                    [v.ids for v in token_views], [s.phrase_ids for s in tseqs]
                )
                t_masked = self.model.encode_text(tb_masked, training=True, rng=rng)
            else:
                tb_masked, t_masked = tb, t_enc
            mm_masked = self.model.encode_crossmodal(
                t_masked.hidden, tb_masked.mask, region_h, region_m, training=True, rng=rng
            )
        if "masked_token" in active:
            rows_b, rows_p, originals = [], [], []
            for b, view in enumerate(token_views):
                rows_b.extend([b] * len(view.positions))
                rows_p.extend(view.positions.tolist())
                originals.extend(view.original_ids.tolist())
            h = nn.gather_positions(mm_masked.hidden, np.array(rows_b), np.array(rows_p))
            parts["masked_token"] = L.masked_token_loss(
                self.model.token_logits(h), np.array(originals)
            )
            counts["masked_tokens"] = len(originals)

        if "grounding" in active and phrase_bearing:
            mm_g_neg = self.model.encode_crossmodal(
                t_masked.hidden,
                tb_masked.mask,
                nn.take_rows(region_h, img_neg),
                region_m[img_neg],
                training=True,
                rng=rng,
            )
            pos_sims, neg_sims = [], []
            for b in phrase_bearing:
                slots = tb_masked.phrase_slots(b)
                bb = np.full(len(slots), b)
                p_pos = nn.gather_positions(mm_masked.grounding, bb, slots)
                reg_pos = mm_masked.region_offset + np.arange(vseqs[b].n_regions)
                r_pos = nn.gather_positions(mm_masked.grounding, np.full(len(reg_pos), b), reg_pos)
                s_pos, _ = L.phrase_region_similarity(p_pos, r_pos)
                p_neg = nn.gather_positions(mm_g_neg.grounding, bb, slots)
                reg_neg = mm_g_neg.region_offset + np.arange(vseqs[img_neg[b]].n_regions)
                r_neg = nn.gather_positions(mm_g_neg.grounding, np.full(len(reg_neg), b), reg_neg)
                s_neg, _ = L.phrase_region_similarity(p_neg, r_neg)
                pos_sims.append(s_pos)
                neg_sims.append(s_neg)
            parts["grounding"] = L.grounding_hinge_loss(pos_sims, neg_sims)

        if "match" in active:
            mm_clean = self.model.encode_crossmodal(
                t_enc.hidden, tb.mask, region_h, region_m, training=True, rng=rng
            )
            mm_neg_img = self.model.encode_crossmodal(
                t_enc.hidden,
                tb.mask,
                nn.take_rows(region_h, img_neg),
                region_m[img_neg],
                training=True,
                rng=rng,
            )
            txt_rows = np.where(~coin_img)[0]
            neg_cls_rows: list[Tensor] = []
            if txt_rows.size:
                mm_neg_txt = self.model.encode_crossmodal(
                    nn.take_rows(t_enc.hidden, txt_neg[txt_rows]),
                    tb.mask[txt_neg[txt_rows]],
                    nn.take_rows(region_h, txt_rows),
                    region_m[txt_rows],
                    training=True,
                    rng=rng,
                )
            txt_order = {int(b): k for k, b in enumerate(txt_rows)}
            for b in range(n):
                if coin_img[b]:
                    neg_cls_rows.append(nn.narrow(nn.narrow(mm_neg_img.hidden, 0, b, 1), 1, 0, 1))
                else:
                    k = txt_order[b]
                    neg_cls_rows.append(nn.narrow(nn.narrow(mm_neg_txt.hidden, 0, k, 1), 1, 0, 1))
            d = self.model.config.hidden
            pos_cls = nn.reshape(nn.narrow(mm_clean.hidden, 1, 0, 1), (n, d))
            neg_cls = nn.reshape(nn.concat(neg_cls_rows, axis=0), (n, d))
            logits = self.model.match_logits(nn.concat([pos_cls, neg_cls], axis=0))
            labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
            parts["match"] = L.match_loss(logits, labels)
            counts["match_pairs"] = 2 * n

        return parts, counts

    # ---- stage loops ----

    def _fresh_state(self, stage_cfg: StageConfig, global_step: int = 0) -> TrainState:
        return TrainState(
            stage=stage_cfg.stage,
            epoch=0,
            step_in_stage=0,
            global_step=global_step,
            optim=OptimState(lr=0.0, weight_decay=stage_cfg.weight_decay),
            rng=np.random.default_rng(np.random.SeedSequence([stage_cfg.seed, 0x5EED, stage_cfg.stage])),
        )

    def _run_stage(
        self,
        stage_cfg: StageConfig,
        state: TrainState,
        loss_subset: frozenset[str] | None = None,
        max_steps: int | None = None,
    ) -> TrainState:
        n_pairs = len(self.pairs)
        bs = stage_cfg.batch_size
        n_batches = _batches(n_pairs, bs)
        if n_batches == 0:
            raise ValueError("corpus smaller than 2 pairs; cannot form a batch")
        total_steps = stage_cfg.epochs * n_batches
        active = self.cfg.toggles.active_losses()
        if stage_cfg.stage == 1:
            active = active & STAGE1_LOSSES
        if loss_subset is not None:
            active = active & loss_subset
        if not active:
            raise ValueError("no active losses for this stage")
        params = self.model.params
        while state.epoch < stage_cfg.epochs:
            order = _epoch_order(stage_cfg.seed, stage_cfg.stage, state.epoch, n_pairs)
            batch_start = state.step_in_stage - state.epoch * n_batches
            for bi in range(batch_start, n_batches):
                if max_steps is not None and state.step_in_stage >= max_steps:
                    return state
                ids = order[bi * bs : min((bi + 1) * bs, n_pairs)]
                lr = lr_at(state.step_in_stage, total_steps, stage_cfg)
                if stage_cfg.stage == 1:
                    parts, counts = self._stage1_losses(ids, state.rng, active)
                else:
                    parts, counts = self._stage2_losses(ids, state.rng, active)
                terms = [nn.reshape(t, (1,)) for t in parts.values() if t is not None]
                if not terms:
                    raise ValueError("batch produced no loss terms")
                total = nn.tsum(nn.concat(terms, axis=0))
                params.zero_grad()
                total.backward()
                grad_norm = nn.clip_global_norm(params, stage_cfg.grad_clip)
                state.optim.lr = lr
                nn.adamw_step(params, state.optim)
                temperature = None
                if "temperature" in params:
                    tau = params["temperature"]
                    if tau.data < self.cfg.temperature_floor:
                        tau.data = np.asarray(self.cfg.temperature_floor, dtype=self.dtype)
                    temperature = float(tau.data)
                state.step_in_stage += 1
                state.global_step += 1
                report = L.LossReport.assemble(parts, counts, temperature)
                state.update_running(report)
                self._log(
                    {
                        "step": state.global_step,
                        "stage": stage_cfg.stage,
                        "epoch": state.epoch,
                        "lr": lr,
                        "losses": report.values,
                        "total": report.total,
                        "counts": counts,
                        "temperature": report.temperature,
                        "grad_norm": grad_norm,
                    }
                )
            state.epoch += 1
        return state

    def run_stage1(self, max_steps: int | None = None) -> TrainState:
        self.model.set_stage(1)
        state = self._fresh_state(self.cfg.stage1)
        return self._run_stage(self.cfg.stage1, state, max_steps=max_steps)

    def run_stage2(
        self,
        state: TrainState | None = None,
        loss_subset: frozenset[str] | None = None,
        max_steps: int | None = None,
    ) -> TrainState:
        """Continue from a stage-1 state (or train stage 2 from scratch).

        On a fresh entry into stage 2 the cross-modal encoder and heads
        are re-initialized from the stage-2 seed and the optimizer
        restarts with a fresh schedule.
        """
        global_step = state.global_step if state is not None else 0
        if state is None or state.stage == 1:
            self.model.reinit_crossmodal(self.cfg.stage2.seed)
            state = self._fresh_state(self.cfg.stage2, global_step=global_step)
        self.model.set_stage(2)
        return self._run_stage(self.cfg.stage2, state, loss_subset=loss_subset, max_steps=max_steps)

    def run_both(self) -> TrainState:
        return self.run_stage2(self.run_stage1())

    def run_retrieval_finetune(self, state: TrainState | None = None, max_steps: int | None = None) -> TrainState:
        """Retrieval fine-tuning: a fresh stage-2-shaped schedule over the
        loaded parameters (no re-initialization), optimizing the
        contrastive + match objectives only."""
        global_step = state.global_step if state is not None else 0
        self.model.set_stage(2)
        ft_state = self._fresh_state(self.cfg.stage2, global_step=global_step)
        return self._run_stage(
            self.cfg.stage2, ft_state,
            loss_subset=frozenset({"contrastive", "match"}), max_steps=max_steps,
        )

    def resume_stage(self, state: TrainState, max_steps: int | None = None) -> TrainState:
        stage_cfg = self.cfg.stage1 if state.stage == 1 else self.cfg.stage2
        self.model.set_stage(state.stage)
        return self._run_stage(stage_cfg, state, max_steps=max_steps)


class MergedTrainer(Trainer):
    """Single-stream variant: one encoder over {tokens, phrases, tags,
    regions}, no uni-modal stage and no contrastive loss; match
    negatives are drawn uniformly (there is no coarse distribution to
    sample from)."""

    def _stage2_losses(self, ids: np.ndarray, rng: np.random.Generator, active: frozenset[str]):
        tseqs = [self.text_seqs[i] for i in ids]
        vseqs = [self.vis_seqs[i] for i in ids]
        n = len(ids)
        parts: dict[str, Tensor | None] = {}
        counts = {"pairs": n}

        phrase_views = [
            self._mask_stream(s.phrase_ids, "phrases", rng)
            if "masked_phrase" in active and s.n_phrases > 0
            else None
            for s in tseqs
        ]
        tag_views = [
            self._mask_stream(s.tag_ids, "tags", rng)
            if "masked_tag" in active and s.n_tags > 0
            else None
            for s in vseqs
        ]
        token_views = [
            self._mask_stream(s.token_ids, "tokens", rng) if "masked_token" in active else None
            for s in tseqs
        ]
        tb = collate_text(
            [v.ids if v is not None else s.token_ids for s, v in zip(tseqs, token_views)],
            [v.ids if v is not None else s.phrase_ids for s, v in zip(tseqs, phrase_views)],
        )
        vb = collate_visual(
            [v.ids if v is not None else s.tag_ids for s, v in zip(vseqs, tag_views)],
            [s.region_features for s in vseqs],
        )
        enc = self.model.encode_merged(tb, vb, training=True, rng=rng)

        if "masked_tag" in active:
            parts["masked_tag"], counts["masked_tags"] = self._concept_loss_from_views(
                enc.hidden, tag_views, enc.tag_offset, self.model.tag_logits,
                lambda tid: self.token_vocab.tag_class[int(tid)],
            )
        if "masked_phrase" in active:
            parts["masked_phrase"], counts["masked_phrases"] = self._concept_loss_from_views(
                enc.hidden, phrase_views, tb.token_limit, self.model.phrase_logits,
                lambda cid: self.phrase_vocab.class_of(int(cid)),
            )

        phrase_bearing = [b for b in range(n) if tseqs[b].n_phrases > 0]
        counts["phrase_bearing"] = len(phrase_bearing)
        counts["skipped_phrase_free"] = n - len(phrase_bearing)

        img_neg = (np.arange(n) + 1 + rng.integers(0, n - 1, size=n)) % n
        txt_neg = (np.arange(n) + 1 + rng.integers(0, n - 1, size=n)) % n
        enc_neg_img = None
        if ("grounding" in active and phrase_bearing) or "match" in active:
            vb_neg = collate_visual(
                [(tag_views[j].ids if tag_views[j] is not None else vseqs[j].tag_ids) for j in img_neg],
                [vseqs[j].region_features for j in img_neg],
            )
            enc_neg_img = self.model.encode_merged(tb, vb_neg, training=True, rng=rng)

        if "grounding" in active and phrase_bearing:
            pos_sims, neg_sims = [], []
            for b in phrase_bearing:
                slots = tb.phrase_slots(b)
                bb = np.full(len(slots), b)
                g_p_pos = nn.gather_positions(enc.grounding, bb, slots)
                reg_pos = enc.region_offset + np.arange(vseqs[b].n_regions)
                g_r_pos = nn.gather_positions(enc.grounding, np.full(len(reg_pos), b), reg_pos)
                s_pos, _ = L.phrase_region_similarity(g_p_pos, g_r_pos)
                g_p_neg = nn.gather_positions(enc_neg_img.grounding, bb, slots)
                k_neg = vseqs[img_neg[b]].n_regions
                reg_neg = enc_neg_img.region_offset + np.arange(k_neg)
                g_r_neg = nn.gather_positions(enc_neg_img.grounding, np.full(len(reg_neg), b), reg_neg)
                s_neg, _ = L.phrase_region_similarity(g_p_neg, g_r_neg)
                pos_sims.append(s_pos)
                neg_sims.append(s_neg)
            parts["grounding"] = L.grounding_hinge_loss(pos_sims, neg_sims)

        if "match" in active:
            coin_img = rng.random(n) < 0.5
            txt_rows = np.where(~coin_img)[0]
            d = self.model.config.hidden
            if txt_rows.size:
                tb_swapped = collate_text(
                    [(token_views[j].ids if token_views[j] is not None else tseqs[j].token_ids) for j in txt_neg[txt_rows]],
                    [(phrase_views[j].ids if phrase_views[j] is not None else tseqs[j].phrase_ids) for j in txt_neg[txt_rows]],
                )
                vb_kept = collate_visual(
                    [(tag_views[j].ids if tag_views[j] is not None else vseqs[j].tag_ids) for j in txt_rows],
                    [vseqs[j].region_features for j in txt_rows],
                )
                enc_neg_txt = self.model.encode_merged(tb_swapped, vb_kept, training=True, rng=rng)
            txt_order = {int(b): k for k, b in enumerate(txt_rows)}
            neg_cls_rows = []
            for b in range(n):
                if coin_img[b]:
                    neg_cls_rows.append(nn.narrow(nn.narrow(enc_neg_img.hidden, 0, b, 1), 1, 0, 1))
                else:
                    k = txt_order[b]
                    neg_cls_rows.append(nn.narrow(nn.narrow(enc_neg_txt.hidden, 0, k, 1), 1, 0, 1))
            pos_cls = nn.reshape(nn.narrow(enc.hidden, 1, 0, 1), (n, d))
            neg_cls = nn.reshape(nn.concat(neg_cls_rows, axis=0), (n, d))
            logits = self.model.match_logits(nn.concat([pos_cls, neg_cls], axis=0))
            labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
            parts["match"] = L.match_loss(logits, labels)
            counts["match_pairs"] = 2 * n

        if "masked_token" in active:
            rows_b, rows_p, originals = [], [], []
            for b, view in enumerate(token_views):
                rows_b.extend([b] * len(view.positions))
                rows_p.extend(view.positions.tolist())
                originals.extend(view.original_ids.tolist())
            h = nn.gather_positions(enc.hidden, np.array(rows_b), np.array(rows_p))
            parts["masked_token"] = L.masked_token_loss(
                self.model.token_logits(h), np.array(originals)
            )
            counts["masked_tokens"] = len(originals)

        return parts, counts

    def run_merged(self, max_steps: int | None = None) -> TrainState:
        """Single-stage training on the merged objective (no contrastive)."""
        epochs = self.cfg.stage1.epochs + self.cfg.stage2.epochs
        stage_cfg = replace(self.cfg.stage2, epochs=epochs)
        self.model.set_stage(2)
        state = self._fresh_state(stage_cfg)
        subset = frozenset(L.LOSS_NAMES) - {"contrastive"}
        return self._run_stage(stage_cfg, state, loss_subset=subset, max_steps=max_steps)


# ---- checkpointing ----

CHECKPOINT_META_VERSION = 1


def save_checkpoint(path, trainer: Trainer, state: TrainState) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, t in trainer.model.params.items():
        arrays[f"param/{name}"] = t.data
    for name, m in state.optim.m.items():
        arrays[f"optim_m/{name}"] = m
    for name, v in state.optim.v.items():
        arrays[f"optim_v/{name}"] = v
    tv, pv = trainer.token_vocab, trainer.phrase_vocab
    meta = {
        "meta_version": CHECKPOINT_META_VERSION,
        "stage": state.stage,
        "epoch": state.epoch,
        "step_in_stage": state.step_in_stage,
        "global_step": state.global_step,
        "running": state.running,
        "optim": {
            "lr": state.optim.lr,
            "weight_decay": state.optim.weight_decay,
            "beta1": state.optim.beta1,
            "beta2": state.optim.beta2,
            "eps": state.optim.eps,
            "step": state.optim.step,
        },
        "rng_state": state.rng.bit_generator.state,
        "run_config": run_config_to_dict(trainer.cfg),
        "dtype": np.dtype(trainer.dtype).name,
        "token_vocab": {
            "tokens": tv.id_to_token,
            "frequencies": tv.frequencies,
            "tag_token_ids": list(tv.tag_token_ids),
        },
        "phrase_vocab": {
            "surfaces": [list(s) for s in pv.surfaces],
            "frequencies": pv.frequencies,
            "constituents": pv.constituent_ids,
        },
    }
    nn.save_tensors(path, arrays, meta)


def load_checkpoint(path, corpus: Corpus) -> tuple[Trainer, TrainState]:
    """Rebuild a trainer (model, vocabs) plus its exact training state."""
    arrays, meta = nn.load_tensors(path)
    if meta.get("meta_version") != CHECKPOINT_META_VERSION:
        raise nn.CheckpointError(f"{path}: unsupported checkpoint meta version")
    cfg = run_config_from_dict(meta["run_config"])
    tvm = meta["token_vocab"]
    token_vocab = TokenVocab(
        {tok: i for i, tok in enumerate(tvm["tokens"])},
        tvm["frequencies"],
        list(tvm["tag_token_ids"]),
    )
    pvm = meta["phrase_vocab"]
    phrase_vocab = PhraseVocab(
        id_offset=len(token_vocab),
        surfaces=[tuple(s) for s in pvm["surfaces"]],
        frequencies=pvm["frequencies"],
        constituent_ids=pvm["constituents"],
    )
    trainer_cls = MergedTrainer if cfg.merged else Trainer
    trainer = trainer_cls(corpus, cfg, vocabs=(token_vocab, phrase_vocab))
    for name, t in trainer.model.params.items():
        key = f"param/{name}"
        if key not in arrays:
            raise nn.CheckpointError(f"{path}: missing parameter {name}")
        if tuple(arrays[key].shape) != t.shape:
            raise nn.CheckpointError(f"{path}: shape mismatch for {name}")
        t.data = arrays[key]
    opt = meta["optim"]
    optim = OptimState(
        lr=opt["lr"], weight_decay=opt["weight_decay"], beta1=opt["beta1"],
        beta2=opt["beta2"], eps=opt["eps"], step=opt["step"],
    )
    for key, arr in arrays.items():
        if key.startswith("optim_m/"):
            optim.m[key[len("optim_m/"):]] = arr
        elif key.startswith("optim_v/"):
            optim.v[key[len("optim_v/"):]] = arr
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(
        stage=meta["stage"],
        epoch=meta["epoch"],
        step_in_stage=meta["step_in_stage"],
        global_step=meta["global_step"],
        optim=optim,
        rng=rng,
        running={k: list(v) for k, v in meta["running"].items()},
    )
    trainer.model.set_stage(state.stage)
    return trainer, state
