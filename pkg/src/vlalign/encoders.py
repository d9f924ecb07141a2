"""Two-stage encoder architecture.

Stage 1 is a pair of uni-modal transformer encoders: the textual encoder
reads [CLS] + tokens + phrase concepts, the visual encoder reads [CLS] +
tags + projected region features.  Stage 2 concatenates the textual
outputs with the region outputs (tags and the visual CLS are excluded)
and runs the cross-modal encoder; grounding features are the
L2-normalized hidden states of phrase and region slots taken from an
intermediate cross-modal layer.

Token and phrase embeddings share one table: rows [0, n_tokens) are
tokens (tags included), rows [n_tokens, ...) are phrase concepts,
initialized to the mean embedding of their constituent tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .inputs import CLS_ID, PAD_ID, PhraseVocab, TextSequence, TokenVocab, VisualSequence
from .nn import Tensor

NEG_ATTN = -1e9  # additive attention mask for padding slots


@dataclass(frozen=True)
class ModelConfig:
    layers_text: int = 2
    layers_visual: int = 2
    layers_mm: int = 2
    hidden: int = 64
    heads: int = 4
    ff: int = 128
    feat_dim: int = 16
    grounding_layer: int = 1  # cross-modal layer whose states feed phrase grounding
    dropout: float = 0.0
    max_positions: int = 128

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if not (1 <= self.grounding_layer <= self.layers_mm):
            raise ValueError("grounding_layer must lie within the cross-modal stack")


@dataclass
class TextBatch:
    ids: np.ndarray  # (B, 1 + N_max + M_max), [CLS] tokens..., phrases...
    positions: np.ndarray
    mask: np.ndarray  # (B, L) 1.0 real / 0.0 pad
    n_tokens: np.ndarray
    n_phrases: np.ndarray
    token_limit: int  # phrase slots start at this column

    @property
    def length(self) -> int:
        return self.ids.shape[1]

    def phrase_slots(self, b: int) -> np.ndarray:
        return self.token_limit + np.arange(self.n_phrases[b])


@dataclass
class VisualBatch:
    ids: np.ndarray  # (B, 1 + Kt_max): [CLS] + tag token ids
    feats: np.ndarray  # (B, K_max, feat_dim + 6)
    positions: np.ndarray  # (B, 1 + Kt_max + K_max)
    mask: np.ndarray
    n_tags: np.ndarray
    n_regions: np.ndarray
    tag_limit: int  # region slots start at this column

    @property
    def length(self) -> int:
        return self.ids.shape[1] + self.feats.shape[1]

    def region_slots(self, b: int) -> np.ndarray:
        return self.tag_limit + np.arange(self.n_regions[b])


@dataclass
class Encoding:
    hidden: Tensor  # (B, L, d) final-layer states
    mask: np.ndarray


@dataclass
class CrossModalEncoding:
    hidden: Tensor  # (B, Lt + K_max, d)
    mask: np.ndarray
    grounding: Tensor  # (B, Lt + K_max, d) unit-norm states from the grounding layer
    region_offset: int  # region slots start at this column


@dataclass
class MergedEncoding:
    """Single-stream encoding over [CLS] tokens phrases tags regions."""

    hidden: Tensor
    mask: np.ndarray
    grounding: Tensor
    tag_offset: int  # tag slots start here
    region_offset: int  # region slots start here


@dataclass
class EncodedPair:
    """Per-pair view of all encoder outputs (evaluation convenience)."""

    token_out: np.ndarray  # (1 + N, d), [CLS] first
    phrase_out: np.ndarray  # (M, d)
    tag_out: np.ndarray  # (1 + Kt, d), visual [CLS] first (merged: (Kt, d))
    region_out: np.ndarray  # (K, d)
    text_global: np.ndarray | None  # unit-norm (d,); None for the merged variant
    visual_global: np.ndarray | None
    mm_out: np.ndarray  # (1 + N + M + K, d)
    grounding_phrases: np.ndarray  # (M, d) unit-norm
    grounding_regions: np.ndarray  # (K, d) unit-norm


def collate_text(
    token_streams: list[np.ndarray], phrase_streams: list[np.ndarray]
) -> TextBatch:
    b = len(token_streams)
    n_tok = np.array([len(t) - 1 for t in token_streams])
    n_phr = np.array([len(p) for p in phrase_streams])
    token_limit = 1 + int(n_tok.max())
    length = token_limit + (int(n_phr.max()) if b else 0)
    ids = np.full((b, length), PAD_ID, dtype=np.int64)
    positions = np.zeros((b, length), dtype=np.int64)
    mask = np.zeros((b, length), dtype=np.float64)
    for i, (toks, phrs) in enumerate(zip(token_streams, phrase_streams)):
        ids[i, : len(toks)] = toks
        positions[i, : len(toks)] = np.arange(len(toks))
        mask[i, : len(toks)] = 1.0
        if len(phrs):
            sl = slice(token_limit, token_limit + len(phrs))
            ids[i, sl] = phrs
            positions[i, sl] = len(toks) + np.arange(len(phrs))
            mask[i, sl] = 1.0
    return TextBatch(ids, positions, mask, n_tok, n_phr, token_limit)


def collate_visual(tag_streams: list[np.ndarray], feats: list[np.ndarray]) -> VisualBatch:
    b = len(tag_streams)
    n_tags = np.array([len(t) for t in tag_streams])
    n_reg = np.array([f.shape[0] for f in feats])
    tag_limit = 1 + int(n_tags.max())
    k_max = int(n_reg.max())
    feat_dim = feats[0].shape[1]
    ids = np.full((b, tag_limit), PAD_ID, dtype=np.int64)
    ids[:, 0] = CLS_ID
    fmat = np.zeros((b, k_max, feat_dim), dtype=np.float64)
    positions = np.zeros((b, tag_limit + k_max), dtype=np.int64)
    mask = np.zeros((b, tag_limit + k_max), dtype=np.float64)
    mask[:, 0] = 1.0
    for i, (tags, f) in enumerate(zip(tag_streams, feats)):
        ids[i, 1 : 1 + len(tags)] = tags
        positions[i, : 1 + len(tags)] = np.arange(1 + len(tags))
        mask[i, 1 : 1 + len(tags)] = 1.0
        k = f.shape[0]
        fmat[i, :k] = f
        sl = slice(tag_limit, tag_limit + k)
        positions[i, sl] = 1 + len(tags) + np.arange(k)
        mask[i, sl] = 1.0
    return VisualBatch(ids, fmat, positions, mask, n_tags, n_reg, tag_limit)


class MultiLevelAligner:
    """Textual, visual, and cross-modal encoders plus prediction heads."""

    CROSS_MODAL_PREFIXES = ("mm.", "head.match.", "head.mtok.")

    def __init__(
        self,
        config: ModelConfig,
        token_vocab: TokenVocab,
        phrase_vocab: PhraseVocab,
        seed: int = 0,
        dtype=np.float64,
    ):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.n_tokens = len(token_vocab)
        self.n_phrases = len(phrase_vocab)
        self.n_tag_classes = token_vocab.n_tag_classes
        self.tag_token_ids = np.asarray(token_vocab.tag_token_ids, dtype=np.int64)
        self._phrase_constituents = [list(c) for c in phrase_vocab.constituent_ids]
        self.params = nn.ParamStore()
        self._build_params(seed)

    # ---- parameter construction ----

    def _gauss(self, rng, shape, std=0.02):
        return (rng.standard_normal(shape) * std).astype(self.dtype)

    def _add_linear(self, rng, name: str, d_in: int, d_out: int) -> None:
        self.params.add(f"{name}.w", self._gauss(rng, (d_in, d_out)))
        self.params.add(f"{name}.b", np.zeros(d_out, dtype=self.dtype), decay=False)

    def _add_ln(self, name: str) -> None:
        d = self.config.hidden
        self.params.add(f"{name}.g", np.ones(d, dtype=self.dtype), decay=False)
        self.params.add(f"{name}.b", np.zeros(d, dtype=self.dtype), decay=False)

    def _add_block(self, rng, name: str) -> None:
        c = self.config
        for part in ("q", "k", "v", "o"):
            self._add_linear(rng, f"{name}.attn.{part}", c.hidden, c.hidden)
        self._add_ln(f"{name}.ln1")
        self._add_linear(rng, f"{name}.ff.fc1", c.hidden, c.ff)
        self._add_linear(rng, f"{name}.ff.fc2", c.ff, c.hidden)
        self._add_ln(f"{name}.ln2")

    def _init_phrase_rows(self, table: np.ndarray) -> None:
        for k, toks in enumerate(self._phrase_constituents):
            table[self.n_tokens + k] = table[toks].mean(axis=0) if toks else 0.0

    def _build_params(self, seed: int) -> None:
        c = self.config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0DE1]))
        table = self._gauss(rng, (self.n_tokens + self.n_phrases, c.hidden))
        self._init_phrase_rows(table)
        self.params.add("emb.word", table)
        self.params.add("emb.pos", self._gauss(rng, (c.max_positions, c.hidden)))
        self.params.add("emb.seg", self._gauss(rng, (2, c.hidden)))
        self._add_ln("text.emb_ln")
        self._add_ln("vis.emb_ln")
        self._add_linear(rng, "vis.region_proj", c.feat_dim + 6, c.hidden)
        for i in range(c.layers_text):
            self._add_block(rng, f"text.{i}")
        for i in range(c.layers_visual):
            self._add_block(rng, f"vis.{i}")
        self.params.add(
            "temperature", np.asarray(0.07, dtype=self.dtype), decay=False
        )
        self._add_linear(rng, "head.tag.fc1", c.hidden, c.hidden)
        self._add_linear(rng, "head.tag.fc2", c.hidden, self.n_tag_classes)
        self._add_linear(rng, "head.phrase.fc1", c.hidden, c.hidden)
        self._add_linear(rng, "head.phrase.fc2", c.hidden, max(self.n_phrases, 1))
        self._init_crossmodal(seed)

    def _init_crossmodal(self, seed: int) -> None:
        c = self.config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0DE2]))
        for i in range(c.layers_mm):
            self._add_block(rng, f"mm.{i}")
        self._add_linear(rng, "head.match.fc1", c.hidden, c.hidden)
        self._add_linear(rng, "head.match.fc2", c.hidden, 2)
        self._add_linear(rng, "head.mtok.fc1", c.hidden, c.hidden)
        self._add_ln("head.mtok.ln")
        self.params.add("head.mtok.bias", np.zeros(self.n_tokens, dtype=self.dtype), decay=False)

    def reinit_crossmodal(self, seed: int) -> None:
        """Redraw the cross-modal encoder and stage-2 heads (fresh stage-2 start)."""
        for name in [n for n in self.params.names() if n.startswith(self.CROSS_MODAL_PREFIXES)]:
            self.params.remove(name)
        self._init_crossmodal(seed)

    def set_stage(self, stage: int) -> None:
        """Stage 1 trains only the uni-modal encoders and their heads."""
        for name, t in self.params.items():
            t.requires_grad = stage != 1 or not name.startswith(self.CROSS_MODAL_PREFIXES)

    @classmethod
    def is_crossmodal_param(cls, name: str) -> bool:
        return name.startswith(cls.CROSS_MODAL_PREFIXES)

    # ---- forward pieces ----

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return nn.add(nn.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return nn.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _attention(self, name: str, x: Tensor, addmask: np.ndarray) -> Tensor:
        c = self.config
        b, l, _ = x.shape
        dh = c.hidden // c.heads
        def split(t: Tensor) -> Tensor:
            return nn.transpose(nn.reshape(t, (b, l, c.heads, dh)), (0, 2, 1, 3))
        q = split(self._linear(f"{name}.q", x))
        k = split(self._linear(f"{name}.k", x))
        v = split(self._linear(f"{name}.v", x))
        ctx = nn.scaled_dot_product_attention(q, k, v, addmask)
        ctx = nn.reshape(nn.transpose(ctx, (0, 2, 1, 3)), (b, l, c.hidden))
        return self._linear(f"{name}.o", ctx)

    def _stack(
        self,
        prefix: str,
        x: Tensor,
        mask: np.ndarray,
        layers: int,
        training: bool = False,
        rng: np.random.Generator | None = None,
        capture_layer: int | None = None,
    ) -> tuple[Tensor, Tensor | None]:
        addmask = ((1.0 - mask) * NEG_ATTN).astype(self.dtype)[:, None, None, :]
        drop = self.config.dropout if training else 0.0
        captured = None
        for i in range(layers):
            a = self._attention(f"{prefix}.{i}.attn", x, addmask)
            if drop > 0:
                a = nn.dropout(a, drop, rng)
            x = self._ln(f"{prefix}.{i}.ln1", nn.add(x, a))
            f = self._linear(f"{prefix}.{i}.ff.fc2", nn.gelu(self._linear(f"{prefix}.{i}.ff.fc1", x)))
            if drop > 0:
                f = nn.dropout(f, drop, rng)
            x = self._ln(f"{prefix}.{i}.ln2", nn.add(x, f))
            if capture_layer is not None and i + 1 == capture_layer:
                captured = x
        return x, captured

    def _embed_slots(self, ids: np.ndarray, positions: np.ndarray, segment: int) -> Tensor:
        if positions.max(initial=0) >= self.config.max_positions:
            raise ValueError("sequence longer than the position table")
        word = nn.embedding_lookup(self.params["emb.word"], ids)
        pos = nn.embedding_lookup(self.params["emb.pos"], positions)
        seg = nn.embedding_lookup(self.params["emb.seg"], np.full_like(positions, segment))
        return nn.add(nn.add(word, pos), seg)

    def encode_text(
        self, batch: TextBatch, training: bool = False, rng: np.random.Generator | None = None
    ) -> Encoding:
        x = self._embed_slots(batch.ids, batch.positions, segment=0)
        x = self._ln("text.emb_ln", x)
        if training and self.config.dropout > 0:
            x = nn.dropout(x, self.config.dropout, rng)
        hidden, _ = self._stack("text", x, batch.mask, self.config.layers_text, training, rng)
        return Encoding(hidden=hidden, mask=batch.mask)

    def encode_visual(
        self, batch: VisualBatch, training: bool = False, rng: np.random.Generator | None = None
    ) -> Encoding:
        if batch.feats.shape[2] != self.config.feat_dim + 6:
            raise nn.ShapeMismatch("region features", batch.feats.shape, (self.config.feat_dim + 6,))
        tag_part = nn.embedding_lookup(self.params["emb.word"], batch.ids)
        region_part = self._linear("vis.region_proj", Tensor(batch.feats.astype(self.dtype)))
        x = nn.concat([tag_part, region_part], axis=1)
        pos = nn.embedding_lookup(self.params["emb.pos"], batch.positions)
        seg = nn.embedding_lookup(self.params["emb.seg"], np.ones_like(batch.positions))
        x = nn.add(nn.add(x, pos), seg)
        x = self._ln("vis.emb_ln", x)
        if training and self.config.dropout > 0:
            x = nn.dropout(x, self.config.dropout, rng)
        hidden, _ = self._stack("vis", x, batch.mask, self.config.layers_visual, training, rng)
        return Encoding(hidden=hidden, mask=batch.mask)

    def encode_crossmodal(
        self,
        text_hidden: Tensor,
        text_mask: np.ndarray,
        region_hidden: Tensor,
        region_mask: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> CrossModalEncoding:
        """Joint encoding of {text outputs, region outputs}; no tag slots.

        The textual [CLS] slot doubles as the cross-modal [CLS].
        grounding states are captured at ``config.grounding_layer`` and
        L2-normalized.
        """
        if text_hidden.shape[2] != region_hidden.shape[2]:
            raise nn.ShapeMismatch("crossmodal inputs", text_hidden.shape, region_hidden.shape)
        x = nn.concat([text_hidden, region_hidden], axis=1)
        mask = np.concatenate([text_mask, region_mask], axis=1)
        hidden, captured = self._stack(
            "mm", x, mask, self.config.layers_mm, training, rng,
            capture_layer=self.config.grounding_layer,
        )
        return CrossModalEncoding(
            hidden=hidden,
            mask=mask,
            grounding=nn.l2_normalize(captured, axis=-1),
            region_offset=text_hidden.shape[1],
        )

    def region_hidden(self, vis_enc: Encoding, batch: VisualBatch) -> tuple[Tensor, np.ndarray]:
        k_max = batch.feats.shape[1]
        return (
            nn.narrow(vis_enc.hidden, 1, batch.tag_limit, k_max),
            batch.mask[:, batch.tag_limit :],
        )

    def global_embeddings(self, text_enc: Encoding, vis_enc: Encoding) -> tuple[Tensor, Tensor]:
        d = self.config.hidden
        w_cls = nn.reshape(nn.narrow(text_enc.hidden, 1, 0, 1), (-1, d))
        t_cls = nn.reshape(nn.narrow(vis_enc.hidden, 1, 0, 1), (-1, d))
        return nn.l2_normalize(w_cls, axis=-1), nn.l2_normalize(t_cls, axis=-1)

    # ---- prediction heads ----

    def _mlp_head(self, name: str, h: Tensor) -> Tensor:
        return self._linear(f"{name}.fc2", nn.gelu(self._linear(f"{name}.fc1", h)))

    def tag_logits(self, h: Tensor) -> Tensor:
        return self._mlp_head("head.tag", h)

    def phrase_logits(self, h: Tensor) -> Tensor:
        return self._mlp_head("head.phrase", h)

    def match_logits(self, mm_cls: Tensor) -> Tensor:
        return self._mlp_head("head.match", mm_cls)

    def token_logits(self, h: Tensor) -> Tensor:
        """Masked-token head; the decoder is tied to the token embedding rows."""
        t = self._ln("head.mtok.ln", nn.gelu(self._linear("head.mtok.fc1", h)))
        rows = nn.narrow(self.params["emb.word"], 0, 0, self.n_tokens)
        return nn.add(nn.matmul(t, nn.swap_last2(rows)), self.params["head.mtok.bias"])

    # ---- evaluation helpers ----

    def match_probabilities(
        self,
        text_seqs: list[TextSequence],
        vis_seqs: list[VisualSequence],
        chunk: int = 64,
    ) -> np.ndarray:
        """p(match) for each aligned (text, visual) sequence pair."""
        out = np.empty(len(text_seqs), dtype=np.float64)
        with nn.no_grad():
            for start in range(0, len(text_seqs), chunk):
                ts = text_seqs[start : start + chunk]
                vs = vis_seqs[start : start + chunk]
                tb = collate_text([s.token_ids for s in ts], [s.phrase_ids for s in ts])
                vb = collate_visual([s.tag_ids for s in vs], [s.region_features for s in vs])
                te = self.encode_text(tb)
                ve = self.encode_visual(vb)
                rh, rm = self.region_hidden(ve, vb)
                mm = self.encode_crossmodal(te.hidden, tb.mask, rh, rm)
                cls = nn.reshape(nn.narrow(mm.hidden, 1, 0, 1), (len(ts), self.config.hidden))
                probs = nn.softmax(self.match_logits(cls), axis=-1)
                out[start : start + len(ts)] = probs.data[:, 1]
        return out

    # ---- single-pair convenience ----

    def encode_pair(self, text_seq: TextSequence, vis_seq: VisualSequence) -> EncodedPair:
        with nn.no_grad():
            tb = collate_text([text_seq.token_ids], [text_seq.phrase_ids])
            vb = collate_visual([vis_seq.tag_ids], [vis_seq.region_features])
            te = self.encode_text(tb)
            ve = self.encode_visual(vb)
            wg, tg = self.global_embeddings(te, ve)
            rh, rm = self.region_hidden(ve, vb)
            mm = self.encode_crossmodal(te.hidden, tb.mask, rh, rm)
            n, m, k = text_seq.n_tokens, text_seq.n_phrases, vis_seq.n_regions
            h = te.hidden.data[0]
            mm_h = mm.hidden.data[0]
            g = mm.grounding.data[0]
            phrase_slots = tb.token_limit + np.arange(m)
            region_slots = mm.region_offset + np.arange(k)
            mm_parts = [mm_h[: 1 + n], mm_h[phrase_slots], mm_h[region_slots]]
            return EncodedPair(
                token_out=h[: 1 + n].copy(),
                phrase_out=h[phrase_slots].copy(),
                tag_out=ve.hidden.data[0][: 1 + vis_seq.n_tags].copy(),
                region_out=ve.hidden.data[0][vb.tag_limit : vb.tag_limit + k].copy(),
                text_global=wg.data[0].copy(),
                visual_global=tg.data[0].copy(),
                mm_out=np.concatenate(mm_parts, axis=0),
                grounding_phrases=g[phrase_slots].copy(),
                grounding_regions=g[region_slots].copy(),
            )


class SingleStreamAligner(MultiLevelAligner):
    """Merged-attention variant: a single encoder over the full sequence
    {tokens, phrases, tags, regions}, with no uni-modal stage and hence
    no global contrastive embeddings."""

    def _build_params(self, seed: int) -> None:
        c = self.config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0DE3]))
        table = self._gauss(rng, (self.n_tokens + self.n_phrases, c.hidden))
        self._init_phrase_rows(table)
        self.params.add("emb.word", table)
        self.params.add("emb.pos", self._gauss(rng, (c.max_positions, c.hidden)))
        self.params.add("emb.seg", self._gauss(rng, (2, c.hidden)))
        self._add_ln("merged.emb_ln")
        self._add_linear(rng, "vis.region_proj", c.feat_dim + 6, c.hidden)
        for i in range(self.n_layers):
            self._add_block(rng, f"merged.{i}")
        self._add_linear(rng, "head.tag.fc1", c.hidden, c.hidden)
        self._add_linear(rng, "head.tag.fc2", c.hidden, self.n_tag_classes)
        self._add_linear(rng, "head.phrase.fc1", c.hidden, c.hidden)
        self._add_linear(rng, "head.phrase.fc2", c.hidden, max(self.n_phrases, 1))
        self._add_linear(rng, "head.match.fc1", c.hidden, c.hidden)
        self._add_linear(rng, "head.match.fc2", c.hidden, 2)
        self._add_linear(rng, "head.mtok.fc1", c.hidden, c.hidden)
        self._add_ln("head.mtok.ln")
        self.params.add("head.mtok.bias", np.zeros(self.n_tokens, dtype=self.dtype), decay=False)

    @property
    def n_layers(self) -> int:
        return self.config.layers_text + self.config.layers_mm

    def set_stage(self, stage: int) -> None:
        for _, t in self.params.items():
            t.requires_grad = True

    def reinit_crossmodal(self, seed: int) -> None:
        pass  # single stream: there is no separate cross-modal stack

    def encode_merged(
        self,
        tb: TextBatch,
        vb: VisualBatch,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> MergedEncoding:
        """Encode [CLS] tokens phrases | tags | regions in one stack.

        Grounding states come from the middle layer of the stack."""
        text = self._embed_slots(tb.ids, tb.positions, segment=0)
        kt_max = vb.ids.shape[1] - 1
        tag_ids = vb.ids[:, 1:]
        tag_emb = nn.embedding_lookup(self.params["emb.word"], tag_ids)
        tag_pos = nn.embedding_lookup(self.params["emb.pos"], vb.positions[:, 1 : 1 + kt_max])
        seg_tab = self.params["emb.seg"]
        tag_seg = nn.embedding_lookup(seg_tab, np.ones_like(tag_ids))
        tags = nn.add(nn.add(tag_emb, tag_pos), tag_seg)
        region_emb = self._linear("vis.region_proj", Tensor(vb.feats.astype(self.dtype)))
        reg_pos = nn.embedding_lookup(self.params["emb.pos"], vb.positions[:, vb.tag_limit :])
        reg_seg = nn.embedding_lookup(seg_tab, np.ones(vb.feats.shape[:2], dtype=np.int64))
        regions = nn.add(nn.add(region_emb, reg_pos), reg_seg)
        x = nn.concat([text, tags, regions], axis=1)
        x = self._ln("merged.emb_ln", x)
        if training and self.config.dropout > 0:
            x = nn.dropout(x, self.config.dropout, rng)
        mask = np.concatenate([tb.mask, vb.mask[:, 1:]], axis=1)
        capture = (self.n_layers + 1) // 2
        hidden, captured = self._stack("merged", x, mask, self.n_layers, training, rng, capture_layer=capture)
        lt = tb.ids.shape[1]
        return MergedEncoding(
            hidden=hidden,
            mask=mask,
            grounding=nn.l2_normalize(captured, axis=-1),
            tag_offset=lt,
            region_offset=lt + kt_max,
        )

    def match_probabilities(
        self,
        text_seqs: list[TextSequence],
        vis_seqs: list[VisualSequence],
        chunk: int = 64,
    ) -> np.ndarray:
        out = np.empty(len(text_seqs), dtype=np.float64)
        with nn.no_grad():
            for start in range(0, len(text_seqs), chunk):
                ts = text_seqs[start : start + chunk]
                vs = vis_seqs[start : start + chunk]
                tb = collate_text([s.token_ids for s in ts], [s.phrase_ids for s in ts])
                vb = collate_visual([s.tag_ids for s in vs], [s.region_features for s in vs])
                enc = self.encode_merged(tb, vb)
                cls = nn.reshape(nn.narrow(enc.hidden, 1, 0, 1), (len(ts), self.config.hidden))
                probs = nn.softmax(self.match_logits(cls), axis=-1)
                out[start : start + len(ts)] = probs.data[:, 1]
        return out

    def encode_pair(self, text_seq: TextSequence, vis_seq: VisualSequence) -> EncodedPair:
        with nn.no_grad():
            tb = collate_text([text_seq.token_ids], [text_seq.phrase_ids])
            vb = collate_visual([vis_seq.tag_ids], [vis_seq.region_features])
            enc = self.encode_merged(tb, vb)
            n, m, k = text_seq.n_tokens, text_seq.n_phrases, vis_seq.n_regions
            h = enc.hidden.data[0]
            g = enc.grounding.data[0]
            phrase_slots = tb.token_limit + np.arange(m)
            region_slots = enc.region_offset + np.arange(k)
            mm_parts = [h[: 1 + n], h[phrase_slots], h[region_slots]]
            return EncodedPair(
                token_out=h[: 1 + n].copy(),
                phrase_out=h[phrase_slots].copy(),
                tag_out=h[enc.tag_offset : enc.tag_offset + vis_seq.n_tags].copy(),
                region_out=h[region_slots].copy(),
                text_global=None,
                visual_global=None,
                mm_out=np.concatenate(mm_parts, axis=0),
                grounding_phrases=g[phrase_slots].copy(),
                grounding_regions=g[region_slots].copy(),
            )
