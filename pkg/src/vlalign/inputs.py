"""Vocabulary construction, multi-level input sequences, and masking.

Token ids and phrase concept ids live in one disjoint id space: tokens
(with the five reserved specials) occupy [0, n_tokens) and phrase
concepts occupy [n_tokens, n_tokens + n_phrases).  Tags are ordinary
tokens, so they share the token embedding table; a masked phrase slot
is corrupted with the token [MASK] id.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, SynthPair

CLS_ID, SEP_ID, MASK_ID, PAD_ID, UNK_ID = range(5)
SPECIAL_TOKENS = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"]

MASK_RATE_TOKENS = 0.15
MASK_RATE_CONCEPTS = 0.25
CORRUPTION_MIX = (0.8, 0.1, 0.1)  # [MASK] / random in-domain / unchanged


@dataclass
class TokenVocab:
    token_to_id: dict[str, int]
    frequencies: list[int]
    tag_token_ids: list[int]  # token ids that can appear as tags, sorted

    def __post_init__(self):
        self.id_to_token = [""] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            self.id_to_token[i] = tok
        self.tag_class = {tid: k for k, tid in enumerate(self.tag_token_ids)}

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def n_tag_classes(self) -> int:
        return len(self.tag_token_ids)

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


@dataclass
class PhraseVocab:
    id_offset: int  # first concept id == token vocab size
    surfaces: list[tuple[str, ...]]
    frequencies: list[int]
    constituent_ids: list[list[int]]
    phrase_to_id: dict[tuple[str, ...], int] = field(init=False)

    def __post_init__(self):
        self.phrase_to_id = {s: self.id_offset + k for k, s in enumerate(self.surfaces)}

    def __len__(self) -> int:
        return len(self.surfaces)

    def class_of(self, concept_id: int) -> int:
        return concept_id - self.id_offset


@dataclass(frozen=True)
class SequenceCaps:
    max_tokens: int = 35
    max_phrases: int = 5
    max_regions: int = 50
    max_tags: int = 20


@dataclass
class TextSequence:
    token_ids: np.ndarray  # [CLS] first, then caption tokens
    phrase_ids: np.ndarray  # concept ids (offset id space)
    phrase_pair_indices: np.ndarray  # index of each kept phrase within pair.phrases
    position_ids: np.ndarray
    segment_ids: np.ndarray

    @property
    def n_tokens(self) -> int:
        return len(self.token_ids) - 1

    @property
    def n_phrases(self) -> int:
        return len(self.phrase_ids)


@dataclass
class VisualSequence:
    tag_ids: np.ndarray  # token ids
    region_features: np.ndarray  # (K, feat_dim + 6)

    @property
    def n_tags(self) -> int:
        return len(self.tag_ids)

    @property
    def n_regions(self) -> int:
        return self.region_features.shape[0]


@dataclass
class MaskedView:
    kind: str  # "tokens" | "phrases" | "tags"
    ids: np.ndarray  # corrupted id stream
    positions: np.ndarray
    original_ids: np.ndarray
    corruption: np.ndarray  # 0 = [MASK], 1 = random in-domain, 2 = unchanged


def build_vocabs(corpus: Corpus, min_phrase_freq: int = 1) -> tuple[TokenVocab, PhraseVocab]:
    """Token vocab over all surface tokens and tags; phrase vocab over
    phrases occurring in at least ``min_phrase_freq`` captions."""
    if not corpus.pairs:
        raise ValueError("cannot build vocabularies from an empty corpus")
    token_freq: Counter[str] = Counter()
    phrase_freq: Counter[tuple[str, ...]] = Counter()
    for pair in corpus.pairs:
        token_freq.update(pair.caption)
        token_freq.update(pair.tags)
        phrase_freq.update({p.words for p in pair.phrases})
    for name in corpus.header.category_names:
        token_freq.setdefault(name, 0)

    token_to_id = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    frequencies = [0] * len(SPECIAL_TOKENS)
    for tok in sorted(token_freq):
        token_to_id[tok] = len(token_to_id)
        frequencies.append(token_freq[tok])
    tag_ids = sorted(token_to_id[name] for name in corpus.header.category_names)
    token_vocab = TokenVocab(token_to_id, frequencies, tag_ids)

    kept = sorted(s for s, c in phrase_freq.items() if c >= min_phrase_freq)
    phrase_vocab = PhraseVocab(
        id_offset=len(token_vocab),
        surfaces=kept,
        frequencies=[phrase_freq[s] for s in kept],
        constituent_ids=[[token_vocab.id(w) for w in s] for s in kept],
    )
    return token_vocab, phrase_vocab


def extract_phrase_indices(pair: SynthPair, vocab: PhraseVocab, max_phrases: int) -> list[int]:
    kept = [i for i, p in enumerate(pair.phrases) if p.words in vocab.phrase_to_id]
    return kept[:max_phrases]


def extract_phrases(pair: SynthPair, vocab: PhraseVocab, max_phrases: int = 5) -> np.ndarray:
    idx = extract_phrase_indices(pair, vocab, max_phrases)
    return np.array([vocab.phrase_to_id[pair.phrases[i].words] for i in idx], dtype=np.int64)


def build_text_sequence(
    pair: SynthPair, token_vocab: TokenVocab, phrase_vocab: PhraseVocab, caps: SequenceCaps
) -> TextSequence:
    tokens = [CLS_ID] + [token_vocab.id(w) for w in pair.caption[: caps.max_tokens]]
    pair_idx = extract_phrase_indices(pair, phrase_vocab, caps.max_phrases)
    phrase_ids = np.array(
        [phrase_vocab.phrase_to_id[pair.phrases[i].words] for i in pair_idx], dtype=np.int64
    )
    total = len(tokens) + len(phrase_ids)
    return TextSequence(
        token_ids=np.array(tokens, dtype=np.int64),
        phrase_ids=phrase_ids,
        phrase_pair_indices=np.array(pair_idx, dtype=np.int64),
        position_ids=np.arange(total, dtype=np.int64),
        segment_ids=np.zeros(total, dtype=np.int64),
    )


def build_visual_sequence(
    pair: SynthPair, token_vocab: TokenVocab, caps: SequenceCaps, use_tags: bool = True
) -> VisualSequence:
    tags = pair.tags[: caps.max_tags] if use_tags else []
    return VisualSequence(
        tag_ids=np.array([token_vocab.id(t) for t in tags], dtype=np.int64),
        region_features=pair.region_features[: caps.max_regions],
    )


def _random_domain(kind: str, token_vocab: TokenVocab, phrase_vocab: PhraseVocab | None) -> np.ndarray:
    if kind == "tokens":
        return np.arange(len(SPECIAL_TOKENS), len(token_vocab), dtype=np.int64)
    if kind == "tags":
        return np.asarray(token_vocab.tag_token_ids, dtype=np.int64)
    if kind == "phrases":
        if phrase_vocab is None:
            raise ValueError("phrase masking needs the phrase vocabulary")
        return np.arange(
            phrase_vocab.id_offset, phrase_vocab.id_offset + len(phrase_vocab), dtype=np.int64
        )
    raise ValueError(f"unknown masking kind: {kind!r}")


def apply_masking(
    ids: np.ndarray,
    kind: str,
    rng: np.random.Generator,
    token_vocab: TokenVocab,
    phrase_vocab: PhraseVocab | None = None,
    rate: float | None = None,
    corruption_mix: tuple[float, float, float] = CORRUPTION_MIX,
) -> MaskedView:
    """Independently mask eligible positions of one id stream.

    Token streams skip position 0 ([CLS]); phrase and tag streams have
    no reserved slots.  If the Bernoulli draw selects nothing, one
    eligible position is force-masked so downstream losses are defined.
    """
    if rate is None:
        rate = MASK_RATE_TOKENS if kind == "tokens" else MASK_RATE_CONCEPTS
    first = 1 if kind == "tokens" else 0
    eligible = np.arange(first, len(ids), dtype=np.int64)
    if len(eligible) == 0:
        raise ValueError(f"no eligible positions to mask in a {kind} stream")
    sel = rng.random(len(eligible)) < rate
    if not sel.any():
        sel[int(rng.integers(len(eligible)))] = True
    positions = eligible[sel]
    original = ids[positions].copy()
    u = rng.random(len(positions))
    m0, m1, _ = corruption_mix
    corruption = np.where(u < m0, 0, np.where(u < m0 + m1, 1, 2)).astype(np.int8)
    corrupted = ids.copy()
    corrupted[positions[corruption == 0]] = MASK_ID
    n_rand = int((corruption == 1).sum())
    if n_rand:
        domain = _random_domain(kind, token_vocab, phrase_vocab)
        corrupted[positions[corruption == 1]] = domain[rng.integers(len(domain), size=n_rand)]
    return MaskedView(
        kind=kind, ids=corrupted, positions=positions, original_ids=original, corruption=corruption
    )


def demask(view: MaskedView) -> np.ndarray:
    ids = view.ids.copy()
    ids[view.positions] = view.original_ids
    return ids


# ---- vocabulary files: id <TAB> surface <TAB> frequency [<TAB> token ids] ----

def write_token_vocab(vocab: TokenVocab, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, tok in enumerate(vocab.id_to_token):
            f.write(f"{i}\t{tok}\t{vocab.frequencies[i]}\n")


def read_token_vocab(path, tag_names: list[str]) -> TokenVocab:
    token_to_id: dict[str, int] = {}
    freqs: list[int] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            sid, surface, freq = line.rstrip("\n").split("\t")
            if int(sid) != lineno:
                raise ValueError(f"{path}: non-dense id {sid} at line {lineno + 1}")
            token_to_id[surface] = int(sid)
            freqs.append(int(freq))
    tag_ids = sorted(token_to_id[t] for t in tag_names if t in token_to_id)
    return TokenVocab(token_to_id, freqs, tag_ids)


def write_phrase_vocab(vocab: PhraseVocab, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k, surface in enumerate(vocab.surfaces):
            toks = ",".join(str(t) for t in vocab.constituent_ids[k])
            f.write(f"{vocab.id_offset + k}\t{' '.join(surface)}\t{vocab.frequencies[k]}\t{toks}\n")


def read_phrase_vocab(path, id_offset: int) -> PhraseVocab:
    surfaces: list[tuple[str, ...]] = []
    freqs: list[int] = []
    constituents: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            sid, surface, freq, toks = line.rstrip("\n").split("\t")
            if int(sid) != id_offset + lineno:
                raise ValueError(f"{path}: non-dense concept id {sid} at line {lineno + 1}")
            surfaces.append(tuple(surface.split(" ")))
            freqs.append(int(freq))
            constituents.append([int(t) for t in toks.split(",")])
    return PhraseVocab(id_offset, surfaces, freqs, constituents)
