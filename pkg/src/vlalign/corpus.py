"""Synthetic image-text pair generation with exact multi-level alignments.

Each scene is a set of boxed objects (category + attribute) and pairwise
relations.  From a scene we render:

* a templated caption ("<attr> <category>" per object, then
  "<category> <predicate> <category>" per relation),
* phrases (the attribute and relation tuples) with the exact set of
  region indices they describe,
* one region feature per object: a frozen category prototype plus a
  frozen attribute offset plus optional Gaussian noise, concatenated
  with a 6-dim box encoding [x_min, y_min, x_max, y_max, width, height]
  (boxes live in the unit square, so image-size normalizers are 1),
* one tag (the category name) per region.

Generation is deterministic: the per-pair RNG stream is derived from
(seed, pair_id), and the prototype tables from the seed alone, so any
subset of pair ids can be produced independently and in parallel.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

BOX_ENCODING_DIM = 6

CATEGORY_BANK = [
    "cat", "dog", "car", "tree", "bird", "fish", "house", "boat",
    "horse", "sheep", "cup", "book", "chair", "table", "lamp", "phone",
    "clock", "plant", "shoe", "ball", "train", "bridge", "kite", "drum",
]
ATTRIBUTE_BANK = [
    "red", "blue", "green", "small", "large", "shiny",
    "dark", "pale", "striped", "spotted", "old", "new",
]
PREDICATE_BANK = [
    "beside", "above", "below", "near", "behind", "facing",
    "touching", "inside", "outside", "under",
]


class CorpusFormatError(ValueError):
    """Malformed or incompatible corpus file."""


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    n_pairs: int = 1
    n_categories: int = 12
    n_attributes: int = 6
    n_predicates: int = 5
    feat_dim: int = 16
    feature_noise_sigma: float = 0.02
    objects_per_scene: tuple[int, int] = (3, 7)

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        if min(self.n_categories, self.n_attributes, self.n_predicates, self.feat_dim) < 1:
            raise ValueError("all cardinalities must be >= 1")
        if self.feature_noise_sigma < 0:
            raise ValueError("feature_noise_sigma must be >= 0")
        lo, hi = self.objects_per_scene
        if lo < 1 or hi < lo:
            raise ValueError("objects_per_scene must satisfy 1 <= lo <= hi")


@dataclass(frozen=True)
class SceneObject:
    category_id: int
    attribute_id: int
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class SceneRelation:
    subject_index: int
    predicate_id: int
    object_index: int


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    relations: list[SceneRelation]

    def __post_init__(self):
        if not self.objects:
            raise ValueError("a scene needs at least one object")
        for obj in self.objects:
            x0, y0, x1, y1 = obj.box
            if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
                raise ValueError(f"box outside the unit square or degenerate: {obj.box}")
        n = len(self.objects)
        for rel in self.relations:
            if not (0 <= rel.subject_index < n and 0 <= rel.object_index < n):
                raise ValueError("relation endpoint out of range")
            if rel.subject_index == rel.object_index:
                raise ValueError("relation endpoints must differ")


@dataclass(frozen=True)
class Phrase:
    words: tuple[str, ...]
    regions: tuple[int, ...]


@dataclass
class SynthPair:
    pair_id: int
    caption: list[str]
    phrases: list[Phrase]
    region_features: np.ndarray  # (K, feat_dim + 6)
    boxes: list[tuple[float, float, float, float]]
    tags: list[str]

    @property
    def gt_alignment(self) -> list[tuple[int, ...]]:
        return [p.regions for p in self.phrases]

    @property
    def n_regions(self) -> int:
        return len(self.tags)

    def validate(self) -> None:
        k = len(self.tags)
        if not (len(self.boxes) == self.region_features.shape[0] == k and k >= 1):
            raise ValueError("region feature / box / tag counts disagree")
        for p in self.phrases:
            if not p.regions:
                raise ValueError("phrase without a ground-truth region")
            if any(r < 0 or r >= k for r in p.regions):
                raise ValueError("ground-truth region index out of range")


@dataclass
class CorpusHeader:
    config: CorpusConfig
    category_names: list[str]
    attribute_names: list[str]
    predicate_names: list[str]
    category_prototypes: np.ndarray  # (n_categories, feat_dim)
    attribute_offsets: np.ndarray  # (n_attributes, feat_dim)
    schema_version: int = SCHEMA_VERSION


@dataclass
class Corpus:
    header: CorpusHeader
    pairs: list[SynthPair] = field(default_factory=list)


def _names(bank: list[str], stem: str, n: int) -> list[str]:
    if n <= len(bank):
        return bank[:n]
    return bank + [f"{stem}{i}" for i in range(len(bank), n)]


def box_encoding(box) -> np.ndarray:
    x0, y0, x1, y1 = box
    return np.array([x0, y0, x1, y1, x1 - x0, y1 - y0], dtype=np.float64)


def build_header(config: CorpusConfig) -> CorpusHeader:
    """Draw and freeze the prototype tables for a corpus configuration.

    Attribute offsets are drawn from a unit Gaussian and rescaled to
    0.35x the minimum inter-prototype distance so nearest-prototype
    classification of noise-free features is correct by construction.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7AB1E5]))
    protos = rng.standard_normal((config.n_categories, config.feat_dim))
    offsets = rng.standard_normal((config.n_attributes, config.feat_dim))
    if config.n_categories > 1:
        diffs = protos[:, None, :] - protos[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1))
        dmin = dist[~np.eye(config.n_categories, dtype=bool)].min()
    else:
        dmin = 2.0
    norms = np.sqrt((offsets**2).sum(-1, keepdims=True))
    offsets = offsets / np.where(norms == 0, 1.0, norms) * (0.35 * dmin)
    return CorpusHeader(
        config=config,
        category_names=_names(CATEGORY_BANK, "category", config.n_categories),
        attribute_names=_names(ATTRIBUTE_BANK, "attribute", config.n_attributes),
        predicate_names=_names(PREDICATE_BANK, "predicate", config.n_predicates),
        category_prototypes=protos,
        attribute_offsets=offsets,
    )


def pair_rng(seed: int, pair_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, pair_id]))


def generate_scene(rng: np.random.Generator, config: CorpusConfig) -> SceneSpec:
    lo, hi = config.objects_per_scene
    n_obj = int(rng.integers(lo, hi + 1))
    # categories are drawn without replacement where possible so a phrase
    # like "red cat" names a unique region (exact grounding ground truth)
    cats = rng.choice(config.n_categories, size=n_obj, replace=n_obj > config.n_categories)
    attrs = rng.integers(0, config.n_attributes, size=n_obj)
    objects = []
    for cat, attr in zip(cats, attrs):
        x0 = float(rng.uniform(0.0, 0.7))
        y0 = float(rng.uniform(0.0, 0.7))
        w = float(rng.uniform(0.15, 0.3))
        h = float(rng.uniform(0.15, 0.3))
        objects.append(
            SceneObject(
                category_id=int(cat),
                attribute_id=int(attr),
                box=(x0, y0, x0 + w, y0 + h),
            )
        )
    relations = []
    if n_obj >= 2:
        n_rel = int(rng.integers(0, min(3, n_obj - 1) + 1))
        for _ in range(n_rel):
            subj = int(rng.integers(n_obj))
            obj = int(rng.integers(n_obj - 1))
            if obj >= subj:
                obj += 1
            relations.append(SceneRelation(subj, int(rng.integers(config.n_predicates)), obj))
    return SceneSpec(objects=objects, relations=relations)


def render_pair(
    scene: SceneSpec,
    rng: np.random.Generator,
    config: CorpusConfig,
    header: CorpusHeader,
    pair_id: int = 0,
) -> SynthPair:
    cats = header.category_names
    attrs = header.attribute_names
    preds = header.predicate_names
    caption: list[str] = []
    phrases: list[Phrase] = []
    for i, obj in enumerate(scene.objects):
        words = (attrs[obj.attribute_id], cats[obj.category_id])
        caption.extend(words)
        phrases.append(Phrase(words=words, regions=(i,)))
    for rel in scene.relations:
        s, o = rel.subject_index, rel.object_index
        words = (cats[scene.objects[s].category_id], preds[rel.predicate_id], cats[scene.objects[o].category_id])
        caption.extend(words)
        phrases.append(Phrase(words=words, regions=(s, o)))
    feats = np.empty((len(scene.objects), config.feat_dim + BOX_ENCODING_DIM), dtype=np.float64)
    for i, obj in enumerate(scene.objects):
        core = header.category_prototypes[obj.category_id] + header.attribute_offsets[obj.attribute_id]
        if config.feature_noise_sigma > 0:
            core = core + config.feature_noise_sigma * rng.standard_normal(config.feat_dim)
        feats[i, : config.feat_dim] = core
        feats[i, config.feat_dim :] = box_encoding(obj.box)
    pair = SynthPair(
        pair_id=pair_id,
        caption=caption,
        phrases=phrases,
        region_features=feats,
        boxes=[obj.box for obj in scene.objects],
        tags=[cats[obj.category_id] for obj in scene.objects],
    )
    pair.validate()
    return pair


def generate_pair(config: CorpusConfig, header: CorpusHeader, pair_id: int) -> SynthPair:
    rng = pair_rng(config.seed, pair_id)
    scene = generate_scene(rng, config)
    return render_pair(scene, rng, config, header, pair_id=pair_id)


def generate_corpus(config: CorpusConfig, start_pair_id: int = 0) -> Corpus:
    header = build_header(config)
    pairs = [generate_pair(config, header, start_pair_id + i) for i in range(config.n_pairs)]
    return Corpus(header=header, pairs=pairs)


def phrase_token_spans(pair: SynthPair) -> list[range]:
    """Caption token positions occupied by each phrase, in phrase order.

    Derivable from the caption template: object i owns tokens
    [2i, 2i+2), relation j owns the 3 tokens after all object tokens.
    """
    k = pair.n_regions
    spans = []
    for idx in range(len(pair.phrases)):
        if idx < k:
            spans.append(range(2 * idx, 2 * idx + 2))
        else:
            start = 2 * k + 3 * (idx - k)
            spans.append(range(start, start + 3))
    return spans


def classify_categories(pair: SynthPair, header: CorpusHeader) -> np.ndarray:
    """Nearest-prototype category ids from the first feat_dim dims."""
    feats = pair.region_features[:, : header.config.feat_dim]
    d2 = ((feats[:, None, :] - header.category_prototypes[None, :, :]) ** 2).sum(-1)
    return d2.argmin(axis=1)


# ---- JSONL persistence ----

def _header_record(header: CorpusHeader) -> dict:
    return {
        "schema_version": header.schema_version,
        "config": asdict(header.config),
        "category_names": header.category_names,
        "attribute_names": header.attribute_names,
        "predicate_names": header.predicate_names,
        "prototypes": {
            "category": header.category_prototypes.tolist(),
            "attribute": header.attribute_offsets.tolist(),
        },
    }


def _pair_record(pair: SynthPair) -> dict:
    return {
        "pair_id": pair.pair_id,
        "caption": pair.caption,
        "phrases": [list(p.words) for p in pair.phrases],
        "gt_alignment": [list(p.regions) for p in pair.phrases],
        "boxes": [list(b) for b in pair.boxes],
        "region_features": pair.region_features.tolist(),
        "tags": pair.tags,
    }


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(_header_record(corpus.header)) + "\n")
        for pair in corpus.pairs:
            f.write(json.dumps(_pair_record(pair)) + "\n")


def _parse_header(line: str) -> CorpusHeader:
    rec = json.loads(line)
    version = rec.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CorpusFormatError(f"line 1: schema version {version!r}, expected {SCHEMA_VERSION}")
    cfg = rec["config"]
    cfg["objects_per_scene"] = tuple(cfg["objects_per_scene"])
    return CorpusHeader(
        config=CorpusConfig(**cfg),
        category_names=rec["category_names"],
        attribute_names=rec["attribute_names"],
        predicate_names=rec["predicate_names"],
        category_prototypes=np.asarray(rec["prototypes"]["category"], dtype=np.float64),
        attribute_offsets=np.asarray(rec["prototypes"]["attribute"], dtype=np.float64),
    )


def read_corpus(path) -> Corpus:
    pairs: list[SynthPair] = []
    header: CorpusHeader | None = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                if lineno == 1:
                    header = _parse_header(line)
                    continue
                rec = json.loads(line)
                pair = SynthPair(
                    pair_id=rec["pair_id"],
                    caption=rec["caption"],
                    phrases=[
                        Phrase(words=tuple(w), regions=tuple(r))
                        for w, r in zip(rec["phrases"], rec["gt_alignment"], strict=True)
                    ],
                    region_features=np.asarray(rec["region_features"], dtype=np.float64),
                    boxes=[tuple(b) for b in rec["boxes"]],
                    tags=rec["tags"],
                )
                pair.validate()
            except CorpusFormatError:
                raise
            except Exception as exc:
                raise CorpusFormatError(f"line {lineno}: malformed record ({exc})") from exc
            pairs.append(pair)
    if header is None:
        raise CorpusFormatError("line 1: missing header record")
    return Corpus(header=header, pairs=pairs)
