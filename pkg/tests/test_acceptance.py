"""Acceptance suite: one test per criterion, one printed verdict line each.

Run with ``pytest tests/test_acceptance.py -v -s``.  The training sanity
criteria (7, 8) share one desk-scale run provided by a module fixture.
"""

import itertools
import json
import time

import numpy as np
import pytest

from vlalign import losses as L
from vlalign import nn
from vlalign.corpus import CorpusConfig, generate_corpus
from vlalign.encoders import ModelConfig, MultiLevelAligner, collate_text, collate_visual
from vlalign.evaluation import (
    TABLE_VARIANTS,
    ablation_run,
    build_eval_sequences,
    format_ablation_table,
    grounding_eval,
    retrieval_eval,
    retrieval_eval_exhaustive,
)
from vlalign.trainer import RunConfig, StageConfig, Trainer, load_checkpoint, save_checkpoint

RNG = np.random.default_rng(20_240)


def verdict(criterion: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {criterion} failed: {detail}"


# ---------------------------------------------------------------- criterion 1

def test_criterion_1_hungarian_matches_brute_force():
    rng = np.random.default_rng(11)
    t0 = time.monotonic()
    checked = 0
    for trial in range(200):
        m = int(rng.integers(2, 8))
        cost = rng.random((m, m))
        assignment = L.hungarian_match(cost)
        oracle = min(
            cost[np.arange(m), perm].sum() for perm in itertools.permutations(range(m))
        )
        assert assignment.total_cost == oracle, f"trial {trial}: {assignment.total_cost} != {oracle}"
        checked += 1
    elapsed = time.monotonic() - t0
    verdict("1 hungarian-oracle", checked == 200 and elapsed < 5.0,
            f"{checked} matrices exact, {elapsed:.2f}s < 5s")


# ---------------------------------------------------------------- criterion 2

def test_criterion_2_concept_loss_permutation_invariance():
    rng = np.random.default_rng(22)
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(1, 7))
        v = int(rng.integers(m + 1, 14))
        logits = rng.standard_normal((m, v))
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        labels = rng.integers(0, v, size=m)
        base = L.masked_concept_loss(nn.Tensor(probs), labels).item()
        perms = list(itertools.permutations(range(m)))
        if len(perms) > 120:
            perms = [perms[i] for i in rng.choice(len(perms), 120, replace=False)]
        for perm in perms:
            other = L.masked_concept_loss(nn.Tensor(probs), labels[list(perm)]).item()
            worst = max(worst, abs(other - base))
    verdict("2 concept-order-invariance", worst <= 1e-12, f"max deviation {worst:.2e} <= 1e-12")


# ---------------------------------------------------------------- criterion 3

GRAD_MODEL = ModelConfig(hidden=16, heads=2, ff=32, feat_dim=8, max_positions=64)


def test_criterion_3_loss_gradients_match_finite_differences():
    corpus = generate_corpus(
        CorpusConfig(seed=5, n_pairs=2, n_categories=6, n_attributes=4, n_predicates=3,
                     feat_dim=8, objects_per_scene=(3, 4))
    )
    cfg = RunConfig(
        model=GRAD_MODEL,
        stage1=StageConfig(stage=1, epochs=1, batch_size=2, seed=1),
        stage2=StageConfig(stage=2, epochs=1, batch_size=2, seed=2),
        min_phrase_freq=1,
        fp64=True,
    )
    trainer = Trainer(corpus, cfg)
    trainer.model.set_stage(2)
    ids = np.array([0, 1])
    probe = np.random.default_rng(7)
    img_neg, txt_neg = np.array([1, 0]), np.array([1, 0])
    coin = np.array([True, False])
    params = [t for _, t in trainer.model.params.trainable_items()]

    t0 = time.monotonic()
    details = []
    for name in L.LOSS_NAMES:
        def fn(loss_name=name):
            parts, _ = trainer._stage2_losses(
                ids, np.random.default_rng(123), frozenset({loss_name}),
                fixed_negatives=(img_neg, txt_neg, coin),
            )
            return parts[loss_name]

        err = nn.finite_diff_check(
            fn, params, epsilon=1e-5, n_samples=100,
            rng=np.random.default_rng(99), grad_floor=1e-6,
        )
        details.append(f"{name}={err:.2e}")
        assert err < 1e-4, f"{name} gradient relative error {err}"
    elapsed = time.monotonic() - t0
    verdict("3 gradient-correctness", elapsed < 120.0, f"{'; '.join(details)}; {elapsed:.1f}s < 120s")


def test_criterion_3b_structural_zero_gradients():
    """Complement to the sampled check: parameters a loss cannot reach
    have exactly zero analytic gradient."""
    corpus = generate_corpus(
        CorpusConfig(seed=5, n_pairs=2, n_categories=6, n_attributes=4, n_predicates=3,
                     feat_dim=8, objects_per_scene=(3, 4))
    )
    cfg = RunConfig(
        model=GRAD_MODEL,
        stage1=StageConfig(stage=1, epochs=1, batch_size=2, seed=1),
        stage2=StageConfig(stage=2, epochs=1, batch_size=2, seed=2),
        min_phrase_freq=1, fp64=True,
    )
    trainer = Trainer(corpus, cfg)
    trainer.model.set_stage(2)
    ids = np.array([0, 1])
    fixed = (np.array([1, 0]), np.array([1, 0]), np.array([True, False]))
    unreachable = {
        "masked_tag": ("text.", "mm.", "head.phrase", "head.match", "head.mtok", "temperature"),
        "masked_phrase": ("vis.", "mm.", "head.tag", "head.match", "head.mtok", "temperature"),
        "contrastive": ("mm.", "head."),
        "grounding": ("head.", "temperature"),
        "match": ("head.tag", "head.phrase", "head.mtok", "temperature"),
        "masked_token": ("head.tag", "head.phrase", "head.match", "temperature"),
    }
    for name, prefixes in unreachable.items():
        trainer.model.params.zero_grad()
        parts, _ = trainer._stage2_losses(
            ids, np.random.default_rng(123), frozenset({name}), fixed_negatives=fixed
        )
        parts[name].backward()
        for pname, t in trainer.model.params.items():
            if pname.startswith(prefixes):
                assert t.grad is None or not t.grad.any(), f"{name} leaked into {pname}"


# ---------------------------------------------------------------- criterion 4

def test_criterion_4_closed_form_loss_values():
    v = 23
    mlm = L.masked_token_loss(nn.Tensor(np.zeros((3, v))), np.array([0, 5, 22])).item()
    itm = L.match_loss(nn.Tensor(np.zeros((4, 2))), np.array([1, 0, 1, 0])).item()
    n = 6
    emb = nn.Tensor(np.repeat([[1.0, 0.0, 0.0]], n, axis=0))
    block = L.similarity_block(emb, emb, nn.Tensor(np.asarray(1.0)))
    vsc_uniform = L.contrastive_loss(block).item()
    sim = nn.Tensor(np.eye(2))
    block2 = L.SimilarityBlock(
        sim=sim, temperature=nn.Tensor(np.asarray(1.0)),
        image_to_text=np.full((2, 2), 0.5), text_to_image=np.full((2, 2), 0.5),
    )
    worked = L.contrastive_loss(block2).item()
    ok = (
        abs(mlm - np.log(v)) < 1e-9
        and abs(itm - np.log(2)) < 1e-9
        and abs(vsc_uniform - np.log(n)) < 1e-9
        and abs(worked - 0.3133) < 1e-4
    )
    verdict(
        "4 closed-form-values", ok,
        f"mlm ln{v}: {abs(mlm - np.log(v)):.1e}; itm ln2: {abs(itm - np.log(2)):.1e}; "
        f"vsc ln{n}: {abs(vsc_uniform - np.log(n)):.1e}; worked example {worked:.6f} vs 0.3133",
    )


# ---------------------------------------------------------------- criterion 5

def test_criterion_5_normalization_suite(tiny_corpus, tiny_vocabs):
    rng = np.random.default_rng(55)
    worst_row = 0.0
    for _ in range(1000):
        rows = nn.softmax(nn.Tensor(rng.standard_normal((3, 7)) * 5)).data
        worst_row = max(worst_row, float(np.abs(rows.sum(axis=1) - 1).max()))
        assert (rows >= 0).all()
    worst_sim = -1.0
    best_sim = 1.0
    for _ in range(1000):
        m, k = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        g_p = rng.standard_normal((m, 6))
        g_p /= np.sqrt((g_p**2).sum(1, keepdims=True))
        g_r = rng.standard_normal((k, 6))
        g_r /= np.sqrt((g_r**2).sum(1, keepdims=True))
        s, _ = L.phrase_region_similarity(nn.Tensor(g_p), nn.Tensor(g_r))
        worst_sim = max(worst_sim, s.item())
        best_sim = min(best_sim, s.item())
    tv, pv = tiny_vocabs
    model = MultiLevelAligner(GRAD_MODEL, tv, pv, seed=1, dtype=np.float64)
    from vlalign.inputs import SequenceCaps, build_text_sequence, build_visual_sequence

    corpus = tiny_corpus
    worst_norm = 0.0
    for pair in corpus.pairs[:20]:
        ts = build_text_sequence(pair, tv, pv, SequenceCaps())
        vs = build_visual_sequence(pair, tv, SequenceCaps())
        enc = model.encode_pair(ts, vs)
        for g in (enc.grounding_phrases, enc.grounding_regions):
            if len(g):
                worst_norm = max(worst_norm, float(np.abs(np.sqrt((g**2).sum(1)) - 1).max()))
    ok = worst_row < 1e-9 and worst_norm < 1e-9 and -1.0 - 1e-12 <= best_sim and worst_sim <= 1.0 + 1e-12
    verdict(
        "5 normalization-suite", ok,
        f"softmax row-sum dev {worst_row:.1e}; grounding norm dev {worst_norm:.1e}; "
        f"similarity range [{best_sim:.3f}, {worst_sim:.3f}]",
    )


# ---------------------------------------------------------------- criterion 6

def test_criterion_6_disentanglement(tiny_corpus, tiny_vocabs):
    tv, pv = tiny_vocabs
    from vlalign.inputs import SequenceCaps, build_text_sequence, build_visual_sequence

    model = MultiLevelAligner(GRAD_MODEL, tv, pv, seed=9, dtype=np.float64)
    caps = SequenceCaps()
    pair = tiny_corpus.pairs[0]
    ts = build_text_sequence(pair, tv, pv, caps)
    vs = build_visual_sequence(pair, tv, caps)

    tb = collate_text([ts.token_ids], [ts.phrase_ids])
    text_before = model.encode_text(tb).hidden.data
    vs.region_features[:] *= -3.0
    text_after = model.encode_text(tb).hidden.data
    text_invariant = np.array_equal(text_before, text_after)

    vb = collate_visual([vs.tag_ids], [vs.region_features])
    vis_before = model.encode_visual(vb).hidden.data
    ts.token_ids[1] = (ts.token_ids[1] + 3) % (len(tv) - 5) + 5
    vis_after = model.encode_visual(vb).hidden.data
    vis_invariant = np.array_equal(vis_before, vis_after)

    te = model.encode_text(tb)
    ve = model.encode_visual(vb)
    rh, rm = model.region_hidden(ve, vb)
    mm = model.encode_crossmodal(te.hidden, tb.mask, rh, rm)
    expected = (1 + ts.n_tokens + ts.n_phrases) + vs.n_regions
    tag_free = mm.mask[0].sum() == expected and mm.hidden.shape[1] == tb.ids.shape[1] + rh.shape[1]

    verdict(
        "6 disentanglement", text_invariant and vis_invariant and tag_free,
        f"text invariant: {text_invariant}; visual invariant: {vis_invariant}; "
        f"tag-free crossmodal length {int(mm.mask[0].sum())} == {expected}",
    )


# ------------------------------------------------------- criteria 7 and 8

DESK_CORPUS = CorpusConfig(seed=7, n_pairs=2000)
EVAL_CORPUS = CorpusConfig(seed=7, n_pairs=100)


@pytest.fixture(scope="module")
def sanity_run():
    t0 = time.monotonic()
    train = generate_corpus(DESK_CORPUS)
    evalc = generate_corpus(EVAL_CORPUS, start_pair_id=10_000)
    cfg = RunConfig()  # default desk configuration: 5 + 10 epochs, batch 32
    trainer = Trainer(train, cfg)
    state = trainer.run_stage2(trainer.run_stage1())
    ts, vs = build_eval_sequences(evalc, cfg.caps, trainer.token_vocab, trainer.phrase_vocab)
    ids = [p.pair_id for p in evalc.pairs]
    retrieval = retrieval_eval(trainer.model, ts, vs, ids, k_caption=16, k_image=16)
    grounding = grounding_eval(trainer.model, evalc.pairs, ts, vs, "concept")
    elapsed = time.monotonic() - t0
    return {
        "trainer": trainer,
        "state": state,
        "eval_corpus": evalc,
        "eval_seqs": (ts, vs),
        "retrieval": retrieval,
        "grounding": grounding,
        "elapsed": elapsed,
    }


def test_criterion_7_training_sanity(sanity_run):
    trainer = sanity_run["trainer"]
    retrieval = sanity_run["retrieval"]
    grounding = sanity_run["grounding"]
    batch = trainer.cfg.stage1.batch_size
    vsc_bound = 0.5 * np.log(batch)

    stage1_vsc = [m["losses"]["contrastive"] for m in trainer.metrics if m["stage"] == 1][-50:]
    final_vsc = [m["losses"]["contrastive"] for m in trainer.metrics][-50:]
    a = np.median(stage1_vsc) < vsc_bound and np.median(final_vsc) < vsc_bound
    cap_r1, img_r1 = retrieval.caption_recall[1], retrieval.image_recall[1]
    b = cap_r1 >= 0.10 and img_r1 >= 0.10  # 10x the 1% chance baseline
    bar = 3.0 * grounding.chance
    c = grounding.accuracy >= bar
    finite = all(np.isfinite(t.data).all() for _, t in trainer.model.params.items())
    in_time = sanity_run["elapsed"] < 1800.0
    verdict(
        "7 training-sanity", a and b and c and finite and in_time,
        f"VSC medians {np.median(stage1_vsc):.3f}/{np.median(final_vsc):.3f} < {vsc_bound:.3f}; "
        f"R@1 caption {cap_r1:.2f} image {img_r1:.2f} >= 0.10; "
        f"grounding {grounding.accuracy:.3f} >= 3x chance {bar:.3f}; "
        f"params finite: {finite}; {sanity_run['elapsed']:.0f}s < 1800s",
    )


def test_criterion_8_rerank_consistency(sanity_run):
    trainer = sanity_run["trainer"]
    ts, vs = sanity_run["eval_seqs"]
    ids = [p.pair_id for p in sanity_run["eval_corpus"].pairs]
    n = 20
    full_rerank = retrieval_eval(trainer.model, ts[:n], vs[:n], ids[:n], k_caption=n, k_image=n)
    exhaustive = retrieval_eval_exhaustive(trainer.model, ts[:n], vs[:n], ids[:n])
    exact = (
        full_rerank.caption_recall == exhaustive.caption_recall
        and full_rerank.image_recall == exhaustive.image_recall
    )
    retrieval = sanity_run["retrieval"]
    improves = retrieval.rsum >= retrieval.coarse_rsum
    verdict(
        "8 rerank-consistency", exact and improves,
        f"full-depth rerank == exhaustive match ranking: {exact}; "
        f"k=16 RSUM {retrieval.rsum:.1f} >= coarse {retrieval.coarse_rsum:.1f}",
    )


# ---------------------------------------------------------------- criterion 9

def test_criterion_9_determinism_and_persistence(tmp_path):
    corpus = generate_corpus(CorpusConfig(seed=3, n_pairs=64))
    cfg = RunConfig(
        stage1=StageConfig(stage=1, epochs=2, batch_size=8, seed=1),
        stage2=StageConfig(stage=2, epochs=1, batch_size=8, seed=2),
        fp64=True,
        min_phrase_freq=1,
    )
    logs = []
    for run in range(2):
        trainer = Trainer(corpus, cfg)
        trainer.attach_metrics_file(tmp_path / f"metrics_{run}.jsonl")
        trainer.run_stage2(trainer.run_stage1())
        trainer.close()
        logs.append((tmp_path / f"metrics_{run}.jsonl").read_bytes())
    byte_identical = logs[0] == logs[1]

    straight = Trainer(corpus, cfg)
    straight.run_stage1()
    interrupted = Trainer(corpus, cfg)
    mid = interrupted.run_stage1(max_steps=6)
    save_checkpoint(tmp_path / "mid.ckpt", interrupted, mid)
    resumed, resumed_state = load_checkpoint(tmp_path / "mid.ckpt", corpus)
    resumed.resume_stage(resumed_state, max_steps=16)
    tail_match = json.dumps(resumed.metrics[:10]) == json.dumps(straight.metrics[6:16])
    verdict(
        "9 determinism-persistence", byte_identical and tail_match,
        f"metrics logs byte-identical: {byte_identical}; "
        f"10 post-resume steps match uninterrupted run: {tail_match}",
    )


# --------------------------------------------------------------- criterion 10

def test_criterion_10_ablation_smoke_matrix(tmp_path):
    train = generate_corpus(CorpusConfig(seed=13, n_pairs=400))
    evalc = generate_corpus(CorpusConfig(seed=13, n_pairs=40), start_pair_id=5000)
    rows = ablation_run(train, evalc, RunConfig(), TABLE_VARIANTS, max_steps_per_stage=100)
    report_path = tmp_path / "ablation.json"
    from vlalign.evaluation import write_report

    write_report(report_path, {"variants": rows})
    table = format_ablation_table(rows)
    ok = (
        len(rows) == 6
        and all(r["steps"] == 200 for r in rows)
        and all(np.isfinite(r["rsum"]) for r in rows)
        and all(
            r["grounding_accuracy"] is None or np.isfinite(r["grounding_accuracy"])
            for r in rows
        )
        and report_path.exists()
    )
    print()
    print(table)
    verdict(
        "10 ablation-smoke", ok,
        "six variants x 200 steps trained and evaluated; report at "
        + str(report_path.name),
    )
