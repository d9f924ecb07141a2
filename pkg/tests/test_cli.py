"""End-to-end CLI pipeline in a temp directory."""

import json

import numpy as np
import pytest

from vlalign.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    common = [
        "--n-categories", "6", "--n-attributes", "4", "--n-predicates", "3",
        "--feat-dim", "8", "--objects", "2", "4",
    ]
    assert main(["gen-corpus", "--seed", "5", "--n-pairs", "40", "--out", str(root / "train.jsonl"), *common]) == 0
    assert main(["gen-corpus", "--seed", "5", "--n-pairs", "10", "--start", "1000", "--out", str(root / "eval.jsonl"), *common]) == 0
    cfg = {
        "model": {"hidden": 16, "heads": 2, "ff": 32, "feat_dim": 8, "max_positions": 64},
        "stage1": {"epochs": 1, "batch_size": 8, "seed": 1},
        "stage2": {"epochs": 1, "batch_size": 8, "seed": 2},
        "min_phrase_freq": 1,
        "fp64": True,
    }
    (root / "config.json").write_text(json.dumps(cfg))
    return root


def test_gen_corpus_deterministic(workdir, tmp_path):
    args = [
        "gen-corpus", "--seed", "5", "--n-pairs", "40", "--out", str(tmp_path / "again.jsonl"),
        "--n-categories", "6", "--n-attributes", "4", "--n-predicates", "3",
        "--feat-dim", "8", "--objects", "2", "4",
    ]
    assert main(args) == 0
    assert (tmp_path / "again.jsonl").read_bytes() == (workdir / "train.jsonl").read_bytes()


def test_build_vocab_writes_tsv_files(workdir):
    out = workdir / "vocab"
    assert main(["build-vocab", "--corpus", str(workdir / "train.jsonl"), "--min-phrase-freq", "1", "--out", str(out)]) == 0
    tokens = (out / "tokens.tsv").read_text().splitlines()
    assert tokens[0].split("\t")[:2] == ["0", "[CLS]"]
    phrases = (out / "phrases.tsv").read_text().splitlines()
    assert len(phrases) > 0 and len(phrases[0].split("\t")) == 4


def test_pretrain_both_stages(workdir):
    out = workdir / "run"
    assert main([
        "pretrain", "--corpus", str(workdir / "train.jsonl"), "--stage", "both",
        "--config", str(workdir / "config.json"), "--out-dir", str(out),
    ]) == 0
    assert (out / "final.ckpt").exists() and (out / "stage1.ckpt").exists()
    metrics = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert metrics[0]["stage"] == 1 and metrics[-1]["stage"] == 2
    assert all(np.isfinite(m["total"]) for m in metrics)
    assert json.loads((out / "run_config.json").read_text())["fp64"] is True


def test_evaluate_writes_report(workdir):
    report_path = workdir / "retrieval.json"
    assert main([
        "evaluate", "--checkpoint", str(workdir / "run" / "final.ckpt"),
        "--corpus", str(workdir / "eval.jsonl"), "--kc", "4", "--ki", "4",
        "--report", str(report_path),
    ]) == 0
    report = json.loads(report_path.read_text())
    assert set(report["caption_recall"]) == {"1", "5", "10"}
    assert report["rsum"] == pytest.approx(
        100 * (sum(report["caption_recall"].values()) + sum(report["image_recall"].values()))
    )


def test_ground_both_modes(workdir):
    for mode in ("concept", "token"):
        report_path = workdir / f"ground_{mode}.json"
        assert main([
            "ground", "--checkpoint", str(workdir / "run" / "final.ckpt"),
            "--corpus", str(workdir / "eval.jsonl"), "--mode", mode,
            "--report", str(report_path),
        ]) == 0
        report = json.loads(report_path.read_text())
        assert report["mode"] == mode and 0.0 <= report["accuracy"] <= 1.0


def test_resume_from_stage1_checkpoint(workdir):
    out = workdir / "run2"
    assert main([
        "pretrain", "--corpus", str(workdir / "train.jsonl"), "--stage", "2",
        "--resume", str(workdir / "run" / "stage1.ckpt"), "--out-dir", str(out),
    ]) == 0
    straight = [json.loads(l) for l in (workdir / "run" / "metrics.jsonl").read_text().splitlines()]
    resumed = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    stage2 = [m for m in straight if m["stage"] == 2]
    assert resumed == stage2


def test_retrieval_finetune_mode(workdir):
    out = workdir / "run_ft"
    assert main([
        "pretrain", "--corpus", str(workdir / "train.jsonl"), "--stage", "retrieval-ft",
        "--resume", str(workdir / "run" / "final.ckpt"), "--out-dir", str(out),
    ]) == 0
    metrics = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    rec = metrics[-1]["losses"]
    assert rec["contrastive"] is not None and rec["match"] is not None
    assert rec["masked_token"] is None and rec["grounding"] is None


def test_export_embeddings(workdir):
    out = workdir / "embeddings.jsonl"
    assert main([
        "export-embeddings", "--checkpoint", str(workdir / "run" / "final.ckpt"),
        "--corpus", str(workdir / "eval.jsonl"), "--out", str(out),
    ]) == 0
    records = [json.loads(l) for l in out.read_text().splitlines()]
    kinds = {r["kind"] for r in records}
    assert kinds == {"pair", "phrase_concept", "tag_concept"}
    pair_recs = [r for r in records if r["kind"] == "pair"]
    assert len(pair_recs) == 10
    emb = np.array(pair_recs[0]["text_embedding"])
    assert abs(np.sqrt((emb**2).sum()) - 1.0) < 1e-9


def test_ablate_with_custom_matrix(workdir):
    matrix = workdir / "matrix.json"
    matrix.write_text(json.dumps([
        {"name": "full"},
        {"name": "no_tags", "use_tags": False},
    ]))
    out = workdir / "ablation.json"
    assert main([
        "ablate", "--corpus", str(workdir / "train.jsonl"),
        "--eval-corpus", str(workdir / "eval.jsonl"),
        "--config", str(workdir / "config.json"),
        "--matrix", str(matrix), "--steps", "2", "--out", str(out),
    ]) == 0
    rows = json.loads(out.read_text())["variants"]
    assert [r["variant"] for r in rows] == ["full", "no_tags"]
    assert all(np.isfinite(r["rsum"]) for r in rows)
