"""Command-line interface.

Subcommands: gen-corpus, build-vocab, pretrain, evaluate, ground,
ablate, export-embeddings.  Set VLALIGN_FP64=1 to force 64-bit test
mode regardless of the run configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .corpus import CorpusConfig, generate_corpus, read_corpus, write_corpus
from .evaluation import (
    TABLE_VARIANTS,
    AblationVariant,
    ablation_run,
    format_ablation_table,
    grounding_eval,
    retrieval_eval,
    retrieval_eval_exhaustive,
    write_report,
)
from .inputs import build_vocabs, write_phrase_vocab, write_token_vocab
from .trainer import (
    RunConfig,
    Trainer,
    MergedTrainer,
    load_checkpoint,
    run_config_from_dict,
    run_config_to_dict,
    save_checkpoint,
)


def _add_gen_corpus(sub):
    p = sub.add_parser("gen-corpus", help="generate a synthetic image-text corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-pairs", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--start", type=int, default=0, help="first pair id (held-out splits share a seed)")
    p.add_argument("--n-categories", type=int, default=12)
    p.add_argument("--n-attributes", type=int, default=6)
    p.add_argument("--n-predicates", type=int, default=5)
    p.add_argument("--feat-dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--objects", type=int, nargs=2, default=(3, 7), metavar=("LO", "HI"))


def _cmd_gen_corpus(args) -> int:
    config = CorpusConfig(
        seed=args.seed,
        n_pairs=args.n_pairs,
        n_categories=args.n_categories,
        n_attributes=args.n_attributes,
        n_predicates=args.n_predicates,
        feat_dim=args.feat_dim,
        feature_noise_sigma=args.noise,
        objects_per_scene=tuple(args.objects),
    )
    corpus = generate_corpus(config, start_pair_id=args.start)
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.pairs)} pairs to {args.out}")
    return 0


def _cmd_build_vocab(args) -> int:
    corpus = read_corpus(args.corpus)
    token_vocab, phrase_vocab = build_vocabs(corpus, args.min_phrase_freq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_token_vocab(token_vocab, out / "tokens.tsv")
    write_phrase_vocab(phrase_vocab, out / "phrases.tsv")
    print(f"{len(token_vocab)} tokens, {len(phrase_vocab)} phrase concepts -> {out}")
    return 0


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as f:
        return run_config_from_dict(json.load(f))


def _cmd_pretrain(args) -> int:
    corpus = read_corpus(args.corpus)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer, state = load_checkpoint(args.resume, corpus)
    else:
        cfg = _load_run_config(args.config)
        trainer = MergedTrainer(corpus, cfg) if cfg.merged else Trainer(corpus, cfg)
        state = None
    with open(out / "run_config.json", "w", encoding="utf-8") as f:
        json.dump(run_config_to_dict(trainer.cfg), f, indent=2)
    trainer.attach_metrics_file(out / "metrics.jsonl")
    try:
        if args.stage == "1":
            state = trainer.resume_stage(state) if state is not None else trainer.run_stage1()
        elif args.stage == "2":
            state = trainer.run_stage2(state)
        elif args.stage == "both":
            if state is None:
                state = trainer.run_stage1()
                save_checkpoint(out / "stage1.ckpt", trainer, state)
            elif state.stage == 1:
                state = trainer.resume_stage(state)
                save_checkpoint(out / "stage1.ckpt", trainer, state)
            state = trainer.run_stage2(state)
        elif args.stage == "retrieval-ft":
            state = trainer.run_retrieval_finetune(state)
    finally:
        trainer.close()
    save_checkpoint(out / "final.ckpt", trainer, state)
    means = state.running_means()
    summary = ", ".join(f"{k}={v:.4f}" for k, v in sorted(means.items()))
    print(f"finished stage={args.stage} at step {state.global_step} ({summary})")
    print(f"checkpoint: {out / 'final.ckpt'}")
    return 0


def _cmd_evaluate(args) -> int:
    corpus = read_corpus(args.corpus)
    trainer, _ = load_checkpoint(args.checkpoint, corpus)
    ids = [p.pair_id for p in corpus.pairs]
    if trainer.cfg.merged:
        report = retrieval_eval_exhaustive(trainer.model, trainer.text_seqs, trainer.vis_seqs, ids)
    else:
        report = retrieval_eval(
            trainer.model, trainer.text_seqs, trainer.vis_seqs, ids,
            k_caption=args.kc, k_image=args.ki,
        )
    payload = report.to_dict()
    if args.report:
        write_report(args.report, payload)
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_ground(args) -> int:
    corpus = read_corpus(args.corpus)
    trainer, _ = load_checkpoint(args.checkpoint, corpus)
    report = grounding_eval(trainer.model, corpus.pairs, trainer.text_seqs, trainer.vis_seqs, args.mode)
    payload = report.to_dict()
    if args.report:
        write_report(args.report, payload)
    print(
        f"grounding mode={report.mode} accuracy={report.accuracy:.4f} "
        f"chance={report.chance:.4f} phrases={report.n_phrases}"
    )
    return 0


def _parse_matrix(path: str | None) -> tuple[AblationVariant, ...]:
    if path is None:
        return TABLE_VARIANTS
    with open(path, "r", encoding="utf-8") as f:
        rows = json.load(f)
    return tuple(
        AblationVariant(
            name=r["name"],
            use_phrases=r.get("use_phrases", True),
            use_tags=r.get("use_tags", True),
            losses=tuple(r.get("losses", list(AblationVariant.__dataclass_fields__["losses"].default))),
            merged=r.get("merged", False),
        )
        for r in rows
    )


def _cmd_ablate(args) -> int:
    train_corpus = read_corpus(args.corpus)
    eval_corpus = read_corpus(args.eval_corpus)
    cfg = _load_run_config(args.config)
    variants = _parse_matrix(args.matrix)
    rows = ablation_run(
        train_corpus, eval_corpus, cfg, variants, max_steps_per_stage=args.steps
    )
    if args.out:
        write_report(args.out, {"variants": rows})
    print(format_ablation_table(rows))
    return 0


def _cmd_export_embeddings(args) -> int:
    corpus = read_corpus(args.corpus)
    trainer, _ = load_checkpoint(args.checkpoint, corpus)
    model = trainer.model
    if trainer.cfg.merged:
        print("the merged variant has no global embeddings to export", file=sys.stderr)
        return 2
    from .evaluation import global_embedding_index

    text_g, vis_g = global_embedding_index(model, trainer.text_seqs, trainer.vis_seqs)
    table = model.params["emb.word"].data
    with open(args.out, "w", encoding="utf-8") as f:
        for pair, tg, vg in zip(corpus.pairs, text_g, vis_g):
            f.write(json.dumps({
                "kind": "pair",
                "pair_id": pair.pair_id,
                "text_embedding": tg.tolist(),
                "image_embedding": vg.tolist(),
            }) + "\n")
        for surface, cid in sorted(trainer.phrase_vocab.phrase_to_id.items()):
            f.write(json.dumps({
                "kind": "phrase_concept",
                "surface": " ".join(surface),
                "embedding": table[cid].tolist(),
            }) + "\n")
        for tid in trainer.token_vocab.tag_token_ids:
            f.write(json.dumps({
                "kind": "tag_concept",
                "surface": trainer.token_vocab.id_to_token[tid],
                "embedding": table[tid].tolist(),
            }) + "\n")
    print(f"wrote embeddings for {len(corpus.pairs)} pairs to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    _add_gen_corpus(sub)

    p = sub.add_parser("build-vocab", help="build token and phrase vocabularies")
    p.add_argument("--corpus", required=True)
    p.add_argument("--min-phrase-freq", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="run one or both training stages")
    p.add_argument("--corpus", required=True)
    p.add_argument("--stage", choices=["1", "2", "both", "retrieval-ft"], default="both")
    p.add_argument("--config", default=None, help="JSON run configuration (defaults if omitted)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("evaluate", help="retrieval evaluation with reranking")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="held-out evaluation corpus")
    p.add_argument("--kc", type=int, default=16, help="rerank depth for caption retrieval")
    p.add_argument("--ki", type=int, default=16, help="rerank depth for image retrieval")
    p.add_argument("--report", default=None)

    p = sub.add_parser("ground", help="phrase grounding evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=["token", "concept"], default="concept")
    p.add_argument("--report", default=None)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    p.add_argument("--corpus", required=True)
    p.add_argument("--eval-corpus", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--matrix", default=None, help="JSON variant list (default: the built-in six)")
    p.add_argument("--steps", type=int, default=None, help="max optimizer steps per stage")
    p.add_argument("--out", default=None)

    p = sub.add_parser("export-embeddings", help="dump global and concept embeddings as JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    return parser


_COMMANDS = {
    "gen-corpus": _cmd_gen_corpus,
    "build-vocab": _cmd_build_vocab,
    "pretrain": _cmd_pretrain,
    "evaluate": _cmd_evaluate,
    "ground": _cmd_ground,
    "ablate": _cmd_ablate,
    "export-embeddings": _cmd_export_embeddings,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
