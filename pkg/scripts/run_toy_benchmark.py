#!/usr/bin/env python3
"""End-to-end toy-language benchmark.

Generates a multilingual toy corpus (one stage-1 language, four training
languages with distinct grammars, five held-out test languages), discovers
per-language head subnetworks by importance pruning, trains the six model
variants (Full / static / dynamic masks, non-episodic and meta), runs
few-shot evaluation on the held-out languages with typology-based and random
mask selection, and writes the full CSV report bundle.

Usage:
    python3 scripts/run_toy_benchmark.py --out runs/toy [--quick] [--seeds 3]
"""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from subnetparse.analysis import (ConflictTrace, ExperimentResults,
                                  conflict_stats, count_rare_unseen,
                                  emit_report)
from subnetparse.encoder import EncoderConfig
from subnetparse.parser import build_parser_model, evaluate, predict, save_model
from subnetparse.subnet import SoftMask, iterative_prune, save_mask, union_masks
from subnetparse.training import (FewshotConfig, MetaConfig, TrainConfig,
                                  fewshot_eval, meta_train,
                                  pick_random_transfer_language,
                                  select_transfer_language, train_stage1,
                                  train_stage2, write_trace)
from subnetparse.treebank import (LanguageMeta, ToyGrammarSpec,
                                  build_label_vocab, build_word_vocab,
                                  gen_toy_treebank, toy_typo_vector,
                                  write_conllu, write_language_vectors)

TRAIN_SPECS = {
    "la": ToyGrammarSpec(word_order="SVO", adposition="pre", vocab_seed=1),
    "lb": ToyGrammarSpec(word_order="SVO", adposition="pre", vocab_seed=2),
    "lc": ToyGrammarSpec(word_order="SOV", adposition="post", vocab_seed=3),
    "ld": ToyGrammarSpec(word_order="VSO", adposition="pre", vocab_seed=4),
}
STAGE1_SPEC = ToyGrammarSpec(word_order="SVO", adposition="pre", vocab_seed=5)
HELDOUT_SPECS = {
    "h1": ToyGrammarSpec(word_order="SVO", adposition="pre", vocab_seed=11),
    "h2": ToyGrammarSpec(word_order="SOV", adposition="post", vocab_seed=12),
    "h3": ToyGrammarSpec(word_order="VSO", adposition="pre", vocab_seed=13),
    "h4": ToyGrammarSpec(word_order="SOV", adposition="post", vocab_seed=14),
    "h5": ToyGrammarSpec(word_order="SVO", adposition="pre", vocab_seed=15),
}

VARIANTS = [("nonep", "none"), ("nonep", "static"), ("nonep", "dynamic"),
            ("meta", "none"), ("meta", "static"), ("meta", "dynamic")]


def log(msg):
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seeds", type=int, default=3, help="training seeds")
    ap.add_argument("--quick", action="store_true",
                    help="tiny sizes for a fast smoke run")
    args = ap.parse_args()

    if args.quick:
        n_train, n_dev, n_stage1, n_test = 80, 20, 60, 30
        stage1_epochs, prune_epochs, prune_seeds = 4, 4, (0,)
        iterations, episodes, inner_steps = 20, 15, 2
        fewshot_seeds = (0, 1)
    else:
        n_train, n_dev, n_stage1, n_test = 500, 60, 300, 50
        stage1_epochs, prune_epochs, prune_seeds = 20, 24, (0, 1)
        iterations, episodes, inner_steps = 150, 150, 4
        fewshot_seeds = (0, 1, 2, 3, 4)

    out = args.out
    datadir = os.path.join(out, "data")
    maskdir = os.path.join(out, "masks")
    ckptdir = os.path.join(out, "ckpts")
    fragdir = os.path.join(out, "fragments")
    for d in (datadir, maskdir, ckptdir, fragdir):
        os.makedirs(d, exist_ok=True)

    log("generating toy corpora")
    train, dev, heldout = {}, {}, {}
    for i, (code, spec) in enumerate(sorted(TRAIN_SPECS.items())):
        train[code] = gen_toy_treebank(spec, n_train, seed=100 + i, language=code)
        dev[code] = gen_toy_treebank(spec, n_dev, seed=200 + i, language=code,
                                     split="dev")
        write_conllu(train[code], os.path.join(datadir, f"{code}.train.conllu"))
        write_conllu(dev[code], os.path.join(datadir, f"{code}.dev.conllu"))
    stage1_tb = gen_toy_treebank(STAGE1_SPEC, n_stage1, seed=300, language="le")
    write_conllu(stage1_tb, os.path.join(datadir, "le.train.conllu"))
    for i, (code, spec) in enumerate(sorted(HELDOUT_SPECS.items())):
        heldout[code] = gen_toy_treebank(spec, n_test, seed=400 + i,
                                         language=code, split="test")
        write_conllu(heldout[code], os.path.join(datadir, f"{code}.test.conllu"))

    metas = {code: LanguageMeta(code, toy_typo_vector(spec))
             for code, spec in {**TRAIN_SPECS, **HELDOUT_SPECS}.items()}
    write_language_vectors(os.path.join(out, "vectors.csv"), metas)

    log("building vocab and training the stage-1 model")
    banks = ([stage1_tb] + [train[c] for c in sorted(train)]
             + [heldout[c] for c in sorted(heldout)])
    wv, lv = build_word_vocab(banks), build_label_vocab(banks)
    enc = EncoderConfig(vocab_size=wv.size, n_layers=3, n_heads=4, d_model=32,
                        d_ff=48, max_len=32, seed=0)
    base = build_parser_model(enc, wv, lv, arc_hidden=48, tag_hidden=24)
    train_stage1(base, stage1_tb, TrainConfig(
        stage1_epochs=stage1_epochs, per_language_batch=16,
        stage1_encoder_lr=1e-3, stage1_classifier_lr=3e-3, seed=0))
    save_model(os.path.join(ckptdir, "stage1.ckpt"), base)

    log("discovering per-language subnetworks (iterative pruning + seed union)")
    masks = {}
    for code in sorted(train):
        per_seed = []
        for s in prune_seeds:
            m, tr = iterative_prune(
                code, list(train[code].sentences), list(dev[code].sentences),
                base, stop_ratio=0.95, seed=s, finetune_epochs=prune_epochs,
                batch_size=16, encoder_lr=1e-3, classifier_lr=3e-3,
                importance_sample=80)
            per_seed.append(m)
        masks[code] = union_masks(per_seed)
        save_mask(os.path.join(maskdir, f"{code}.mask.json"), masks[code],
                  provenance={"seeds": list(prune_seeds), "prune_rate": 0.10,
                              "stop_ratio": 0.95})
        log(f"  {code}: {masks[code].n_disabled}/12 heads disabled")

    results = ExperimentResults()
    models = {}
    for framework, kind in VARIANTS:
        for seed in range(args.seeds):
            tag = f"{framework}-{kind}-s{seed}"
            model = base.clone()
            if kind == "none":
                run_masks = None
            elif kind == "static":
                run_masks = dict(masks)
            else:
                run_masks = {c: SoftMask.from_static(m) for c, m in masks.items()}
            t0 = time.time()
            if framework == "nonep":
                cfg = TrainConfig(stage2_iterations=iterations,
                                  per_language_batch=8, encoder_lr=3e-4,
                                  classifier_lr=3e-3, seed=seed)
                model, trace = train_stage2(model, train, run_masks, cfg)
            else:
                mcfg = MetaConfig(episodes=episodes, n_support=8,
                                  inner_steps=inner_steps,
                                  inner_encoder_lr=3e-3, inner_classifier_lr=1e-2,
                                  outer_encoder_lr=3e-4, outer_classifier_lr=3e-3,
                                  seed=seed)
                model, trace = meta_train(model, train, run_masks, mcfg)
            write_trace(trace, os.path.join(ckptdir, f"{tag}.trace.csv"))
            save_model(os.path.join(ckptdir, f"{tag}.ckpt"), model)
            models[(framework, kind, seed)] = model
            window = min(50, len(trace))
            rep = conflict_stats(ConflictTrace.from_cosine_iterations(
                trace.cosine_iterations(), window))
            results.conflict_rows.append({
                "framework": framework, "method": kind, "seed": seed,
                "conflict_pct": rep.conflict_pct, "mean_cosine": rep.mean_cosine,
                "window": window})
            log(f"  {tag}: conflicts {rep.conflict_pct:.1f}% "
                f"mean cos {rep.mean_cosine:.3f} [{time.time()-t0:.0f}s]")

    log("few-shot evaluation on held-out languages")
    train_metas = [metas[c] for c in sorted(TRAIN_SPECS)]
    for code in sorted(heldout):
        auto_lang = select_transfer_language(metas[code], train_metas).code
        for framework, kind in VARIANTS:
            model = models[(framework, kind, 0)]
            mask = None if kind == "none" else masks[auto_lang]
            cfg = (FewshotConfig(optimizer="sgd", encoder_lr=3e-3,
                                 classifier_lr=1e-2, weight_decay=0.0)
                   if framework == "meta" else
                   FewshotConfig(encoder_lr=1e-3, classifier_lr=3e-3))
            rows, mean_las = fewshot_eval(model, heldout[code], mask, shots=20,
                                          steps=20, config=cfg,
                                          seeds=fewshot_seeds)
            for r in rows:
                results.las_rows.append({
                    "test_lang": code, "method": kind, "framework": framework,
                    "seed": r["seed"], "las": r["las"], "uas": r["uas"]})
            log(f"  {code} {framework}-{kind} (mask {auto_lang if mask else '-'}):"
                f" mean LAS {mean_las:.1f}")

    log("typology-based vs random mask selection (static non-episodic model)")
    model = models[("nonep", "static", 0)]
    cfg = FewshotConfig(encoder_lr=1e-3, classifier_lr=3e-3)
    auto_wins = 0
    for code in sorted(heldout):
        auto_lang = select_transfer_language(metas[code], train_metas).code
        _, auto_las = fewshot_eval(model, heldout[code], masks[auto_lang],
                                   shots=20, steps=20, config=cfg,
                                   seeds=fewshot_seeds)
        rnd_las = []
        for pick_seed in range(3):
            lang = pick_random_transfer_language(train_metas, pick_seed).code
            _, mean_las = fewshot_eval(model, heldout[code], masks[lang],
                                       shots=20, steps=20, config=cfg,
                                       seeds=fewshot_seeds)
            rnd_las.append(mean_las)
        rnd = float(np.mean(rnd_las))
        auto_wins += auto_las > rnd
        log(f"  {code}: auto({auto_lang}) {auto_las:.1f} vs random {rnd:.1f}")
    log(f"  typology selection better on {auto_wins}/{len(heldout)} languages")

    log("rare/unseen label accounting on the held-out languages")
    train_vocab = build_label_vocab([train[c] for c in sorted(train)])
    for framework, kind in VARIANTS:
        model = models[(framework, kind, 0)]
        trees, gold = [], []
        for code in sorted(heldout):
            sents = list(heldout[code].sentences)
            trees += predict(model, sents)
            gold += sents
        counts = count_rare_unseen(trees, gold, train_vocab, lv)
        for cat, c in counts.items():
            results.rare_unseen_rows.append({
                "framework": framework, "method": kind, "category": cat,
                "correct": c.correct, "total": c.total, "pct": c.pct,
                "n_labels": len(c.labels_correct),
                "n_languages": len(c.languages_correct)})

    log("writing the report bundle")
    written = emit_report(results, os.path.join(out, "report"))
    for path in written:
        log(f"  wrote {path}")
    log("done")


if __name__ == "__main__":
    main()
