"""Command-line entry point.

Subcommands: prune (discover a language subnetwork), train (non-episodic or
meta, with optional masks), fewshot (test-time adaptation), ablate (mask
ablations and unstructured pruning), analyze (conflict statistics from a run
trace), report (aggregate result fragments into the CSV report bundle).

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 internal error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

from . import analysis, subnet
from .config import Resolver, load_keyvalue
from .encoder import EncoderConfig
from .errors import SubnetParseError, UsageError
from .optim import stable_seed
from .parser import build_parser_model, load_model, save_model
from .subnet import HeadMask, SoftMask, load_mask, save_mask
from .training import (FewshotConfig, MetaConfig, TrainConfig, default_meta_lrs,
                       fewshot_eval, meta_train, pick_random_transfer_language,
                       read_trace, select_transfer_language, train_stage1,
                       train_stage2, write_trace)
from .treebank import (build_label_vocab, build_word_vocab,
                       load_language_vectors, read_conllu)


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


MODEL_KEYS = {"n_layers", "n_heads", "d_model", "d_ff", "max_len",
              "arc_hidden", "tag_hidden"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
META_KEYS = {f.name for f in fields(MetaConfig)}
MASK_KEYS = {"keep_fraction", "init_value"}
ALL_CONFIG_KEYS = MODEL_KEYS | TRAIN_KEYS | META_KEYS | MASK_KEYS | {
    "mode", "masks", "langs", "maskdir", "data", "stage1_train", "rate",
    "stop", "seeds", "shots", "steps", "finetune_epochs", "window", "kind"}


def _load_config(path: str | None) -> dict[str, str]:
    return load_keyvalue(path) if path else {}


def _resolver(args, config: dict[str, str]) -> Resolver:
    return Resolver(vars(args), config, ALL_CONFIG_KEYS)


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"missing required option {flag}")
    return value


def _read_split(data_dir: str, lang: str, split: str, required: bool = True):
    path = os.path.join(data_dir, f"{lang}.{split}.conllu")
    if not os.path.exists(path):
        if required:
            raise UsageError(f"missing treebank file {path} for language {lang}")
        return None
    return read_conllu(path, lang, split)


def _train_config(r: Resolver, seed: int) -> TrainConfig:
    return TrainConfig(
        stage1_epochs=r.get("stage1_epochs", 60),
        stage2_iterations=r.get("stage2_iterations", 1000),
        per_language_batch=r.get("per_language_batch", 20),
        encoder_lr=r.get("encoder_lr", 1e-4),
        classifier_lr=r.get("classifier_lr", 1e-3),
        stage1_encoder_lr=r.get("stage1_encoder_lr", 5e-5),
        stage1_classifier_lr=r.get("stage1_classifier_lr", 1e-3),
        weight_decay=r.get("weight_decay", 0.01),
        warmup_fraction=r.get("warmup_fraction", 0.10),
        gradual_unfreeze_first_epoch=r.get("gradual_unfreeze_first_epoch", True),
        seed=seed)


def _meta_config(r: Resolver, seed: int, mask_kind: str) -> MetaConfig:
    inner_defaults = default_meta_lrs(mask_kind)
    return MetaConfig(
        episodes=r.get("episodes", 500),
        n_support=r.get("n_support", 20),
        inner_steps=r.get("inner_steps", 20),
        inner_encoder_lr=r.get("inner_encoder_lr", inner_defaults["inner_encoder_lr"]),
        inner_classifier_lr=r.get("inner_classifier_lr",
                                  inner_defaults["inner_classifier_lr"]),
        outer_encoder_lr=r.get("outer_encoder_lr", 1e-4),
        outer_classifier_lr=r.get("outer_classifier_lr", 1e-3),
        outer_optimizer=r.get("outer_optimizer", "adam"),
        weight_decay=r.get("weight_decay", 0.01),
        warmup_fraction=r.get("warmup_fraction", 0.10),
        seed=seed)


def _build_fresh_model(r: Resolver, treebanks, seed: int):
    word_vocab = build_word_vocab(treebanks)
    label_vocab = build_label_vocab(treebanks)
    enc_cfg = EncoderConfig(
        vocab_size=word_vocab.size,
        n_layers=r.get("n_layers", 12),
        n_heads=r.get("n_heads", 12),
        d_model=r.get("d_model", 96),
        d_ff=r.get("d_ff", 192),
        max_len=r.get("max_len", 64),
        seed=seed)
    return build_parser_model(enc_cfg, word_vocab, label_vocab,
                              arc_hidden=r.get("arc_hidden", 768),
                              tag_hidden=r.get("tag_hidden", 256))


def _load_masks(langs, maskdir: str, kind: str, r: Resolver):
    masks = {}
    for lang in langs:
        path = os.path.join(maskdir, f"{lang}.mask.json")
        if not os.path.exists(path):
            raise UsageError(f"missing mask file for language {lang}: {path}")
        m = load_mask(path)
        if kind == "dynamic" and isinstance(m, HeadMask):
            m = SoftMask.from_static(m, keep_fraction=r.get("keep_fraction", 0.8),
                                     init_value=r.get("init_value", 0.01))
        elif kind == "static" and isinstance(m, SoftMask):
            m = subnet.binarize(m)
        masks[lang] = m
    return masks


# ---------------------------------------------------------------------------
# Subcommands


def cmd_prune(args) -> int:
    r = _resolver(args, _load_config(args.config))
    lang = _require(args.lang, "--lang")
    train_path = _require(args.train, "--train")
    dev_path = _require(args.dev, "--dev")
    ckpt = _require(args.ckpt, "--ckpt")
    out = _require(args.out, "--out")
    n_seeds = r.get("seeds", 4)
    rate = r.get("rate", 0.10)
    stop = r.get("stop", 0.95)
    finetune_epochs = r.get("finetune_epochs", 5)

    model, _ = load_model(ckpt)
    train_tb = read_conllu(train_path, lang, "train")
    dev_tb = read_conllu(dev_path, lang, "dev")

    per_seed = []
    provenance_las = {}
    for s in range(n_seeds):
        mask, trace = subnet.iterative_prune(
            lang, list(train_tb.sentences), list(dev_tb.sentences), model,
            prune_rate=rate, stop_ratio=stop, seed=s,
            finetune_epochs=finetune_epochs,
            batch_size=r.get("per_language_batch", 20))
        per_seed.append(mask)
        accepted = [it.dev_las for it in trace.iterations if it.accepted]
        provenance_las[str(s)] = {
            "original_dev_las": trace.original_las,
            "final_dev_las": accepted[-1] if accepted else trace.original_las,
            "n_disabled": mask.n_disabled}
    union = subnet.union_masks(per_seed)
    save_mask(out, union, provenance={
        "seeds": list(range(n_seeds)), "prune_rate": rate, "stop_ratio": stop,
        "per_seed": provenance_las, "n_disabled": union.n_disabled})
    print(f"wrote {out}: {union.n_disabled} heads disabled "
          f"(union over {n_seeds} seeds)")
    return 0


def _run_training(args, ablation_masks=None, ablation_kind: str | None = None) -> int:
    r = _resolver(args, _load_config(args.config))
    mode = _require(args.mode, "--mode")
    masks_flag = args.masks if args.masks is not None else r.get("masks", "none")
    if mode not in ("nonep", "meta"):
        raise UsageError("--mode must be nonep or meta")
    if masks_flag not in ("none", "static", "dynamic"):
        raise UsageError("--masks must be none, static, or dynamic")
    out = _require(args.out, "--out")
    langs = _require(args.langs, "--langs").split(",")
    data_dir = _require(args.data, "--data")
    seed = r.get("seed", 0)

    treebanks = {lang: _read_split(data_dir, lang, "train") for lang in langs}

    if args.ckpt:
        model, _ = load_model(args.ckpt)
    else:
        stage1_path = _require(args.stage1_train, "--stage1-train (or --ckpt)")
        stage1_tb = read_conllu(stage1_path, "stage1", "train")
        vocab_banks = [stage1_tb] + [treebanks[l] for l in langs]
        model = _build_fresh_model(r, vocab_banks, seed)
        cfg = _train_config(r, seed)
        train_stage1(model, stage1_tb, cfg)

    if ablation_masks is not None:
        masks = ablation_masks
        mask_kind = ablation_kind
    elif masks_flag == "none":
        masks = None
        mask_kind = "none"
    else:
        maskdir = _require(args.maskdir, "--maskdir")
        masks = _load_masks(langs, maskdir, masks_flag, r)
        mask_kind = masks_flag

    if mode == "nonep":
        cfg = _train_config(r, seed)
        model, trace = train_stage2(model, treebanks, masks, cfg)
    else:
        mcfg = _meta_config(r, seed, mask_kind)
        model, trace = meta_train(model, treebanks, masks, mcfg)

    save_model(out, model)
    write_trace(trace, out + ".trace.csv")
    # persist final masks next to the checkpoint so few-shot runs can use them
    if masks is not None:
        for lang, m in masks.items():
            if isinstance(m, (HeadMask, SoftMask)):
                save_mask(f"{out}.{lang}.mask.json", m,
                          provenance={"stage": "final", "kind": mask_kind,
                                      "ablation": ablation_kind or "none"})
    tag = ablation_kind or "none"
    print(f"wrote {out} and {out}.trace.csv "
          f"(mode={mode}, masks={mask_kind}, ablation={tag})")
    return 0


def cmd_train(args) -> int:
    return _run_training(args)


def cmd_ablate(args) -> int:
    kind = _require(args.kind, "--kind")
    r = _resolver(args, _load_config(args.config))
    langs = _require(args.langs, "--langs").split(",")
    seed = r.get("seed", 0)

    if kind == "magnitude":
        if args.mode != "nonep":
            raise UsageError("magnitude-pruned masks are only supported with --mode nonep")
        data_dir = _require(args.data, "--data")
        ckpt = _require(args.ckpt, "--ckpt")
        model, _ = load_model(ckpt)
        masks = {}
        for lang in langs:
            train_tb = _read_split(data_dir, lang, "train")
            dev_tb = _read_split(data_dir, lang, "dev")
            pmask, _ = subnet.magnitude_prune(
                lang, list(train_tb.sentences), list(dev_tb.sentences), model,
                rate=r.get("rate", 0.10), stop_ratio=r.get("stop", 0.95),
                seed=seed, finetune_epochs=r.get("finetune_epochs", 5),
                batch_size=r.get("per_language_batch", 20))
            masks[lang] = pmask
        return _run_training(args, ablation_masks=masks, ablation_kind="magnitude")

    n = None
    base_kind = kind
    if ":" in kind:
        base_kind, n_str = kind.split(":", 1)
        n = int(n_str)
    if base_kind not in ("shuffle", "random", "bad", "dr20"):
        raise UsageError(f"unknown ablation kind {kind!r}")

    maskdir = _require(args.maskdir, "--maskdir")
    masks = {}
    for lang in langs:
        path = os.path.join(maskdir, f"{lang}.mask.json")
        if not os.path.exists(path):
            raise UsageError(f"missing reference mask for language {lang}: {path}")
        reference = load_mask(path)
        if isinstance(reference, SoftMask):
            reference = subnet.binarize(reference)
        if base_kind == "shuffle":
            masks[lang] = subnet.make_ablation_mask("shuffle", reference,
                                                    seed=stable_seed(seed, lang))
        elif base_kind == "random":
            masks[lang] = subnet.make_ablation_mask("random_n", reference,
                                                    seed=stable_seed(seed, lang), n=n)
        elif base_kind == "bad":
            masks[lang] = subnet.make_ablation_mask("bad", reference,
                                                    seed=stable_seed(seed, lang), n=n)
        else:  # dr20: dynamic training from a randomly initialised subnetwork
            masks[lang] = subnet.make_ablation_mask(
                "random_init_dynamic", reference,
                seed=stable_seed(seed, lang),
                keep_fraction=r.get("keep_fraction", 0.8),
                init_value=r.get("init_value", 0.01))
    return _run_training(args, ablation_masks=masks, ablation_kind=kind)


def cmd_fewshot(args) -> int:
    r = _resolver(args, _load_config(args.config))
    ckpt = _require(args.ckpt, "--ckpt")
    test_path = _require(args.test, "--test")
    out = _require(args.out, "--out")
    mask_arg = args.mask if args.mask is not None else "auto"
    shots = r.get("shots", 20)
    steps = r.get("steps", 20)
    n_seeds = r.get("seeds", 5)
    seed = r.get("seed", 0)
    test_lang = args.test_lang or os.path.basename(test_path).split(".")[0]

    model, _ = load_model(ckpt)
    test_tb = read_conllu(test_path, test_lang, "test")
    dev_tb = read_conllu(args.dev, test_lang, "dev") if args.dev else None

    mask_source = "none"
    if mask_arg == "auto" or mask_arg == "random":
        vectors = _require(args.vectors, "--vectors")
        maskdir = _require(args.maskdir, "--maskdir")
        metas = load_language_vectors(vectors)
        if test_lang not in metas:
            raise UsageError(f"language {test_lang} not in {vectors}")
        train_metas = []
        for code, meta in sorted(metas.items()):
            if code == test_lang:
                continue
            path = os.path.join(maskdir, f"{code}.mask.json")
            if os.path.exists(path):
                meta.mask_path = path
                train_metas.append(meta)
        if not train_metas:
            raise UsageError(f"no masks found under {maskdir}")
        if mask_arg == "auto":
            chosen = select_transfer_language(metas[test_lang], train_metas)
        else:
            chosen = pick_random_transfer_language(train_metas, seed)
        mask = load_mask(chosen.mask_path)
        mask_source = chosen.code
    else:
        mask = load_mask(mask_arg)
        mask_source = os.path.basename(mask_arg)
    if isinstance(mask, SoftMask):
        mask = subnet.binarize(mask)

    framework = args.framework or "nonep"
    fs_config = FewshotConfig.for_framework(framework)
    if args.encoder_lr is not None or args.classifier_lr is not None:
        fs_config = FewshotConfig(
            optimizer=fs_config.optimizer,
            encoder_lr=args.encoder_lr or fs_config.encoder_lr,
            classifier_lr=args.classifier_lr or fs_config.classifier_lr,
            weight_decay=fs_config.weight_decay)
    rows, mean_las = fewshot_eval(
        model, test_tb, mask, shots=shots, steps=steps, config=fs_config,
        seeds=tuple(range(n_seeds)), dev_treebank=dev_tb)
    with open(out, "w", encoding="utf-8") as f:
        f.write("test_lang,mask_source,seed,las,uas\n")
        for row in rows:
            f.write(f"{test_lang},{mask_source},{row['seed']},"
                    f"{row['las']:.4f},{row['uas']:.4f}\n")
        f.write(f"{test_lang},{mask_source},mean,{mean_las:.4f},\n")
    print(f"wrote {out}: mean LAS {mean_las:.4f} over {n_seeds} seeds "
          f"(mask from {mask_source})")
    return 0


def cmd_analyze(args) -> int:
    r = _resolver(args, _load_config(args.config))
    trace_path = _require(args.trace, "--trace")
    out = _require(args.out, "--out")
    window = r.get("window", 50)
    if not os.path.exists(trace_path):
        raise UsageError(f"trace file not found: {trace_path}")
    trace = read_trace(trace_path)
    ctrace = analysis.ConflictTrace.from_cosine_iterations(
        trace.cosine_iterations(), window=window)
    report = analysis.conflict_stats(ctrace)
    with open(out, "w", encoding="utf-8") as f:
        f.write("pair,conflict_pct,mean_cosine,window\n")
        f.write(f"ALL,{report.conflict_pct:.4f},{report.mean_cosine:.4f},{window}\n")
        for pair, (pct, mean) in report.per_pair.items():
            f.write(f"{pair},{pct:.4f},{mean:.4f},{window}\n")
    print(f"wrote {out}: conflict {report.conflict_pct:.2f}% "
          f"mean cosine {report.mean_cosine:.4f}")
    return 0


def cmd_report(args) -> int:
    results_dir = _require(args.results, "--results")
    out_dir = _require(args.out, "--out")
    if not os.path.isdir(results_dir):
        raise UsageError(f"results directory not found: {results_dir}")
    results = analysis.ExperimentResults()
    for name in sorted(os.listdir(results_dir)):
        path = os.path.join(results_dir, name)
        if name.endswith(".results.csv"):
            results.las_rows.extend(_read_csv_dicts(path))
        elif name.endswith(".conflicts.csv"):
            results.conflict_rows.extend(_read_csv_dicts(path))
        elif name.endswith(".rare_unseen.csv"):
            results.rare_unseen_rows.extend(_read_csv_dicts(path))
    written = analysis.emit_report(results, out_dir)
    for path in written:
        print(f"wrote {path}")
    return 0


def _read_csv_dicts(path: str) -> list[dict]:
    import csv

    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------


def build_arg_parser() -> _ArgumentParser:
    p = _ArgumentParser(prog="subnetparse",
                        description="Language-subnetwork dependency parsing")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prune", help="discover a language subnetwork mask")
    sp.add_argument("--lang")
    sp.add_argument("--train")
    sp.add_argument("--dev")
    sp.add_argument("--ckpt")
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--rate", type=float)
    sp.add_argument("--stop", type=float)
    sp.add_argument("--finetune-epochs", type=int, dest="finetune_epochs")
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_prune)

    for name, fn in (("train", cmd_train), ("ablate", cmd_ablate)):
        sp = sub.add_parser(name, help=f"{name} a multilingual parser")
        if name == "ablate":
            sp.add_argument("--kind")
        sp.add_argument("--mode", choices=["nonep", "meta"])
        sp.add_argument("--masks", choices=["none", "static", "dynamic"])
        sp.add_argument("--langs")
        sp.add_argument("--maskdir")
        sp.add_argument("--data")
        sp.add_argument("--stage1-train", dest="stage1_train")
        sp.add_argument("--ckpt")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config")
        sp.add_argument("--out")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("fewshot", help="few-shot adaptation on a test language")
    sp.add_argument("--ckpt")
    sp.add_argument("--test")
    sp.add_argument("--test-lang", dest="test_lang")
    sp.add_argument("--dev")
    sp.add_argument("--mask", help="auto, random, or a mask file path")
    sp.add_argument("--vectors")
    sp.add_argument("--maskdir")
    sp.add_argument("--framework", choices=["nonep", "meta"])
    sp.add_argument("--shots", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--encoder-lr", type=float, dest="encoder_lr")
    sp.add_argument("--classifier-lr", type=float, dest="classifier_lr")
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fewshot)

    sp = sub.add_parser("analyze", help="conflict statistics from a run trace")
    sp.add_argument("--trace")
    sp.add_argument("--window", type=int)
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("report", help="aggregate result fragments into reports")
    sp.add_argument("--results")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SubnetParseError as e:
        print(f"subnetparse: error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"subnetparse: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
