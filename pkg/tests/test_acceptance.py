"""Acceptance suite: one test per criterion, each printing a PASS line.

Criteria 9 and 10 train several small models on the shared toy benchmark
(module-scoped fixtures); they dominate the runtime. Everything else is
oracle- or invariant-based and fast. Run with `pytest tests/test_acceptance.py -v -s`.
"""

import itertools
import math
import random
import time

import numpy as np
import pytest
import torch

import bench
from subnetparse.analysis import (ConflictTrace, conflict_stats,
                                  pairwise_cosines,
                                  pearson_conflict_similarity)
from subnetparse.encoder import (EncoderConfig, as_mask_tensor, encode,
                                 head_param_slices, init_state)
from subnetparse.errors import UsageError
from subnetparse.optim import autograd_dict, stable_seed
from subnetparse.parser import (ParseTree, batch_loss, build_parser_model,
                                decode_heads, las, tree_score)
from subnetparse.subnet import (HeadMask, SoftMask, binarize, iterative_prune,
                                prune_step_size, union_masks)
from subnetparse.training import (FewshotConfig, MetaConfig, fewshot_eval,
                                  fo_maml_episode, meta_train,
                                  pick_random_transfer_language,
                                  select_transfer_language, train_stage2)
from subnetparse.treebank import (LabelVocab, ToyGrammarSpec, WordVocab,
                                  gen_toy_treebank)

from conftest import finite_diff_grad, make_sentence, randomize_params, rel_err
from test_parser import brute_force_best_score


def ok(n, msg):
    print(f"[criterion {n:>2}] PASS - {msg}")


def micro_model(seed=0, n_layers=2, n_heads=2):
    """Hand-sized model: tiny vocab so the full-sweep fd check stays fast."""
    wv = WordVocab(forms=[f"w{i}" for i in range(8)])
    lv = LabelVocab(labels=["root", "nsubj", "obj", "det"],
                    counts={"root": 4, "nsubj": 3, "obj": 2, "det": 1})
    cfg = EncoderConfig(vocab_size=wv.size, n_layers=n_layers, n_heads=n_heads,
                        d_model=8, d_ff=10, max_len=12, seed=seed)
    return build_parser_model(cfg, wv, lv, arc_hidden=6, tag_hidden=5)


# ---------------------------------------------------------------------------


def test_criterion_01_cle_matches_brute_force():
    t0 = time.time()
    rng = np.random.default_rng(20240801)
    for n in range(2, 7):
        for _ in range(200):
            S = rng.normal(size=(n + 1, n + 1)) * rng.uniform(0.5, 5.0)
            heads = decode_heads(S)
            assert tree_score(S, heads) == pytest.approx(
                brute_force_best_score(S), abs=1e-9), n
    elapsed = time.time() - t0
    assert elapsed < 60
    ok(1, f"CLE equals exhaustive single-root maximum on 1000 matrices "
          f"({elapsed:.1f}s)")


def test_criterion_02_gradients_match_finite_differences():
    t0 = time.time()
    worst = 0.0
    for seed in range(5):
        model = micro_model(seed=seed)
        randomize_params(model.state.params, seed=100 + seed)
        sent = make_sentence([2, 0, 2], ["nsubj", "root", "obj"],
                             forms=["w1", "w2", "w3"])
        g = torch.Generator().manual_seed(seed)
        mask_leaf = (0.25 + 0.5 * torch.rand(2, 2, generator=g, dtype=torch.float64)
                     ).requires_grad_(True)
        loss = batch_loss(model, [sent], mask=mask_leaf)
        grads = autograd_dict(loss, model.state.params,
                              extra={"__mask__": mask_leaf})

        def objective():
            with torch.no_grad():
                return float(batch_loss(model, [sent], mask=mask_leaf))

        for name in sorted(model.state.params):
            fd = finite_diff_grad(objective, model.state.params[name])
            err = rel_err(grads[name], fd)
            worst = max(worst, err)
            assert err < 1e-4, (seed, name, err)
        fd_mask = finite_diff_grad(objective, mask_leaf)
        err = rel_err(grads["__mask__"], fd_mask)
        worst = max(worst, err)
        assert err < 1e-4
    elapsed = time.time() - t0
    assert elapsed < 120
    n_params = sum(p.numel() for p in micro_model().state.params.values()) + 4
    ok(2, f"all {n_params} parameter and mask gradients match central "
          f"differences, worst rel err {worst:.2e}, 5 seeds ({elapsed:.1f}s)")


def test_criterion_03_masked_head_invariance():
    rng = np.random.default_rng(7)
    state = init_state(EncoderConfig(vocab_size=30, n_layers=2, n_heads=2,
                                     d_model=8, d_ff=10, max_len=16, seed=1))
    for trial in range(50):
        n = int(rng.integers(1, 9))
        tokens = [int(t) for t in rng.integers(0, 30, size=n)]
        mask = (rng.uniform(size=(2, 2)) > 0.4).astype(float)
        zeros = list(zip(*np.nonzero(mask == 0)))
        if not zeros:
            mask[rng.integers(0, 2), rng.integers(0, 2)] = 0.0
            zeros = list(zip(*np.nonzero(mask == 0)))
        l, h = zeros[int(rng.integers(0, len(zeros)))]
        before = encode(tokens, state, mask).mixed.clone()
        bumps = []
        with torch.no_grad():
            for name, index in head_param_slices(state.config, int(l), int(h)):
                bump = float(rng.normal() * 10)
                state.params[name][index] += bump
                bumps.append((name, index, bump))
        after = encode(tokens, state, mask).mixed
        assert torch.equal(before, after), trial
        with torch.no_grad():
            for name, index, bump in bumps:
                state.params[name][index] -= bump
    ok(3, "perturbing zero-masked heads changes outputs by exactly 0 "
          "(50 random input/mask pairs)")


def test_criterion_04_binarization_disables_exactly_28_of_144():
    rng = np.random.default_rng(3)
    for _ in range(100):
        soft = SoftMask(language="xx",
                        weights=torch.from_numpy(rng.uniform(size=(12, 12))),
                        keep_fraction=0.8)
        assert binarize(soft).n_disabled == 28
    ok(4, "keep_fraction 0.8 on 12x12 zeroes exactly 28 heads "
          "(100 random draws)")


@pytest.fixture(scope="module")
def prune_12x12():
    """Real iterative_prune runs on a narrow 12-layer x 12-head encoder."""
    spec = ToyGrammarSpec(word_order="SVO", adposition="pre", vocab_seed=6)
    train = gen_toy_treebank(spec, 40, seed=31, language="px")
    dev = gen_toy_treebank(spec, 12, seed=32, language="px", split="dev")
    from subnetparse.treebank import build_label_vocab, build_word_vocab

    wv = build_word_vocab([train, dev])
    lv = build_label_vocab([train, dev])
    cfg = EncoderConfig(vocab_size=wv.size, n_layers=12, n_heads=12,
                        d_model=24, d_ff=32, max_len=32, seed=0)
    model = build_parser_model(cfg, wv, lv, arc_hidden=12, tag_hidden=8)
    runs = []
    for seed in range(4):
        mask, trace = iterative_prune(
            "px", list(train.sentences), list(dev.sentences), model,
            prune_rate=0.10, stop_ratio=0.95, seed=seed, finetune_epochs=2,
            batch_size=10, encoder_lr=1e-3, classifier_lr=3e-3,
            importance_sample=12)
        runs.append((mask, trace))
    return runs


def test_criterion_05_pruning_invariants(prune_12x12):
    t0 = time.time()
    assert prune_step_size(144, 0.10) == 14
    masks = []
    for mask, trace in prune_12x12:
        enabled = 144
        for it in trace.iterations:
            assert len(it.removed) == 14          # floor(0.10 * 144)
            if it.accepted:
                enabled_after = enabled - 14
                assert enabled_after < enabled    # strictly decreasing
                enabled = enabled_after
        accepted = [it for it in trace.iterations if it.accepted]
        if accepted:
            assert accepted[-1].dev_las >= 0.95 * trace.original_las
        assert mask.disabled_set() == {h for it in accepted for h in it.removed}
        masks.append(mask)
    union = union_masks(masks)
    for m in masks:
        assert m.enabled_set() <= union.enabled_set()
    ok(5, f"removal count 14/iteration at 12x12, monotone shrinkage, 95% stop "
          f"rule honored, union covers all 4 seeds "
          f"(+fixture time, check {time.time()-t0:.1f}s)")


def test_criterion_06_ste_soft_gradients_equal_mask_gradients():
    model = micro_model(seed=4)
    randomize_params(model.state.params, seed=44)
    sent = make_sentence([0, 1], ["root", "obj"], forms=["w1", "w2"])
    soft = SoftMask(language="xx",
                    weights=torch.tensor([[0.3, 0.01], [0.02, 0.4]],
                                         dtype=torch.float64),
                    keep_fraction=0.75)
    loss = batch_loss(model, [sent], mask=soft.forward_tensor())
    (g_soft,) = torch.autograd.grad(loss, [soft.weights])

    # same forward values through a plain continuous mask leaf
    binary_leaf = torch.from_numpy(
        soft.binary_bits().astype(np.float64)).requires_grad_(True)
    loss2 = batch_loss(model, [sent], mask=binary_leaf)
    (g_mask,) = torch.autograd.grad(loss2, [binary_leaf])
    assert torch.equal(g_soft, g_mask)
    ok(6, "soft-weight gradients equal the encoder's mask-variable gradients "
          "elementwise (exact)")


def test_criterion_07_maml_hand_check():
    # closed form, 2 parameters, one language, k = 1
    theta = {"w": torch.tensor([1.0, 2.0], dtype=torch.float64,
                               requires_grad=True)}
    alpha = 0.1

    def loss_s(p):
        return (p["w"][0] - 3) ** 2 + 2 * (p["w"][1] + 1) ** 2

    def loss_q(p):
        return p["w"][0] * p["w"][1]

    phi, _, grads = fo_maml_episode(theta, loss_s, loss_q, k=1,
                                    inner_lr_of_name=lambda n: alpha)
    phi0 = 1.0 - alpha * 2 * (1.0 - 3)
    phi1 = 2.0 - alpha * 4 * (2.0 + 1)
    beta = 0.05
    updated = theta["w"].detach() - beta * grads["w"]
    expected = torch.tensor([1.0 - beta * phi1, 2.0 - beta * phi0],
                            dtype=torch.float64)
    assert float((updated - expected).abs().max()) < 1e-10

    # alpha = 0: outer update is exactly the averaged masked query gradient
    spec = ToyGrammarSpec(word_order="SVO", adposition="pre", vocab_seed=2)
    tb = gen_toy_treebank(spec, 20, seed=9, language="qq")
    from subnetparse.treebank import build_label_vocab, build_word_vocab

    wv, lv = build_word_vocab([tb]), build_label_vocab([tb])
    cfg = EncoderConfig(vocab_size=wv.size, n_layers=2, n_heads=2, d_model=8,
                        d_ff=10, max_len=32, seed=3)
    model = build_parser_model(cfg, wv, lv, arc_hidden=6, tag_hidden=5)
    mask = HeadMask("qq", np.array([[1, 0], [1, 1]]))
    mcfg = MetaConfig(episodes=1, n_support=4, inner_steps=3,
                      inner_encoder_lr=0.0, inner_classifier_lr=0.0,
                      outer_encoder_lr=0.05, outer_classifier_lr=0.05,
                      outer_optimizer="sgd", weight_decay=0.0,
                      warmup_fraction=0.0, seed=5)
    reference = model.clone()
    trained, _ = meta_train(model, {"qq": tb}, {"qq": mask}, mcfg)

    from subnetparse.training import sample_episode

    ep = sample_episode(tb, 4, stable_seed(5, "episode", 0, "qq"))
    qloss = batch_loss(reference, ep.query, mask=mask.forward_tensor())
    qgrads = autograd_dict(qloss, reference.state.params)
    for name, g in qgrads.items():
        expected = reference.state.params[name].detach() - 0.05 * g
        nz = g != 0
        assert torch.equal(trained.state.params[name][nz], expected[nz]), name
        assert torch.equal(trained.state.params[name][~nz],
                           reference.state.params[name][~nz]), name
    ok(7, "first-order MAML matches the closed form to 1e-10; alpha=0 outer "
          "update equals the averaged masked query gradient exactly")


def test_criterion_08_protection_invariant():
    from subnetparse.optim import GatedAdamW, cosine_warmup_lr
    from subnetparse.training import TrainConfig

    sa = ToyGrammarSpec(word_order="SVO", adposition="pre", vocab_seed=1)
    sb = ToyGrammarSpec(word_order="SOV", adposition="post", vocab_seed=2)
    a = gen_toy_treebank(sa, 24, seed=3, language="aa")
    b = gen_toy_treebank(sb, 24, seed=4, language="bb")
    from subnetparse.treebank import build_label_vocab, build_word_vocab

    wv, lv = build_word_vocab([a, b]), build_label_vocab([a, b])
    cfg = EncoderConfig(vocab_size=wv.size, n_layers=2, n_heads=2, d_model=8,
                        d_ff=10, max_len=32, seed=5)
    model = build_parser_model(cfg, wv, lv, arc_hidden=6, tag_hidden=5)
    # head (1,1) disabled for both; head (0,0) enabled only for aa
    masks = {"aa": HeadMask("aa", np.array([[1, 1], [1, 0]])),
             "bb": HeadMask("bb", np.array([[0, 1], [1, 0]]))}
    snap = {k: v.detach().clone() for k, v in model.state.params.items()}
    reference = model.clone()
    tcfg = TrainConfig(stage2_iterations=5, per_language_batch=6,
                       weight_decay=0.01, seed=11)
    trained, _ = train_stage2(model, {"aa": a, "bb": b}, masks, tcfg)
    for name, index in head_param_slices(cfg, 1, 1):
        assert torch.equal(trained.state.params[name][index], snap[name][index])

    # head (0,0): one composed step must equal the trained first step
    one = TrainConfig(stage2_iterations=1, per_language_batch=6,
                      weight_decay=0.01, seed=11)
    again = reference.clone()
    stepped, _ = train_stage2(again, {"aa": a, "bb": b}, masks, one)
    rng = random.Random(stable_seed(11, "stage2", "aa"))
    batch = [a.sentences[rng.randrange(len(a.sentences))] for _ in range(6)]
    loss = batch_loss(reference, batch, mask=masks["aa"].forward_tensor())
    grads = autograd_dict(loss, reference.state.params)
    half = {k: g / 2 for k, g in grads.items()}
    opt = GatedAdamW(reference.state.params, weight_decay=0.01)
    lrs = {"encoder": cosine_warmup_lr(0, 1, one.encoder_lr, one.warmup_fraction),
           "classifier": cosine_warmup_lr(0, 1, one.classifier_lr,
                                          one.warmup_fraction)}
    opt.step(half, lrs)
    for name, index in head_param_slices(cfg, 0, 0):
        assert torch.equal(stepped.state.params[name][index],
                           reference.state.params[name][index]), name
    ok(8, "heads masked everywhere have exactly zero drift; a head used by "
          "one language moves exactly by its averaged-gradient update")


def test_criterion_11_las_evaluator():
    lv = LabelVocab(labels=["root", "nsubj", "obj", "det", "obl"],
                    counts={l: 1 for l in ["root", "nsubj", "obj", "det", "obl"]})
    li = {l: i for i, l in enumerate(lv.labels)}

    # fixture 1: identical trees -> 100/100
    g1 = make_sentence([2, 0], ["nsubj", "root"])
    p1 = ParseTree(heads=[2, 0], labels=[li["nsubj"], li["root"]])
    assert las([p1], [g1], lv) == (100.0, 100.0)

    # fixture 2: 4 tokens, 2 fully right, 1 right head wrong label -> 50/75
    g2 = make_sentence([2, 0, 2, 2], ["nsubj", "root", "obj", "obl"])
    p2 = ParseTree(heads=[2, 0, 2, 1],
                   labels=[li["nsubj"], li["root"], li["obl"], li["obl"]])
    assert las([p2], [g2], lv) == (50.0, 75.0)

    # fixture 3: right heads, all labels wrong -> 0 LAS, 100 UAS
    p3 = ParseTree(heads=[2, 0], labels=[li["det"], li["det"]])
    assert las([p3], [g1], lv) == (0.0, 100.0)

    # fixture 4: two sentences pooled: 3 of 5 tokens fully right, 4 right head
    g4 = make_sentence([0, 1, 1], ["root", "det", "obj"])
    p4 = ParseTree(heads=[0, 1, 3], labels=[li["root"], li["det"], li["obj"]])
    l, u = las([p1, p4], [g1, g4], lv)
    assert (l, u) == (80.0, 80.0)

    # fixture 5: everything wrong -> 0/0
    p5 = ParseTree(heads=[1, 1], labels=[li["obj"], li["obj"]])
    g5 = make_sentence([2, 0], ["nsubj", "root"])
    assert las([p5], [g5], lv) == (0.0, 0.0)
    ok(11, "LAS/UAS match hand counts on 5 fixtures; identical trees score 100.0")


def test_criterion_12_statistics():
    x = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3]
    y = [2.7, 1.8, 2.8, 1.2, 4.1, 8.0, 1.4, 6.6, 4.9, 3.3]
    r, p = pearson_conflict_similarity(x, y)
    assert abs(r - 0.960770559713934) < 1e-6

    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        iters = [{"a|b": float(c)} for c in rng.uniform(-1, 1, size=n)]
        rep = conflict_stats(ConflictTrace(iterations=iters, window=n))
        assert 0.0 <= rep.conflict_pct <= 100.0

    cos, _ = pairwise_cosines({"a": np.array([1.0, 0.0]),
                               "b": np.array([0.0, 1.0])})
    assert cos[("a", "b")] == 0.0
    rep = conflict_stats(ConflictTrace(iterations=[{"a|b": 0.0}], window=1))
    assert rep.conflict_pct == 0.0
    ok(12, "Pearson reproduces the independently computed r to 1e-6; "
           "conflict_pct bounded on 1000 random traces; orthogonal pairs "
           "are not conflicts")


def test_criterion_13_cmd_train_determinism(tmp_path):
    from subnetparse.cli import main as cli_main
    from subnetparse.parser import save_model
    from subnetparse.treebank import write_conllu

    data = tmp_path / "data"
    data.mkdir()
    banks = []
    for lang, vs in (("aa", 1), ("bb", 2)):
        spec = ToyGrammarSpec(word_order="SVO", adposition="pre", vocab_seed=vs)
        tb = gen_toy_treebank(spec, 20, seed=5, language=lang)
        write_conllu(tb, str(data / f"{lang}.train.conllu"))
        banks.append(tb)
    from subnetparse.treebank import build_label_vocab, build_word_vocab

    wv, lv = build_word_vocab(banks), build_label_vocab(banks)
    cfg = EncoderConfig(vocab_size=wv.size, n_layers=2, n_heads=2, d_model=8,
                        d_ff=10, max_len=32, seed=0)
    model = build_parser_model(cfg, wv, lv, arc_hidden=6, tag_hidden=5)
    ckpt = tmp_path / "base.ckpt"
    save_model(str(ckpt), model)
    config = tmp_path / "c.cfg"
    config.write_text("stage2_iterations = 3\nper_language_batch = 4\n")

    args = ["train", "--mode", "nonep", "--masks", "none", "--langs", "aa,bb",
            "--data", str(data), "--ckpt", str(ckpt), "--config", str(config),
            "--seed", "7"]
    o1, o2 = str(tmp_path / "r1.ckpt"), str(tmp_path / "r2.ckpt")
    assert cli_main(args + ["--out", o1]) == 0
    assert cli_main(args + ["--out", o2]) == 0
    assert open(o1, "rb").read() == open(o2, "rb").read()
    assert (open(o1 + ".trace.csv", "rb").read()
            == open(o2 + ".trace.csv", "rb").read())
    ok(13, "identical cmd_train invocations produce byte-identical "
           "checkpoints and run traces")
