"""Training regimes: two-stage non-episodic multilingual fine-tuning with
per-language masks, first-order MAML with masks applied in the inner loop,
few-shot test-time adaptation, and typology-based transfer-mask selection.

Per-language gradients are recorded (as pairwise cosines) before they are
averaged, which is what the interference analysis consumes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np
import torch

from .analysis import pairwise_cosines
from .encoder import flatten_grads, param_group
from .errors import ContractError, UsageError
from .optim import (GatedAdamW, autograd_dict, cosine_warmup_lr,
                    make_optimizer, stable_seed, train_supervised)
from .parser import ParserModel, batch_loss, evaluate
from .subnet import HeadMask, ParamMask, SoftMask
from .treebank import LanguageMeta, Sentence, Treebank, sample_sentences


@dataclass
class TrainConfig:
    stage1_epochs: int = 60
    stage2_iterations: int = 1000
    per_language_batch: int = 20
    encoder_lr: float = 1e-4
    classifier_lr: float = 1e-3
    stage1_encoder_lr: float = 5e-5
    stage1_classifier_lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_fraction: float = 0.10
    schedule: str = "cosine"
    gradual_unfreeze_first_epoch: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("encoder_lr", "classifier_lr", "stage1_encoder_lr",
                     "stage1_classifier_lr"):
            if getattr(self, name) <= 0:
                raise UsageError(f"TrainConfig.{name} must be positive")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise UsageError("warmup_fraction must lie in [0, 1)")
        if self.schedule != "cosine":
            raise UsageError("only the cosine schedule is supported")


@dataclass
class MetaConfig:
    episodes: int = 500
    n_support: int = 20               # support and query set size N
    inner_steps: int = 20             # k
    inner_encoder_lr: float = 1e-5    # alpha, split per parameter group
    inner_classifier_lr: float = 5e-4
    outer_encoder_lr: float = 1e-4    # beta, split per parameter group
    outer_classifier_lr: float = 1e-3
    first_order: bool = True
    outer_optimizer: str = "adam"
    weight_decay: float = 0.01
    warmup_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 1 or self.n_support < 1 or self.inner_steps < 1:
            raise UsageError("episodes, n_support, and inner_steps must be >= 1")
        # a zero inner rate is allowed: the learner then stays at the shared
        # initialization and the outer update reduces to plain masked training
        for name in ("inner_encoder_lr", "inner_classifier_lr"):
            if getattr(self, name) < 0:
                raise UsageError(f"MetaConfig.{name} must be nonnegative")
        for name in ("outer_encoder_lr", "outer_classifier_lr"):
            if getattr(self, name) <= 0:
                raise UsageError(f"MetaConfig.{name} must be positive")
        if not self.first_order:
            raise UsageError("only first-order meta-training is implemented")


def default_meta_lrs(mask_kind: str) -> dict[str, float]:
    """Tuned inner learning rates: dynamic masks use the higher pair."""
    if mask_kind == "dynamic":
        return {"inner_encoder_lr": 1e-4, "inner_classifier_lr": 1e-3}
    return {"inner_encoder_lr": 1e-5, "inner_classifier_lr": 5e-4}


@dataclass
class Episode:
    language: str
    support: list[Sentence]
    query: list[Sentence]

    def __post_init__(self):
        sup = {s.source_id for s in self.support}
        qry = {s.source_id for s in self.query}
        if sup & qry:
            raise ContractError(
                f"episode for {self.language}: support and query overlap")


@dataclass
class IterationRecord:
    iteration: int
    losses: dict[str, float]
    lrs: dict[str, float]
    cosines: dict[str, float]                  # "langA|langB" -> cosine
    masks: dict[str, str] = field(default_factory=dict)  # lang -> bit string


@dataclass
class RunTrace:
    records: list[IterationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def cosine_iterations(self) -> list[dict[str, float]]:
        return [r.cosines for r in self.records]

    def loss_series(self, language: str) -> list[float]:
        return [r.losses[language] for r in self.records]


def write_trace(trace: RunTrace, path: str) -> None:
    lines = ["iteration,kind,key,value"]
    for r in trace.records:
        for lang in sorted(r.losses):
            lines.append(f"{r.iteration},loss,{lang},{r.losses[lang]:.17g}")
        for group in sorted(r.lrs):
            lines.append(f"{r.iteration},lr,{group},{r.lrs[group]:.17g}")
        for pair in sorted(r.cosines):
            lines.append(f"{r.iteration},cosine,{pair},{r.cosines[pair]:.17g}")
        for lang in sorted(r.masks):
            lines.append(f"{r.iteration},mask,{lang},{r.masks[lang]}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_trace(path: str) -> RunTrace:
    by_iter: dict[int, IterationRecord] = {}
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "iteration,kind,key,value":
            raise UsageError(f"{path}: not a run trace file")
        for line in f:
            line = line.strip()
            if not line:
                continue
            it_s, kind, key, value = line.split(",", 3)
            it = int(it_s)
            rec = by_iter.setdefault(it, IterationRecord(
                iteration=it, losses={}, lrs={}, cosines={}))
            if kind == "loss":
                rec.losses[key] = float(value)
            elif kind == "lr":
                rec.lrs[key] = float(value)
            elif kind == "cosine":
                rec.cosines[key] = float(value)
            elif kind == "mask":
                rec.masks[key] = value
    return RunTrace(records=[by_iter[i] for i in sorted(by_iter)])


# ---------------------------------------------------------------------------
# Mask plumbing shared by both regimes


def _check_masks(languages: list[str], masks: dict | None) -> str:
    """Returns the masking kind: none / static / dynamic / unstructured."""
    if masks is None:
        return "none"
    missing = [l for l in languages if masks.get(l) is None]
    if len(missing) == len(languages):
        return "none"
    if missing:
        raise UsageError(
            f"masks must be given for all languages or none; missing: {missing}")
    if any(isinstance(masks[l], SoftMask) for l in languages):
        return "dynamic"
    if any(isinstance(masks[l], ParamMask) for l in languages):
        return "unstructured"
    return "static"


def _mask_tensor_for(masks: dict | None, lang: str):
    if masks is None:
        return None
    m = masks.get(lang)
    return None if m is None else m.forward_tensor()


def _soft_leaves(masks: dict | None, languages: list[str]) -> dict[str, torch.Tensor]:
    out = {}
    if masks:
        for lang in languages:
            m = masks.get(lang)
            if isinstance(m, SoftMask):
                out[f"softmask.{lang}"] = m.weights
    return out


def _mask_bit_string(mask) -> str:
    if isinstance(mask, SoftMask):
        bits = mask.binary_bits()
    else:
        bits = mask.bits
    return "".join(str(int(b)) for b in bits.reshape(-1))


def _group_with_softmasks(name: str) -> str:
    # soft mask weights follow the encoder learning rate
    return "encoder" if name.startswith("softmask.") else param_group(name)


# ---------------------------------------------------------------------------
# Stage 1: single-language supervised fine-tuning, no masks


def train_stage1(model: ParserModel, treebank: Treebank,
                 config: TrainConfig) -> ParserModel:
    """Unmasked fine-tuning on the stage-1 language, with optional gradual
    unfreezing (encoder frozen during the first epoch)."""
    if len(treebank) == 0:
        raise UsageError("stage-1 treebank is empty")
    train_supervised(
        model, list(treebank.sentences), epochs=config.stage1_epochs,
        batch_size=config.per_language_batch,
        encoder_lr=config.stage1_encoder_lr,
        classifier_lr=config.stage1_classifier_lr,
        weight_decay=config.weight_decay,
        warmup_fraction=config.warmup_fraction,
        seed=stable_seed(config.seed, "stage1"),
        freeze_encoder_first_epoch=config.gradual_unfreeze_first_epoch)
    return model


# ---------------------------------------------------------------------------
# Stage 2: non-episodic multilingual training under per-language masks


def train_stage2(model: ParserModel, language_treebanks: dict[str, Treebank],
                 masks: dict | None, config: TrainConfig,
                 record_grad_cosines: bool = True):
    """Per iteration: one batch per language under that language's mask,
    per-language gradients recorded, then a single update with their mean.
    Dynamic (soft) masks are re-binarized after every iteration by
    construction, since the forward pass always thresholds current weights.
    """
    languages = sorted(language_treebanks)
    if not languages:
        raise UsageError("train_stage2 needs at least one language")
    kind = _check_masks(languages, masks)
    soft_leaves = _soft_leaves(masks, languages)
    opt = GatedAdamW({**model.state.params, **soft_leaves},
                     weight_decay=config.weight_decay,
                     group_fn=_group_with_softmasks)
    model_names = sorted(model.state.params)
    rngs = {lang: random.Random(stable_seed(config.seed, "stage2", lang))
            for lang in languages}
    trace = RunTrace()
    total = config.stage2_iterations
    for it in range(total):
        lrs = {
            "encoder": cosine_warmup_lr(it, total, config.encoder_lr,
                                        config.warmup_fraction),
            "classifier": cosine_warmup_lr(it, total, config.classifier_lr,
                                           config.warmup_fraction),
        }
        losses: dict[str, float] = {}
        grad_vectors: dict[str, np.ndarray] = {}
        summed: dict[str, torch.Tensor] = {}
        for lang in languages:
            sents = language_treebanks[lang].sentences
            batch = [sents[rngs[lang].randrange(len(sents))]
                     for _ in range(config.per_language_batch)]
            m = masks.get(lang) if masks else None
            if isinstance(m, ParamMask):
                mask_t = None
                override = m.overrides(model.state.params)
            else:
                mask_t = _mask_tensor_for(masks, lang)
                override = None
            extra = ({f"softmask.{lang}": m.weights}
                     if isinstance(m, SoftMask) else None)
            loss = batch_loss(model, batch, mask=mask_t, param_override=override)
            grads = autograd_dict(loss, model.state.params, extra=extra)
            losses[lang] = float(loss.detach())
            if record_grad_cosines:
                grad_vectors[lang] = flatten_grads(grads, model_names)
            for name, g in grads.items():
                if name in summed:
                    summed[name] = summed[name] + g
                else:
                    summed[name] = g
        mean_grads = {name: g / len(languages) for name, g in summed.items()}
        opt.step(mean_grads, lrs)

        cosines, _ = pairwise_cosines(grad_vectors) if record_grad_cosines else ({}, [])
        rec = IterationRecord(
            iteration=it, losses=losses, lrs=lrs,
            cosines={f"{a}|{b}": c for (a, b), c in cosines.items()})
        if kind == "dynamic":
            rec.masks = {lang: _mask_bit_string(masks[lang]) for lang in languages}
        trace.records.append(rec)
    return model, trace


# ---------------------------------------------------------------------------
# Meta-training (first-order MAML, masks applied in the inner loop)


def sample_episode(treebank: Treebank, n: int, seed: int) -> Episode:
    if len(treebank) < 2 * n:
        raise UsageError(
            f"{treebank.language}: need at least {2 * n} sentences for an episode")
    drawn = sample_sentences(treebank, 2 * n, seed, without_replacement=True)
    return Episode(language=treebank.language, support=drawn[:n], query=drawn[n:])


def inner_adapt(params: dict[str, torch.Tensor], loss_fn, k: int,
                lr_of_name) -> dict[str, torch.Tensor]:
    """k steps of plain gradient descent on fresh leaf copies of params."""
    phi = {n: t.detach().clone().requires_grad_(True) for n, t in params.items()}
    for _ in range(k):
        loss = loss_fn(phi)
        grads = autograd_dict(loss, phi)
        phi = {n: (phi[n] - lr_of_name(n) * grads[n]).detach().requires_grad_(True)
               for n in phi}
    return phi


def fo_maml_episode(params: dict[str, torch.Tensor], support_loss_fn,
                    query_loss_fn, k: int, inner_lr_of_name,
                    extra: dict[str, torch.Tensor] | None = None):
    """One first-order episode for one task.

    Adapts a learner copy with k plain-GD steps on the support loss, then
    returns (learner params, query loss, gradients of the query loss taken at
    the adapted learner). The shared parameters are never touched.
    """
    phi = inner_adapt(params, support_loss_fn, k, inner_lr_of_name)
    query_loss = query_loss_fn(phi)
    grads = autograd_dict(query_loss, phi, extra=extra)
    return phi, query_loss, grads


def meta_train(model: ParserModel, language_treebanks: dict[str, Treebank],
               masks: dict | None, config: MetaConfig,
               record_grad_cosines: bool = True):
    """Algorithm: per episode, adapt a masked learner copy per language on
    its support set (k plain-GD steps), then update the shared parameters
    with the mean of the learners' query gradients (first-order)."""
    languages = sorted(language_treebanks)
    if not languages:
        raise UsageError("meta_train needs at least one language")
    kind = _check_masks(languages, masks)
    soft_leaves = _soft_leaves(masks, languages)
    opt = make_optimizer(config.outer_optimizer,
                         {**model.state.params, **soft_leaves},
                         weight_decay=config.weight_decay,
                         group_fn=_group_with_softmasks)
    model_names = sorted(model.state.params)

    def inner_lr(name: str) -> float:
        return (config.inner_classifier_lr if param_group(name) == "classifier"
                else config.inner_encoder_lr)

    trace = RunTrace()
    total = config.episodes
    for ep in range(total):
        lrs = {
            "encoder": cosine_warmup_lr(ep, total, config.outer_encoder_lr,
                                        config.warmup_fraction),
            "classifier": cosine_warmup_lr(ep, total, config.outer_classifier_lr,
                                           config.warmup_fraction),
        }
        losses: dict[str, float] = {}
        grad_vectors: dict[str, np.ndarray] = {}
        summed: dict[str, torch.Tensor] = {}
        for lang in languages:
            episode = sample_episode(language_treebanks[lang], config.n_support,
                                     stable_seed(config.seed, "episode", ep, lang))
            mask_t = _mask_tensor_for(masks, lang)
            extra = ({f"softmask.{lang}": masks[lang].weights}
                     if masks and isinstance(masks.get(lang), SoftMask) else None)
            _, query_loss, grads = fo_maml_episode(
                model.state.params,
                lambda phi: batch_loss(model, episode.support, mask=mask_t, params=phi),
                lambda phi: batch_loss(model, episode.query, mask=mask_t, params=phi),
                config.inner_steps, inner_lr, extra=extra)
            losses[lang] = float(query_loss.detach())
            if record_grad_cosines:
                grad_vectors[lang] = flatten_grads(
                    {n: grads[n] for n in model_names}, model_names)
            for name, g in grads.items():
                if name in summed:
                    summed[name] = summed[name] + g
                else:
                    summed[name] = g
        outer_grads = {name: g / len(languages) for name, g in summed.items()}
        opt.step(outer_grads, lrs)

        cosines, _ = pairwise_cosines(grad_vectors) if record_grad_cosines else ({}, [])
        rec = IterationRecord(
            iteration=ep, losses=losses, lrs=lrs,
            cosines={f"{a}|{b}": c for (a, b), c in cosines.items()})
        if kind == "dynamic":
            rec.masks = {lang: _mask_bit_string(masks[lang]) for lang in languages}
        trace.records.append(rec)
    return model, trace


# ---------------------------------------------------------------------------
# Transfer-mask selection and few-shot adaptation


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise UsageError("cosine similarity undefined for zero-norm vectors")
    return float(np.dot(a, b) / (na * nb))


def select_transfer_language(test_lang: LanguageMeta,
                             train_langs: list[LanguageMeta]) -> LanguageMeta:
    """Training language with the highest typological cosine similarity;
    exact ties break lexicographically by language code."""
    if not train_langs:
        raise UsageError("no training languages to select from")
    scored = sorted(((-cosine_similarity(test_lang.typo_vector, m.typo_vector),
                      m.code, m) for m in train_langs))
    return scored[0][2]


def select_transfer_mask(test_lang: LanguageMeta,
                         train_langs: list[LanguageMeta]):
    """Returns (code, mask) for the typologically closest training language."""
    from .subnet import load_mask

    best = select_transfer_language(test_lang, train_langs)
    if best.mask_path is None:
        raise UsageError(f"no mask stored for selected language {best.code}")
    return best.code, load_mask(best.mask_path)


def pick_random_transfer_language(train_langs: list[LanguageMeta],
                                  seed: int) -> LanguageMeta:
    if not train_langs:
        raise UsageError("no training languages to pick from")
    rng = random.Random(stable_seed(seed, "random-transfer"))
    ordered = sorted(train_langs, key=lambda m: m.code)
    return ordered[rng.randrange(len(ordered))]


@dataclass
class FewshotConfig:
    optimizer: str = "adam"           # "sgd" mirrors the meta inner loop
    encoder_lr: float = 1e-4
    classifier_lr: float = 1e-3
    weight_decay: float = 0.01

    @classmethod
    def for_framework(cls, framework: str, mask_kind: str = "static") -> "FewshotConfig":
        if framework == "meta":
            lrs = default_meta_lrs(mask_kind)
            return cls(optimizer="sgd", encoder_lr=lrs["inner_encoder_lr"],
                       classifier_lr=lrs["inner_classifier_lr"], weight_decay=0.0)
        return cls()


def fewshot_adapt(model: ParserModel, test_treebank: Treebank, mask, *,
                  shots: int = 20, steps: int = 20,
                  config: FewshotConfig | None = None, seed: int = 0,
                  dev_treebank: Treebank | None = None):
    """Adapt a copy of the model on a handful of target-language sentences.

    Shots come from the dev split when one is given; otherwise they are
    drawn from (and removed from) the test data. Returns
    (adapted model, LAS on the remaining evaluation sentences).
    """
    config = config or FewshotConfig()
    if dev_treebank is not None and len(dev_treebank) >= shots:
        support = sample_sentences(dev_treebank, shots, stable_seed(seed, "shots"))
        eval_sents = list(test_treebank.sentences)
    else:
        if len(test_treebank) <= shots:
            raise UsageError(
                f"test treebank has only {len(test_treebank)} sentences; "
                f"need more than {shots}")
        order = sample_sentences(test_treebank, len(test_treebank),
                                 stable_seed(seed, "shots"))
        support = order[:shots]
        eval_sents = order[shots:]

    adapted = model.clone()
    mask_t = mask.forward_tensor() if mask is not None and hasattr(mask, "forward_tensor") else mask
    if steps > 0:
        opt = make_optimizer(config.optimizer, adapted.state.params,
                             weight_decay=config.weight_decay)
        lrs = {"encoder": config.encoder_lr, "classifier": config.classifier_lr}
        for _ in range(steps):
            loss = batch_loss(adapted, support, mask=mask_t)
            grads = autograd_dict(loss, adapted.state.params)
            opt.step(grads, lrs)
    las_pct, uas_pct = evaluate(adapted, eval_sents, mask=mask_t)
    return adapted, las_pct, uas_pct


def fewshot_eval(model: ParserModel, test_treebank: Treebank, mask, *,
                 shots: int = 20, steps: int = 20,
                 config: FewshotConfig | None = None,
                 seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
                 dev_treebank: Treebank | None = None):
    """Few-shot evaluation averaged over seeds; returns (per-seed rows, mean LAS)."""
    rows = []
    for seed in seeds:
        _, las_pct, uas_pct = fewshot_adapt(
            model, test_treebank, mask, shots=shots, steps=steps,
            config=config, seed=seed, dev_treebank=dev_treebank)
        rows.append({"seed": seed, "las": las_pct, "uas": uas_pct})
    mean_las = sum(r["las"] for r in rows) / len(rows)
    return rows, mean_las
