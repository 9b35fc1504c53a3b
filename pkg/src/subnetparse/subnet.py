"""Language-specific subnetwork discovery and mask machinery.

A subnetwork is a binary (n_layers, n_heads) mask over attention heads.
Static masks come from importance-based iterative pruning (union over
seeds); dynamic masks keep real-valued weights that are thresholded to
binary before every forward pass, with a straight-through estimator
carrying gradients back to the weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder import DTYPE
from .errors import ContractError, DataError, UsageError
from .optim import stable_seed, train_supervised
from .parser import encode_sentences, evaluate, score, sentence_loss
from .treebank import Sentence


@dataclass
class HeadMask:
    language: str
    bits: np.ndarray                  # (n_layers, n_heads) of {0, 1}

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int64)
        if self.bits.ndim != 2:
            raise ContractError("head mask must be a 2-D (layers, heads) matrix")
        if not np.isin(self.bits, (0, 1)).all():
            raise ContractError("head mask entries must be 0 or 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def n_disabled(self) -> int:
        return int((self.bits == 0).sum())

    def enabled_set(self) -> set[tuple[int, int]]:
        return {(int(l), int(h)) for l, h in zip(*np.nonzero(self.bits))}

    def disabled_set(self) -> set[tuple[int, int]]:
        return {(int(l), int(h)) for l, h in zip(*np.nonzero(self.bits == 0))}

    def forward_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.bits.astype(np.float64))

    @classmethod
    def all_enabled(cls, language: str, n_layers: int, n_heads: int) -> "HeadMask":
        return cls(language=language, bits=np.ones((n_layers, n_heads), dtype=np.int64))


@dataclass
class SoftMask:
    """Trainable mask weights; the forward pass always sees the binarized
    values, while gradients pass straight through to the weights."""

    language: str
    weights: torch.Tensor             # (n_layers, n_heads), float64 leaf
    keep_fraction: float = 0.8
    init_value: float = 0.01

    def __post_init__(self):
        if not isinstance(self.weights, torch.Tensor):
            self.weights = torch.as_tensor(np.asarray(self.weights), dtype=DTYPE)
        self.weights = self.weights.detach().clone().to(DTYPE).requires_grad_(True)
        if not (0.0 < self.keep_fraction <= 1.0):
            raise ContractError("keep_fraction must lie in (0, 1]")
        if not torch.isfinite(self.weights).all():
            raise ContractError("soft mask weights must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.weights.shape)

    def binary_bits(self) -> np.ndarray:
        return _binarize_array(self.weights.detach().numpy(), self.keep_fraction)

    def forward_tensor(self) -> torch.Tensor:
        binary = torch.from_numpy(self.binary_bits().astype(np.float64))
        # straight-through: binary value forward, identity gradient backward;
        # the parenthesized zero keeps forward values exactly binary
        return binary + (self.weights - self.weights.detach())

    @classmethod
    def from_static(cls, mask: HeadMask, keep_fraction: float | str = 0.8,
                    init_value: float = 0.01) -> "SoftMask":
        """Enabled heads start at init_value, disabled heads at zero.

        With keep_fraction="match", the fraction is derived from the static
        mask so the initial binarization reproduces it exactly; otherwise the
        given fraction applies (the zeroed set then follows the tie rule).
        """
        w = np.where(mask.bits > 0, init_value, 0.0)
        if keep_fraction == "match":
            # midpoint keeps floor((1-k)*total) == n_disabled despite rounding
            total = mask.bits.size
            keep_fraction = 1.0 - (mask.n_disabled + 0.5) / total
            if mask.n_disabled == 0:
                keep_fraction = 1.0
        return cls(language=mask.language, weights=torch.from_numpy(w),
                   keep_fraction=float(keep_fraction), init_value=init_value)


def _binarize_array(weights: np.ndarray, keep_fraction: float) -> np.ndarray:
    total = weights.size
    n_zero = int(math.floor((1.0 - keep_fraction) * total))
    bits = np.ones(total, dtype=np.int64)
    if n_zero > 0:
        # stable sort: equal weights are zeroed in ascending flat order
        order = np.argsort(weights.reshape(-1), kind="stable")
        bits[order[:n_zero]] = 0
    return bits.reshape(weights.shape)


def binarize(soft: SoftMask) -> HeadMask:
    """Threshold the smallest (1 - keep_fraction) share of weights to zero."""
    return HeadMask(language=soft.language, bits=soft.binary_bits())


def ste_backward(grad_at_binary):
    """Straight-through estimator: the threshold backward is the identity."""
    return grad_at_binary


def union_masks(masks: list[HeadMask]) -> HeadMask:
    """Elementwise OR over enabled heads."""
    if not masks:
        raise UsageError("union_masks needs at least one mask")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise ContractError(f"mask shape mismatch: {m.shape} vs {shape}")
    bits = np.zeros(shape, dtype=np.int64)
    for m in masks:
        bits |= m.bits
    return HeadMask(language=masks[0].language, bits=bits)


# ---------------------------------------------------------------------------
# Head importance (expected |dL/dxi|) and iterative pruning


@dataclass
class ImportanceMatrix:
    scores: np.ndarray                # (n_layers, n_heads), nonnegative
    active: np.ndarray                # bool; False for heads the mask disables

    def __post_init__(self):
        if (self.scores < 0).any() or not np.isfinite(self.scores).all():
            raise ContractError("importance scores must be finite and nonnegative")


@dataclass
class PruneIteration:
    removed: list[tuple[int, int]]
    dev_las: float
    ratio: float                       # dev LAS / original dev LAS
    accepted: bool


@dataclass
class PruningTrace:
    original_las: float
    iterations: list[PruneIteration] = field(default_factory=list)


def head_importance(model, data: list[Sentence], active_mask: HeadMask,
                    batch_size: int = 32) -> ImportanceMatrix:
    """Mean over samples of the absolute loss gradient w.r.t. each head's
    mask variable, evaluated at the mask's current values.

    The encoder runs batched, but gradients are taken per sample: the score
    is E|dL/dxi|, not |E dL/dxi|.
    """
    if not data:
        raise UsageError("head_importance needs a nonempty sample")
    cfg = model.state.config
    if active_mask.shape != (cfg.n_layers, cfg.n_heads):
        raise ContractError("mask shape does not match encoder config")
    acc = torch.zeros(cfg.n_layers, cfg.n_heads, dtype=DTYPE)
    params = model.state.params
    for start in range(0, len(data), batch_size):
        chunk = data[start:start + batch_size]
        mask_leaf = active_mask.forward_tensor().requires_grad_(True)
        encs = encode_sentences(model, chunk, mask=mask_leaf)
        for enc, sent in zip(encs, chunk):
            s_arc, s_tag = score(enc, params, model.parser_cfg)
            loss = sentence_loss(s_arc, s_tag, sent, model)
            (g,) = torch.autograd.grad(loss, [mask_leaf], retain_graph=True)
            acc += g.abs()
    scores = (acc / len(data)).numpy()
    return ImportanceMatrix(scores=scores, active=active_mask.bits.astype(bool))


def prune_step_size(total_heads: int, prune_rate: float) -> int:
    """Heads removed per iteration: floor(rate * total), at least one."""
    return max(1, int(math.floor(prune_rate * total_heads)))


def select_heads_to_remove(importance: ImportanceMatrix, mask: HeadMask,
                           count: int) -> list[tuple[int, int]]:
    """The `count` still-active heads with the lowest importance; ties go to
    the lower (layer, head) index."""
    candidates = sorted(
        ((float(importance.scores[l, h]), l, h) for (l, h) in mask.enabled_set()),
    )
    return [(l, h) for _, l, h in candidates[:count]]


def iterative_prune(lang: str, train_sents: list[Sentence],
                    dev_sents: list[Sentence], base_model, *,
                    prune_rate: float = 0.10, stop_ratio: float = 0.95,
                    seed: int = 0, finetune_epochs: int = 5,
                    batch_size: int = 20, encoder_lr: float = 5e-5,
                    classifier_lr: float = 1e-3, weight_decay: float = 0.01,
                    importance_sample: int | None = None):
    """Fine-tune on the language, then repeatedly disable the least important
    heads until dev LAS would fall below stop_ratio of the fine-tuned model.

    Returns (HeadMask, PruningTrace); the returned mask is the last one whose
    dev LAS still met the threshold (the failing iteration is rolled back but
    recorded in the trace).
    """
    if not dev_sents:
        raise UsageError("iterative_prune needs a nonempty dev set")
    if not train_sents:
        raise UsageError("iterative_prune needs a nonempty training set")
    model = base_model.clone()
    train_supervised(model, train_sents, epochs=finetune_epochs,
                     batch_size=batch_size, encoder_lr=encoder_lr,
                     classifier_lr=classifier_lr, weight_decay=weight_decay,
                     seed=stable_seed(seed, lang, "finetune"))
    cfg = model.state.config
    mask = HeadMask.all_enabled(lang, cfg.n_layers, cfg.n_heads)
    original_las, _ = evaluate(model, dev_sents, mask=mask)
    trace = PruningTrace(original_las=original_las)
    step = prune_step_size(cfg.total_heads, prune_rate)

    hi_data = train_sents
    if importance_sample is not None and importance_sample < len(train_sents):
        hi_data = train_sents[:importance_sample]

    while len(mask.enabled_set()) > step:
        importance = head_importance(model, hi_data, mask)
        removed = select_heads_to_remove(importance, mask, step)
        bits = mask.bits.copy()
        for l, h in removed:
            bits[l, h] = 0
        candidate = HeadMask(language=lang, bits=bits)
        dev_las, _ = evaluate(model, dev_sents, mask=candidate)
        ratio = dev_las / original_las if original_las > 0 else 1.0
        accepted = dev_las >= stop_ratio * original_las
        trace.iterations.append(PruneIteration(removed=removed, dev_las=dev_las,
                                               ratio=ratio, accepted=accepted))
        if not accepted:
            break
        mask = candidate
    return mask, trace


# ---------------------------------------------------------------------------
# Unstructured magnitude pruning over attention projection weights


ATTENTION_WEIGHT_SUFFIXES = ("wq", "wk", "wv", "wo")


def eligible_param_names(params: dict[str, torch.Tensor]) -> list[str]:
    """Attention projection weight matrices; embeddings, feedforward (MLP),
    layer norms, biases, and the classifier are never pruned."""
    names = []
    for name in sorted(params):
        if name.startswith("layers.") and name.split(".")[-1] in ATTENTION_WEIGHT_SUFFIXES:
            names.append(name)
    return names


@dataclass
class ParamMask:
    """Parameter-level binary masks over the eligible weight matrices."""

    language: str
    masks: dict[str, np.ndarray]

    def n_disabled(self) -> int:
        return int(sum((m == 0).sum() for m in self.masks.values()))

    def total(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    def overrides(self, params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        """name -> masked weight tensors for use as a forward override."""
        out = {}
        for name, bits in self.masks.items():
            out[name] = params[name] * torch.from_numpy(bits.astype(np.float64))
        return out

    @classmethod
    def all_enabled(cls, language: str, params: dict[str, torch.Tensor]) -> "ParamMask":
        return cls(language=language,
                   masks={n: np.ones(tuple(params[n].shape), dtype=np.int64)
                          for n in eligible_param_names(params)})


def magnitude_prune(lang: str, train_sents: list[Sentence],
                    dev_sents: list[Sentence], base_model, *,
                    rate: float = 0.10, stop_ratio: float = 0.95,
                    seed: int = 0, finetune_epochs: int = 5,
                    batch_size: int = 20, encoder_lr: float = 5e-5,
                    classifier_lr: float = 5e-4, weight_decay: float = 0.01):
    """Iterative unstructured pruning: each round zeroes the lowest-magnitude
    still-active attention-projection weights, with the same dev stop rule as
    head pruning. Ties break by ascending flat index across the sorted names."""
    if not dev_sents or not train_sents:
        raise UsageError("magnitude_prune needs nonempty train and dev sets")
    model = base_model.clone()
    train_supervised(model, train_sents, epochs=finetune_epochs,
                     batch_size=batch_size, encoder_lr=encoder_lr,
                     classifier_lr=classifier_lr, weight_decay=weight_decay,
                     seed=stable_seed(seed, lang, "finetune"))
    params = model.state.params
    names = eligible_param_names(params)
    pmask = ParamMask.all_enabled(lang, params)
    original_las, _ = evaluate(model, dev_sents, param_override=pmask.overrides(params))
    trace = PruningTrace(original_las=original_las)
    total = pmask.total()
    step = max(1, int(math.floor(rate * total)))

    flat_mag = np.concatenate([np.abs(params[n].detach().numpy()).reshape(-1)
                               for n in names])
    sizes = [params[n].numel() for n in names]
    offsets = np.cumsum([0] + sizes)

    def flat_bits(pm: ParamMask) -> np.ndarray:
        return np.concatenate([pm.masks[n].reshape(-1) for n in names])

    while int(flat_bits(pmask).sum()) > step:
        bits = flat_bits(pmask)
        active_idx = np.nonzero(bits)[0]
        order = active_idx[np.argsort(flat_mag[active_idx], kind="stable")]
        to_zero = order[:step]
        new_bits = bits.copy()
        new_bits[to_zero] = 0
        cand = ParamMask(language=lang, masks={
            n: new_bits[offsets[i]:offsets[i + 1]].reshape(tuple(params[n].shape))
            for i, n in enumerate(names)})
        dev_las, _ = evaluate(model, dev_sents, param_override=cand.overrides(params))
        ratio = dev_las / original_las if original_las > 0 else 1.0
        accepted = dev_las >= stop_ratio * original_las
        trace.iterations.append(PruneIteration(
            removed=[(int(i), -1) for i in to_zero], dev_las=dev_las,
            ratio=ratio, accepted=accepted))
        if not accepted:
            break
        pmask = cand
    return pmask, trace


# ---------------------------------------------------------------------------
# Ablation masks


def make_ablation_mask(kind: str, reference: HeadMask, seed: int, *,
                       n: int | None = None,
                       forbidden: set[tuple[int, int]] | None = None,
                       keep_fraction: float = 0.8, init_value: float = 0.01):
    """Masks for the ablation experiments.

    shuffle: same number of disabled heads, positions drawn uniformly.
    random_n: exactly n uniformly random heads disabled.
    bad: n heads disabled, never ones the real pruning disabled (nor any
         explicitly forbidden position).
    random_init_dynamic: a SoftMask with random small positive weights.
    """
    rng = np.random.default_rng(stable_seed(seed, "ablation", kind))
    L, H = reference.shape
    total = L * H
    if kind == "shuffle":
        k = reference.n_disabled
        return _random_disable(reference.language, L, H, k, rng)
    if kind == "random_n":
        if n is None or not (0 <= n <= total):
            raise UsageError("random_n needs 0 <= n <= total heads")
        return _random_disable(reference.language, L, H, n, rng)
    if kind == "bad":
        if n is None:
            raise UsageError("bad masks need a head count n")
        excluded = set(reference.disabled_set())
        if forbidden:
            excluded |= set(forbidden)
        eligible = [(l, h) for l in range(L) for h in range(H)
                    if (l, h) not in excluded]
        if len(eligible) < n:
            raise UsageError(
                f"cannot disable {n} heads: only {len(eligible)} positions "
                f"outside the excluded set")
        picks = rng.choice(len(eligible), size=n, replace=False)
        bits = np.ones((L, H), dtype=np.int64)
        for i in picks:
            bits[eligible[int(i)]] = 0
        return HeadMask(language=reference.language, bits=bits)
    if kind == "random_init_dynamic":
        weights = rng.uniform(0.5 * init_value, 1.5 * init_value, size=(L, H))
        return SoftMask(language=reference.language,
                        weights=torch.from_numpy(weights),
                        keep_fraction=keep_fraction, init_value=init_value)
    raise UsageError(f"unknown ablation kind {kind!r}")


def _random_disable(language: str, L: int, H: int, k: int,
                    rng: np.random.Generator) -> HeadMask:
    flat = rng.choice(L * H, size=k, replace=False)
    bits = np.ones(L * H, dtype=np.int64)
    bits[flat] = 0
    return HeadMask(language=language, bits=bits.reshape(L, H))


# ---------------------------------------------------------------------------
# Mask files


def save_mask(path: str, mask: HeadMask | SoftMask,
              provenance: dict | None = None) -> None:
    if isinstance(mask, SoftMask):
        bits = mask.binary_bits()
        soft = [float(x) for x in mask.weights.detach().numpy().reshape(-1)]
        language = mask.language
    else:
        bits = mask.bits
        soft = None
        language = mask.language
    doc = {
        "language": language,
        "n_layers": int(bits.shape[0]),
        "n_heads": int(bits.shape[1]),
        "bits": [int(b) for b in bits.reshape(-1)],
        "soft_weights": soft,
        "provenance": provenance or {},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")


def load_mask(path: str) -> HeadMask | SoftMask:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid mask file: {e}") from None
    try:
        L, H = int(doc["n_layers"]), int(doc["n_heads"])
        bits = np.asarray(doc["bits"], dtype=np.int64).reshape(L, H)
        lang = doc["language"]
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed mask file: {e}") from None
    if doc.get("soft_weights") is not None:
        weights = np.asarray(doc["soft_weights"], dtype=np.float64).reshape(L, H)
        return SoftMask(language=lang, weights=torch.from_numpy(weights))
    return HeadMask(language=lang, bits=bits)
