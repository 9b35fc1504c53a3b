"""Biaffine arc/label scoring, training loss, exact non-projective decoding,
and attachment-score evaluation.

Arc scores follow the deep-biaffine recipe: separate head/dependent
feedforwards with ELU, then ``S_arc = H_head W H_dep^T + H_head . b``.
Label scores use a second pair of feedforwards and one biaffine tensor per
relation (homogeneous coordinates absorb the linear and constant terms).
Decoding finds the maximum spanning arborescence with Chu-Liu/Edmonds,
constrained to a single child of the root.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .encoder import (DTYPE, EncoderConfig, ModelState, as_mask_tensor,
                      forward_batch, init_state, load_checkpoint,
                      save_checkpoint)
from .errors import ContractError, UsageError
from .treebank import LabelVocab, Sentence, Token, Treebank, WordVocab

UNK_LABEL = "<unk-label>"


@dataclass(frozen=True)
class ParserConfig:
    n_labels: int                 # label vocab size, excluding the UNK row
    arc_hidden: int = 768
    tag_hidden: int = 256

    def __post_init__(self):
        if self.n_labels < 1 or self.arc_hidden < 1 or self.tag_hidden < 1:
            raise ContractError("ParserConfig dimensions must be >= 1")

    @property
    def n_label_rows(self) -> int:
        return self.n_labels + 1      # trailing row scores the UNK label


@dataclass
class ParseTree:
    heads: list[int]              # 0 = root, else 1-based head index
    labels: list[int]             # label vocab indices (n_labels = UNK)


@dataclass
class ParserModel:
    """Encoder state (with attached classifier), vocabularies, and sizes."""

    state: ModelState
    parser_cfg: ParserConfig
    word_vocab: WordVocab
    label_vocab: LabelVocab

    def __post_init__(self):
        self._label_idx = {lab: i for i, lab in enumerate(self.label_vocab.labels)}

    def clone(self) -> "ParserModel":
        return ParserModel(self.state.clone(), self.parser_cfg,
                           self.word_vocab, self.label_vocab)

    def label_index(self, deprel: str) -> int:
        return self._label_idx.get(deprel, self.parser_cfg.n_labels)  # UNK row

    def label_string(self, idx: int) -> str:
        if 0 <= idx < self.parser_cfg.n_labels:
            return self.label_vocab.labels[idx]
        return UNK_LABEL


def attach_classifier(state: ModelState, cfg: ParserConfig, seed: int = 0) -> None:
    """Add randomly initialized task-head parameters to the model state."""
    g = torch.Generator().manual_seed(seed)
    d = state.config.d_model

    def normal(*shape):
        return (torch.randn(*shape, generator=g, dtype=DTYPE) * 0.02).requires_grad_(True)

    def zeros(*shape):
        return torch.zeros(*shape, dtype=DTYPE, requires_grad=True)

    p = state.params
    p["clf.root_emb"] = normal(d)
    p["clf.arc_head.w"] = normal(d, cfg.arc_hidden)
    p["clf.arc_head.b"] = zeros(cfg.arc_hidden)
    p["clf.arc_dep.w"] = normal(d, cfg.arc_hidden)
    p["clf.arc_dep.b"] = zeros(cfg.arc_hidden)
    p["clf.w_arc"] = normal(cfg.arc_hidden, cfg.arc_hidden)
    p["clf.b_arc"] = zeros(cfg.arc_hidden)
    p["clf.tag_head.w"] = normal(d, cfg.tag_hidden)
    p["clf.tag_head.b"] = zeros(cfg.tag_hidden)
    p["clf.tag_dep.w"] = normal(d, cfg.tag_hidden)
    p["clf.tag_dep.b"] = zeros(cfg.tag_hidden)
    p["clf.u_label"] = normal(cfg.n_label_rows, cfg.tag_hidden + 1, cfg.tag_hidden + 1)


def build_parser_model(enc_cfg: EncoderConfig, word_vocab: WordVocab,
                       label_vocab: LabelVocab, arc_hidden: int = 768,
                       tag_hidden: int = 256, seed: int | None = None) -> ParserModel:
    if enc_cfg.vocab_size != word_vocab.size:
        enc_cfg = EncoderConfig(**{**asdict(enc_cfg), "vocab_size": word_vocab.size})
    state = init_state(enc_cfg)
    cfg = ParserConfig(n_labels=len(label_vocab), arc_hidden=arc_hidden,
                       tag_hidden=tag_hidden)
    attach_classifier(state, cfg, seed=enc_cfg.seed if seed is None else seed)
    return ParserModel(state=state, parser_cfg=cfg, word_vocab=word_vocab,
                       label_vocab=label_vocab)


def score(encodings: torch.Tensor, params: dict[str, torch.Tensor],
          cfg: ParserConfig):
    """Arc and label scores for one sentence of encodings (n, d_model).

    Returns (S_arc, S_tag): S_arc has shape (n+1, n+1) with entry (h, d)
    scoring the arc h -> d over {root} + tokens; S_tag has shape
    (n+1, n+1, n_label_rows) with label scores for every candidate arc.
    """
    if encodings.dim() != 2 or encodings.shape[0] < 1:
        raise ContractError("encodings must be a (n>=1, d_model) tensor")
    if encodings.shape[1] != params["clf.arc_head.w"].shape[0]:
        raise ContractError("encoding width does not match classifier width")
    r = torch.cat([params["clf.root_emb"].unsqueeze(0), encodings], dim=0)
    elu = torch.nn.functional.elu
    h_arc_head = elu(r @ params["clf.arc_head.w"] + params["clf.arc_head.b"])
    h_arc_dep = elu(r @ params["clf.arc_dep.w"] + params["clf.arc_dep.b"])
    s_arc = (h_arc_head @ params["clf.w_arc"] @ h_arc_dep.T
             + (h_arc_head @ params["clf.b_arc"]).unsqueeze(1))

    h_tag_head = elu(r @ params["clf.tag_head.w"] + params["clf.tag_head.b"])
    h_tag_dep = elu(r @ params["clf.tag_dep.w"] + params["clf.tag_dep.b"])
    ones = torch.ones(r.shape[0], 1, dtype=r.dtype)
    th = torch.cat([h_tag_head, ones], dim=1)
    td = torch.cat([h_tag_dep, ones], dim=1)
    s_tag = torch.einsum("hi,lij,dj->hdl", th, params["clf.u_label"], td)
    return s_arc, s_tag


def sentence_loss(s_arc: torch.Tensor, s_tag: torch.Tensor,
                  gold: Sentence, model: ParserModel) -> torch.Tensor:
    """Sum over tokens of head cross-entropy (softmax over each dependent's
    candidate-head column) plus label cross-entropy at the gold arc."""
    n = len(gold)
    if s_arc.shape[0] != n + 1:
        raise ContractError("score matrix does not match sentence length")
    head_logp = torch.log_softmax(s_arc, dim=0)       # over candidate heads
    loss = s_arc.new_zeros(())
    for tok in gold.tokens:
        d = tok.index
        h = tok.head
        loss = loss - head_logp[h, d]
        label_logp = torch.log_softmax(s_tag[h, d], dim=0)
        loss = loss - label_logp[model.label_index(tok.deprel)]
    return loss


def encode_sentences(model: ParserModel, sentences: list[Sentence], mask=None,
                     param_override: dict[str, torch.Tensor] | None = None,
                     params: dict[str, torch.Tensor] | None = None):
    """Batched encoder pass; returns a list of per-sentence (n, d) encodings."""
    if not sentences:
        raise UsageError("no sentences to encode")
    cfg = model.state.config
    use_params = params if params is not None else model.state.params
    lengths = [len(s) for s in sentences]
    T = max(lengths)
    ids = torch.zeros(len(sentences), T, dtype=torch.long)
    for b, s in enumerate(sentences):
        ids[b, :len(s)] = torch.tensor(model.word_vocab.ids(s), dtype=torch.long)
    mask_tensor = as_mask_tensor(mask, cfg)
    _, mixed = forward_batch(cfg, use_params, ids, lengths, mask_tensor,
                             param_override=param_override)
    return [mixed[b, :lengths[b]] for b in range(len(sentences))]


def batch_loss(model: ParserModel, sentences: list[Sentence], mask=None,
               param_override: dict[str, torch.Tensor] | None = None,
               params: dict[str, torch.Tensor] | None = None) -> torch.Tensor:
    """Mean over the batch of per-sentence (token-summed) losses."""
    encs = encode_sentences(model, sentences, mask=mask,
                            param_override=param_override, params=params)
    use_params = params if params is not None else model.state.params
    total = None
    for enc, sent in zip(encs, sentences):
        s_arc, s_tag = score(enc, use_params, model.parser_cfg)
        l = sentence_loss(s_arc, s_tag, sent, model)
        total = l if total is None else total + l
    return total / len(sentences)


# ---------------------------------------------------------------------------
# Chu-Liu/Edmonds decoding


def _find_cycle(heads: np.ndarray) -> list[int] | None:
    m = len(heads)
    color = [0] * m       # 0 unvisited, 1 on stack, 2 done
    for start in range(1, m):
        if color[start]:
            continue
        path = []
        v = start
        while v != -1 and color[v] == 0:
            color[v] = 1
            path.append(v)
            v = int(heads[v]) if heads[v] >= 0 else -1
            if v == 0:
                v = -1
        if v != -1 and color[v] == 1:
            cycle = path[path.index(v):]
            for u in path:
                color[u] = 2
            return cycle
        for u in path:
            color[u] = 2
    return None


def _cle_dense(S: np.ndarray) -> np.ndarray:
    """Maximum arborescence over nodes 0..m-1 rooted at 0.

    S[h, d] scores arc h -> d; the diagonal and column 0 must already be
    set to a dominated sentinel. Returns the head array (entry 0 is -1).
    """
    m = S.shape[0]
    heads = np.full(m, -1, dtype=np.int64)
    for d in range(1, m):
        heads[d] = int(np.argmax(S[:, d]))
    cycle = _find_cycle(heads)
    if cycle is None:
        return heads

    cyc = set(cycle)
    rest = [v for v in range(m) if v not in cyc]
    idx = {v: i for i, v in enumerate(rest)}
    c = len(rest)
    # -inf marks forbidden arcs; the root never joins a cycle, so the
    # column maxima used below are always finite and no inf-inf arises.
    S2 = np.full((c + 1, c + 1), -np.inf)
    out_src: dict[int, int] = {}
    in_entry: dict[int, int] = {}
    for a in rest:
        for b in rest:
            if b != 0 and a != b:
                S2[idx[a], idx[b]] = S[a, b]
    for b in rest:
        if b == 0:
            continue
        best_v = max(cyc, key=lambda v: S[v, b])
        S2[c, idx[b]] = S[best_v, b]
        out_src[idx[b]] = best_v
    for a in rest:
        best_gain, best_v = None, None
        for v in cycle:
            gain = S[a, v] - S[int(heads[v]), v]
            if best_gain is None or gain > best_gain:
                best_gain, best_v = gain, v
        S2[idx[a], c] = best_gain
        in_entry[idx[a]] = best_v

    sub = _cle_dense(S2)
    result = np.full(m, -1, dtype=np.int64)
    for b in rest:
        if b == 0:
            continue
        hb = int(sub[idx[b]])
        result[b] = out_src[idx[b]] if hb == c else rest[hb]
    entry_parent = rest[int(sub[c])]
    entry_node = in_entry[int(sub[c])]
    for v in cycle:
        result[v] = int(heads[v])
    result[entry_node] = entry_parent
    return result


def tree_score(scores: np.ndarray, heads: list[int] | np.ndarray) -> float:
    return float(sum(scores[int(h), d + 1] for d, h in enumerate(heads)))


def decode_heads(scores: np.ndarray, single_root: bool = True) -> list[int]:
    """Best-scoring spanning arborescence; heads are returned 0-based-on-root.

    With single_root (the default, matching UD validity) exactly one token
    attaches to the root; the optimum is found exactly by trying each
    candidate root child.
    """
    S = np.asarray(scores, dtype=np.float64)
    m = S.shape[0]
    if S.shape != (m, m) or m < 2:
        raise ContractError("score matrix must be (n+1, n+1) with n >= 1")
    if not np.all(np.isfinite(S)):
        raise ContractError("arc scores must be finite")
    base = S.copy()
    np.fill_diagonal(base, -np.inf)
    base[:, 0] = -np.inf
    if m == 2:
        return [0]
    if not single_root:
        heads = _cle_dense(base)
        return [int(h) for h in heads[1:]]
    best_heads, best_score = None, None
    for r in range(1, m):
        Sr = base.copy()
        Sr[0, :] = -np.inf
        Sr[0, r] = base[0, r]
        heads = _cle_dense(Sr)
        sc = tree_score(S, heads[1:])
        if best_score is None or sc > best_score:
            best_score, best_heads = sc, heads
    return [int(h) for h in best_heads[1:]]


def decode_cle(s_arc, s_tag=None, single_root: bool = True) -> ParseTree:
    """Decode heads with constrained CLE and labels by per-arc argmax."""
    arr = s_arc.detach().numpy() if isinstance(s_arc, torch.Tensor) else np.asarray(s_arc)
    heads = decode_heads(arr, single_root=single_root)
    if s_tag is None:
        labels = [0] * len(heads)
    else:
        tag = s_tag.detach().numpy() if isinstance(s_tag, torch.Tensor) else np.asarray(s_tag)
        labels = [int(np.argmax(tag[h, d + 1])) for d, h in enumerate(heads)]
    return ParseTree(heads=heads, labels=labels)


def predict(model: ParserModel, sentences: list[Sentence], mask=None,
            params: dict[str, torch.Tensor] | None = None,
            param_override: dict[str, torch.Tensor] | None = None) -> list[ParseTree]:
    trees = []
    with torch.no_grad():
        encs = encode_sentences(model, sentences, mask=mask, params=params,
                                param_override=param_override)
        use_params = params if params is not None else model.state.params
        for enc in encs:
            s_arc, s_tag = score(enc, use_params, model.parser_cfg)
            trees.append(decode_cle(s_arc, s_tag))
    return trees


# ---------------------------------------------------------------------------
# Evaluation


def las(pred: list[ParseTree], gold: list[Sentence],
        label_vocab: LabelVocab | None = None) -> tuple[float, float]:
    """Micro-averaged (LAS, UAS) percentages over aligned sentence lists."""
    if len(pred) != len(gold):
        raise ContractError(f"{len(pred)} predictions for {len(gold)} gold sentences")
    total = correct_head = correct_both = 0
    for tree, sent in zip(pred, gold):
        if len(tree.heads) != len(sent):
            raise ContractError(
                f"sentence {sent.source_id!r}: {len(tree.heads)} predicted heads "
                f"for {len(sent)} tokens")
        for tok, h, lab in zip(sent.tokens, tree.heads, tree.labels):
            total += 1
            if h == tok.head:
                correct_head += 1
                if label_vocab is not None and 0 <= lab < len(label_vocab.labels):
                    pred_label = label_vocab.labels[lab]
                else:
                    pred_label = UNK_LABEL
                if pred_label == tok.deprel:
                    correct_both += 1
    if total == 0:
        raise ContractError("no tokens to evaluate")
    return 100.0 * correct_both / total, 100.0 * correct_head / total


def evaluate(model: ParserModel, sentences: list[Sentence], mask=None,
             params: dict[str, torch.Tensor] | None = None,
             param_override: dict[str, torch.Tensor] | None = None) -> tuple[float, float]:
    trees = predict(model, sentences, mask=mask, params=params,
                    param_override=param_override)
    return las(trees, sentences, model.label_vocab)


def predictions_to_conllu(sentences: list[Sentence], trees: list[ParseTree],
                          model: ParserModel) -> str:
    """Gold tokens with HEAD/DEPREL replaced by the predictions."""
    blocks = []
    for sent, tree in zip(sentences, trees):
        lines = []
        for tok, h, lab in zip(sent.tokens, tree.heads, tree.labels):
            lines.append("\t".join([str(tok.index), tok.form, "_", "_", "_", "_",
                                    str(h), model.label_string(lab), "_", "_"]))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n" if blocks else ""


def eval_report(las_pct: float, uas_pct: float, n_tokens: int,
                n_sentences: int) -> str:
    return (f"LAS = {las_pct:.4f}\nUAS = {uas_pct:.4f}\n"
            f"tokens = {n_tokens}\nsentences = {n_sentences}\n")


def eval_report_csv(las_pct: float, uas_pct: float, n_tokens: int,
                    n_sentences: int) -> str:
    return ("las,uas,tokens,sentences\n"
            f"{las_pct:.4f},{uas_pct:.4f},{n_tokens},{n_sentences}\n")


# ---------------------------------------------------------------------------
# Model persistence


def save_model(path: str, model: ParserModel, rng_state: bytes | None = None) -> None:
    meta = {
        "parser_cfg": asdict(model.parser_cfg),
        "word_vocab": model.word_vocab.to_dict(),
        "label_vocab": model.label_vocab.to_dict(),
    }
    save_checkpoint(path, model.state, meta=meta, rng_state=rng_state)


def load_model(path: str) -> tuple[ParserModel, bytes | None]:
    state, meta, rng = load_checkpoint(path)
    model = ParserModel(
        state=state,
        parser_cfg=ParserConfig(**meta["parser_cfg"]),
        word_vocab=WordVocab.from_dict(meta["word_vocab"]),
        label_vocab=LabelVocab.from_dict(meta["label_vocab"]),
    )
    return model, rng
