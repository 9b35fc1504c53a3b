"""Treebank ingestion, label vocabularies, sampling, and synthetic toy languages.

CoNLL-U handling follows UD conventions: 10 tab-separated columns, `#`
comments, multiword-token ranges (`n-m`) and empty nodes (`n.m`) skipped.
Only the ID / FORM / HEAD / DEPREL columns are interpreted.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, UsageError

SPLITS = ("train", "dev", "test")

WORD_ORDERS = ("SVO", "SOV", "VSO")
ADPOSITIONS = ("pre", "post")

CORE_LABELS = ("root", "nsubj", "obj")
OPTIONAL_LABELS = ("advmod", "amod", "case", "ccomp", "det", "mark", "nmod", "obl")


@dataclass(frozen=True)
class Token:
    index: int          # 1-based position in the sentence
    form: str
    head: int           # 0 = root, otherwise 1-based index of the head token
    deprel: str


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[Token, ...]
    language: str
    source_id: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def heads(self) -> list[int]:
        return [t.head for t in self.tokens]

    @property
    def deprels(self) -> list[str]:
        return [t.deprel for t in self.tokens]

    @property
    def forms(self) -> list[str]:
        return [t.form for t in self.tokens]


@dataclass(frozen=True)
class Treebank:
    language: str
    split: str
    sentences: tuple[Sentence, ...]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise UsageError(f"split must be one of {SPLITS}, got {self.split!r}")

    def __len__(self) -> int:
        return len(self.sentences)


@dataclass
class LabelVocab:
    labels: list[str]                 # unique, first-seen order
    counts: dict[str, int]

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "counts": dict(self.counts)}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelVocab":
        return cls(labels=list(d["labels"]), counts={k: int(v) for k, v in d["counts"].items()})


@dataclass
class LanguageMeta:
    code: str
    typo_vector: np.ndarray
    mask_path: str | None = None


@dataclass(frozen=True)
class ToyGrammarSpec:
    word_order: str = "SVO"
    adposition: str = "pre"
    vocab_seed: int = 0
    label_inventory: tuple[str, ...] = CORE_LABELS + OPTIONAL_LABELS
    noise_rate: float = 0.0

    def __post_init__(self):
        if self.word_order not in WORD_ORDERS:
            raise UsageError(f"word_order must be one of {WORD_ORDERS}")
        if self.adposition not in ADPOSITIONS:
            raise UsageError(f"adposition must be one of {ADPOSITIONS}")
        if not (0.0 <= self.noise_rate <= 1.0):
            raise UsageError("noise_rate must lie in [0, 1]")
        if not self.label_inventory:
            raise UsageError("label_inventory must be nonempty")


# ---------------------------------------------------------------------------
# Tree validity


def check_heads_form_tree(heads: list[int]) -> str | None:
    """Return None if `heads` is a single-rooted tree, else a description.

    Checked by explicit DFS from the root: every token must be reached
    exactly once and exactly one token may attach to the root.
    """
    n = len(heads)
    if n == 0:
        return "empty sentence"
    for i, h in enumerate(heads, start=1):
        if not (0 <= h <= n):
            return f"token {i} has head {h} outside [0, {n}]"
        if h == i:
            return f"token {i} is its own head"
    roots = [i for i, h in enumerate(heads, start=1) if h == 0]
    if len(roots) == 0:
        return "no token attaches to the root"
    if len(roots) > 1:
        return f"multiple tokens attach to the root: {roots}"
    children: dict[int, list[int]] = {i: [] for i in range(n + 1)}
    for i, h in enumerate(heads, start=1):
        children[h].append(i)
    seen = set()
    stack = [0]
    while stack:
        node = stack.pop()
        for c in children[node]:
            if c in seen:
                return f"token {c} reached twice (cycle)"
            seen.add(c)
            stack.append(c)
    if len(seen) != n:
        missing = sorted(set(range(1, n + 1)) - seen)
        return f"tokens {missing} unreachable from root (cycle)"
    return None


def validate_sentence(sent: Sentence) -> None:
    for t in sent.tokens:
        if not t.deprel:
            raise DataError(f"sentence {sent.source_id!r}: token {t.index} has empty deprel")
    problem = check_heads_form_tree(sent.heads)
    if problem is not None:
        raise DataError(f"sentence {sent.source_id!r}: {problem}")


# ---------------------------------------------------------------------------
# CoNLL-U


def _is_skipped_id(tok_id: str) -> bool:
    return "-" in tok_id or "." in tok_id


def parse_conllu(text: str, language: str, split: str) -> Treebank:
    """Parse CoNLL-U text into a validated Treebank."""
    sentences: list[Sentence] = []
    tokens: list[Token] = []
    sent_no = 1

    def flush():
        nonlocal tokens, sent_no
        if tokens:
            sent = Sentence(tokens=tuple(tokens), language=language,
                            source_id=f"{language}-{split}-{sent_no}")
            validate_sentence(sent)
            sentences.append(sent)
            tokens = []
            sent_no += 1

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.rstrip("\n")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise DataError(f"line {lineno}: expected 10 tab-separated columns, got {len(cols)}")
        tok_id = cols[0]
        if _is_skipped_id(tok_id):
            continue
        try:
            index = int(tok_id)
        except ValueError:
            raise DataError(f"line {lineno}: non-integer token ID {tok_id!r}") from None
        try:
            head = int(cols[6])
        except ValueError:
            raise DataError(f"line {lineno}: non-integer HEAD {cols[6]!r}") from None
        expected = len(tokens) + 1
        if index != expected:
            raise DataError(f"line {lineno}: token ID {index} out of order (expected {expected})")
        tokens.append(Token(index=index, form=cols[1], head=head, deprel=cols[7]))
    flush()
    return Treebank(language=language, split=split, sentences=tuple(sentences))


def read_conllu(path: str, language: str, split: str) -> Treebank:
    with open(path, encoding="utf-8") as f:
        return parse_conllu(f.read(), language, split)


def sentence_to_conllu(sent: Sentence) -> str:
    lines = []
    for t in sent.tokens:
        lines.append("\t".join([str(t.index), t.form, "_", "_", "_", "_",
                                str(t.head), t.deprel, "_", "_"]))
    return "\n".join(lines)


def to_conllu(treebank: Treebank) -> str:
    """Serialize ID/FORM/HEAD/DEPREL; other columns written as `_`."""
    blocks = [sentence_to_conllu(s) for s in treebank.sentences]
    return "\n\n".join(blocks) + "\n" if blocks else ""


def write_conllu(treebank: Treebank, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(to_conllu(treebank))


# ---------------------------------------------------------------------------
# Label vocabulary and rarity


def build_label_vocab(treebanks: list[Treebank]) -> LabelVocab:
    """Union of deprels over all input treebanks, first-seen order."""
    if not treebanks:
        raise UsageError("build_label_vocab needs at least one treebank")
    labels: list[str] = []
    counts: dict[str, int] = {}
    for tb in treebanks:
        for sent in tb.sentences:
            for tok in sent.tokens:
                if tok.deprel not in counts:
                    labels.append(tok.deprel)
                    counts[tok.deprel] = 0
                counts[tok.deprel] += 1
    return LabelVocab(labels=labels, counts=counts)


def classify_label_rarity(vocab: LabelVocab, test_labels: set[str],
                          threshold: float = 0.001) -> dict[str, str]:
    """Partition test labels into seen / rare / unseen against training counts.

    A label is rare iff present with count/total strictly below the
    threshold (0.1% by default), unseen iff absent entirely.
    """
    total = vocab.total
    if total <= 0:
        raise UsageError("label vocab has no counted instances")
    out = {}
    for label in test_labels:
        if label not in vocab.counts:
            out[label] = "unseen"
        elif vocab.counts[label] / total < threshold:
            out[label] = "rare"
        else:
            out[label] = "seen"
    return out


@dataclass
class WordVocab:
    """Word-level vocabulary for the encoder: 0 = padding, 1 = unknown."""

    forms: list[str]                  # first-seen order, excludes PAD/UNK
    PAD: int = 0
    UNK: int = 1

    def __post_init__(self):
        self._index = {f: i + 2 for i, f in enumerate(self.forms)}

    @property
    def size(self) -> int:
        return len(self.forms) + 2

    def id(self, form: str) -> int:
        return self._index.get(form, self.UNK)

    def ids(self, sent: Sentence) -> list[int]:
        return [self.id(t.form) for t in sent.tokens]

    def to_dict(self) -> dict:
        return {"forms": list(self.forms)}

    @classmethod
    def from_dict(cls, d: dict) -> "WordVocab":
        return cls(forms=list(d["forms"]))


def build_word_vocab(treebanks: list[Treebank], min_count: int = 1) -> WordVocab:
    if not treebanks:
        raise UsageError("build_word_vocab needs at least one treebank")
    counts: dict[str, int] = {}
    order: list[str] = []
    for tb in treebanks:
        for sent in tb.sentences:
            for tok in sent.tokens:
                if tok.form not in counts:
                    order.append(tok.form)
                    counts[tok.form] = 0
                counts[tok.form] += 1
    return WordVocab(forms=[f for f in order if counts[f] >= min_count])


# ---------------------------------------------------------------------------
# Sampling


def sample_sentences(treebank: Treebank, n: int, seed: int,
                     without_replacement: bool = True) -> list[Sentence]:
    """Seed-deterministic sample of n sentences."""
    rng = random.Random(seed)
    pool = list(treebank.sentences)
    if without_replacement:
        if n > len(pool):
            raise UsageError(f"cannot draw {n} of {len(pool)} sentences without replacement")
        order = list(range(len(pool)))
        rng.shuffle(order)
        return [pool[i] for i in order[:n]]
    if not pool:
        raise UsageError("cannot sample from an empty treebank")
    return [pool[rng.randrange(len(pool))] for _ in range(n)]


def epoch_batches(sentences: list[Sentence] | tuple[Sentence, ...], batch_size: int, seed: int):
    """Yield successive disjoint batches of a seeded permutation (one epoch)."""
    rng = random.Random(seed)
    order = list(range(len(sentences)))
    rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        yield [sentences[i] for i in order[start:start + batch_size]]


# ---------------------------------------------------------------------------
# Toy grammar generation

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

_LEXICON_SIZES = {"noun": 20, "verb": 12, "adj": 8, "det": 3, "adp": 4,
                  "adv": 5, "mark": 2, "gen": 1}
# verbs sharing a surface form with a noun force contextual disambiguation
_SHARED_VERB_FORMS = 4


def _make_lexicon(vocab_seed: int) -> dict[str, list[str]]:
    rng = random.Random(vocab_seed)
    used: set[str] = set()
    lexicon: dict[str, list[str]] = {}
    for cat, size in _LEXICON_SIZES.items():
        words = []
        while len(words) < size:
            n_syll = rng.choice((2, 2, 3))
            w = "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(n_syll))
            if w not in used:
                used.add(w)
                words.append(w)
        lexicon[cat] = words
    for i in range(_SHARED_VERB_FORMS):
        lexicon["verb"][i] = lexicon["noun"][i]
    return lexicon


def toy_typo_vector(spec: ToyGrammarSpec) -> np.ndarray:
    """Binary feature indicators: word order, adposition side, optional labels."""
    feats = [1.0 if spec.word_order == wo else 0.0 for wo in WORD_ORDERS]
    feats += [1.0 if spec.adposition == a else 0.0 for a in ADPOSITIONS]
    inv = set(spec.label_inventory)
    feats += [1.0 if lab in inv else 0.0 for lab in OPTIONAL_LABELS]
    return np.asarray(feats, dtype=np.float64)


def toy_language_code(spec: ToyGrammarSpec) -> str:
    return f"toy-{spec.word_order.lower()}-{spec.adposition}-{spec.vocab_seed}"


class _Draft:
    """Mutable token under construction; indices assigned at the end."""

    __slots__ = ("form", "head", "deprel")

    def __init__(self, form: str, head, deprel: str):
        self.form = form
        self.head = head        # None for root verb, else another _Draft
        self.deprel = deprel


def _gen_sentence(spec: ToyGrammarSpec, rng: random.Random,
                  lexicon: dict[str, list[str]], language: str, sid: str) -> Sentence:
    """One clause, optionally with an embedded complement clause.

    The grammar is built so that head and label decisions require context
    beyond the word pair itself: objects and obliques attach to the same
    verb and are told apart only by the oblique's case adposition, genitive
    modifiers are marked by a clitic, several verb forms are homonymous
    with nouns, and object/oblique order is randomized within the clause.
    """
    inv = set(spec.label_inventory)

    def pick(cat: str) -> str:
        return lexicon[cat][rng.randrange(_LEXICON_SIZES[cat])]

    def case_wrap(phrase: list[_Draft], marker: _Draft) -> list[_Draft]:
        return ([marker] + phrase) if spec.adposition == "pre" else (phrase + [marker])

    def noun_phrase(head, rel: str, allow_gen: bool) -> list[_Draft]:
        noun = _Draft(pick("noun"), head, rel)
        phrase = []
        if "det" in inv and rng.random() < 0.5:
            phrase.append(_Draft(pick("det"), noun, "det"))
        if "amod" in inv and rng.random() < 0.35:
            phrase.append(_Draft(pick("adj"), noun, "amod"))
            if rng.random() < 0.15:
                phrase.append(_Draft(pick("adj"), noun, "amod"))
        phrase.append(noun)
        if allow_gen and "nmod" in inv and "case" in inv and rng.random() < 0.3:
            gen_noun = _Draft(pick("noun"), noun, "nmod")
            marker = _Draft(lexicon["gen"][0], gen_noun, "case")
            gen = case_wrap([gen_noun], marker)
            # genitive phrase sits next to its head noun, marker side first
            phrase = gen + phrase if spec.adposition == "pre" else phrase + gen
        return phrase

    def clause(head, rel: str, embed: bool) -> list[_Draft]:
        verb = _Draft(pick("verb"), head, rel)
        subj = noun_phrase(verb, "nsubj", allow_gen=embed)
        verb_block = [verb]
        if "advmod" in inv and rng.random() < 0.25:
            verb_block.insert(0, _Draft(pick("adv"), verb, "advmod"))

        args: list[list[_Draft]] = []
        if embed or rng.random() < 0.5:       # main clause always has an object
            args.append(noun_phrase(verb, "obj", allow_gen=embed))
        if embed and "obl" in inv and "case" in inv and rng.random() < 0.5:
            obl = noun_phrase(verb, "obl", allow_gen=False)
            obl_noun = next(d for d in obl if d.deprel == "obl")
            args.append(case_wrap(obl, _Draft(pick("adp"), obl_noun, "case")))
        if len(args) == 2 and rng.random() < 0.5:
            args.reverse()
        arg_block = [d for a in args for d in a]

        if spec.word_order == "SVO":
            out = subj + verb_block + arg_block
        elif spec.word_order == "SOV":
            out = subj + arg_block + verb_block
        else:  # VSO
            out = verb_block + subj + arg_block

        if embed and "ccomp" in inv and "mark" in inv and rng.random() < 0.3:
            sub_verb_clause = clause(verb, "ccomp", embed=False)
            sub_verb = next(d for d in sub_verb_clause
                            if d.head is verb and d.deprel == "ccomp")
            out = out + [_Draft(pick("mark"), sub_verb, "mark")] + sub_verb_clause
        return out

    drafts = clause(None, "root", embed=True)

    if spec.noise_rate > 0 and rng.random() < spec.noise_rate and len(drafts) > 1:
        i = rng.randrange(len(drafts) - 1)
        drafts[i], drafts[i + 1] = drafts[i + 1], drafts[i]

    positions = {id(d): i + 1 for i, d in enumerate(drafts)}
    tokens = tuple(
        Token(index=i + 1, form=d.form,
              head=0 if d.head is None else positions[id(d.head)],
              deprel=d.deprel)
        for i, d in enumerate(drafts)
    )
    return Sentence(tokens=tokens, language=language, source_id=sid)


def gen_toy_treebank(spec: ToyGrammarSpec, n_sentences: int, seed: int,
                     language: str | None = None, split: str = "train") -> Treebank:
    """Generate a synthetic treebank whose structure follows the grammar spec.

    Structural choices (templates, lexeme indices, noise) come from `seed`;
    surface forms come from the lexicon derived from `spec.vocab_seed` only,
    so two specs differing only in vocab_seed produce identical trees.
    """
    if n_sentences < 1:
        raise UsageError("n_sentences must be >= 1")
    lang = language if language is not None else toy_language_code(spec)
    lexicon = _make_lexicon(spec.vocab_seed)
    rng = random.Random(seed)
    sents = []
    for i in range(n_sentences):
        sent = _gen_sentence(spec, rng, lexicon, lang, sid=f"{lang}-{split}-{i + 1}")
        validate_sentence(sent)
        sents.append(sent)
    return Treebank(language=lang, split=split, sentences=tuple(sents))


# ---------------------------------------------------------------------------
# Language vectors


def load_language_vectors(path: str) -> dict[str, LanguageMeta]:
    """Load `lang,f1,...,fK` CSV into LanguageMeta entries."""
    metas: dict[str, LanguageMeta] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty language-vector file") from None
        width = len(header)
        if width < 2 or header[0] != "lang":
            raise DataError(f"{path}: header must be 'lang,f1,...,fK'")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}: row {rowno} has {len(row)} cells, expected {width}")
            code = row[0]
            if code in metas:
                raise DataError(f"{path}: duplicate language code {code!r} at row {rowno}")
            try:
                vec = np.asarray([float(x) for x in row[1:]], dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell at row {rowno}") from None
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{path}: non-finite value at row {rowno}")
            metas[code] = LanguageMeta(code=code, typo_vector=vec)
    return metas


def write_language_vectors(path: str, metas: dict[str, LanguageMeta]) -> None:
    dims = {len(m.typo_vector) for m in metas.values()}
    if len(dims) > 1:
        raise UsageError(f"inconsistent vector lengths: {sorted(dims)}")
    k = dims.pop() if dims else 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["lang"] + [f"f{i + 1}" for i in range(k)])
        for code in sorted(metas):
            writer.writerow([code] + [repr(float(v)) for v in metas[code].typo_vector])
