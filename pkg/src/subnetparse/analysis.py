"""Gradient-conflict statistics, correlation analysis, and report emission.

A conflict is a pair of per-language gradients with strictly negative cosine
similarity; orthogonal gradients do not count. Reports are plain CSV with a
fixed column order and 4-decimal float formatting so identical inputs yield
byte-identical files.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _scipy_stats

from .errors import UsageError
from .treebank import LabelVocab, Sentence, classify_label_rarity


def pairwise_cosines(grads: dict[str, np.ndarray]):
    """Cosine similarity for every unordered language pair.

    Returns (cosines, excluded): cosines maps (a, b) with a < b to the
    cosine; pairs involving a zero-norm vector are excluded and listed.
    """
    langs = sorted(grads)
    norms = {}
    for lang in langs:
        v = np.asarray(grads[lang], dtype=np.float64)
        norms[lang] = float(np.linalg.norm(v))
    lengths = {len(np.asarray(grads[l]).reshape(-1)) for l in langs}
    if len(lengths) > 1:
        raise UsageError(f"gradient vectors differ in length: {sorted(lengths)}")
    cosines: dict[tuple[str, str], float] = {}
    excluded: list[tuple[str, str]] = []
    for i, a in enumerate(langs):
        for b in langs[i + 1:]:
            if norms[a] == 0.0 or norms[b] == 0.0:
                excluded.append((a, b))
                continue
            dot = float(np.dot(np.asarray(grads[a], dtype=np.float64).reshape(-1),
                               np.asarray(grads[b], dtype=np.float64).reshape(-1)))
            cosines[(a, b)] = dot / (norms[a] * norms[b])
    return cosines, excluded


@dataclass
class ConflictTrace:
    """Per-iteration pairwise cosine records, keyed 'langA|langB'."""

    iterations: list[dict[str, float]]
    window: int = 50

    def __len__(self) -> int:
        return len(self.iterations)

    @classmethod
    def from_cosine_iterations(cls, iterations: list[dict[str, float]],
                               window: int = 50) -> "ConflictTrace":
        return cls(iterations=iterations, window=window)


@dataclass
class ConflictReport:
    conflict_pct: float
    mean_cosine: float
    per_pair: dict[str, tuple[float, float]] = field(default_factory=dict)
    n_cosines: int = 0


def conflict_stats(trace: ConflictTrace) -> ConflictReport:
    """Conflict percentage and mean cosine over the trailing window."""
    if trace.window < 1:
        raise UsageError("window must be >= 1")
    if trace.window > len(trace.iterations):
        raise UsageError(
            f"window {trace.window} exceeds trace length {len(trace.iterations)}")
    tail = trace.iterations[-trace.window:]
    values: list[float] = []
    per_pair_values: dict[str, list[float]] = {}
    for rec in tail:
        for pair, cos in rec.items():
            values.append(cos)
            per_pair_values.setdefault(pair, []).append(cos)
    if not values:
        raise UsageError("no cosine records inside the window")
    arr = np.asarray(values)
    per_pair = {
        pair: (100.0 * float(np.mean(np.asarray(v) < 0)), float(np.mean(v)))
        for pair, v in sorted(per_pair_values.items())
    }
    return ConflictReport(
        conflict_pct=100.0 * float(np.mean(arr < 0)),
        mean_cosine=float(np.mean(arr)),
        per_pair=per_pair,
        n_cosines=len(values))


def per_iteration_stats(trace: ConflictTrace):
    """(conflict_pct[t], mean_cosine[t]) per iteration, over that iteration's pairs."""
    pcts, means = [], []
    for rec in trace.iterations:
        vals = np.asarray(list(rec.values()), dtype=np.float64)
        if len(vals) == 0:
            pcts.append(np.nan)
            means.append(np.nan)
        else:
            pcts.append(100.0 * float(np.mean(vals < 0)))
            means.append(float(np.mean(vals)))
    return np.asarray(pcts), np.asarray(means)


def build_delta_series(method_trace: ConflictTrace, baseline_trace: ConflictTrace):
    """Per-iteration (conflict decrease, cosine increase) of a method relative
    to its baseline run, aligned by iteration index."""
    n = min(len(method_trace), len(baseline_trace))
    if n < 3:
        raise UsageError("need at least 3 aligned iterations")
    m_pct, m_cos = per_iteration_stats(
        ConflictTrace(method_trace.iterations[:n], method_trace.window))
    b_pct, b_cos = per_iteration_stats(
        ConflictTrace(baseline_trace.iterations[:n], baseline_trace.window))
    return b_pct - m_pct, m_cos - b_cos


def pearson_conflict_similarity(conflict_deltas, cosine_deltas) -> tuple[float, float]:
    """Pearson r between the two series and its two-sided p-value (t-test
    with n-2 degrees of freedom)."""
    x = np.asarray(conflict_deltas, dtype=np.float64)
    y = np.asarray(cosine_deltas, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise UsageError("series must be 1-D and equally long")
    n = len(x)
    if n < 3:
        raise UsageError("need at least 3 points for a correlation")
    xd = x - x.mean()
    yd = y - y.mean()
    sx = float(np.sqrt(np.sum(xd * xd)))
    sy = float(np.sqrt(np.sum(yd * yd)))
    if sx == 0.0 or sy == 0.0:
        raise UsageError("correlation undefined for a zero-variance series")
    r = float(np.sum(xd * yd) / (sx * sy))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * float(_scipy_stats.t.sf(abs(t), df=n - 2))
    return r, p


# ---------------------------------------------------------------------------
# Rare / unseen label accounting


@dataclass
class RareUnseenCounts:
    category: str                     # "rare" or "unseen"
    correct: int
    total: int
    labels_correct: set[str] = field(default_factory=set)
    languages_correct: set[str] = field(default_factory=set)

    @property
    def pct(self) -> float:
        return 100.0 * self.correct / self.total if self.total else 0.0


def count_rare_unseen(pred_trees, gold_sents: list[Sentence],
                      train_vocab: LabelVocab, label_vocab: LabelVocab,
                      threshold: float = 0.001) -> dict[str, RareUnseenCounts]:
    """How often gold tokens whose label is rare/unseen in the training data
    received the correct label prediction."""
    test_labels = {t.deprel for s in gold_sents for t in s.tokens}
    rarity = classify_label_rarity(train_vocab, test_labels, threshold=threshold)
    out = {c: RareUnseenCounts(category=c, correct=0, total=0)
           for c in ("rare", "unseen")}
    for tree, sent in zip(pred_trees, gold_sents):
        for tok, lab in zip(sent.tokens, tree.labels):
            cls = rarity[tok.deprel]
            if cls == "seen":
                continue
            bucket = out[cls]
            bucket.total += 1
            pred_label = (label_vocab.labels[lab]
                          if 0 <= lab < len(label_vocab.labels) else None)
            if pred_label == tok.deprel:
                bucket.correct += 1
                bucket.labels_correct.add(tok.deprel)
                bucket.languages_correct.add(sent.language)
    return out


# ---------------------------------------------------------------------------
# Report emission


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(",".join(header) + "\n")
            for row in rows:
                f.write(",".join(_fmt(v) for v in row) + "\n")
    except OSError as e:
        raise UsageError(f"cannot write report file {path}: {e}") from None


@dataclass
class ExperimentResults:
    """Everything emit_report knows how to serialize.

    las_rows: dicts with test_lang / method / framework / seed / las / uas.
    conflict_rows: dicts with framework / method / seed / conflict_pct /
        mean_cosine / window (optionally pair).
    rare_unseen_rows: dicts with framework / method plus RareUnseenCounts
        fields.
    """

    las_rows: list[dict] = field(default_factory=list)
    conflict_rows: list[dict] = field(default_factory=list)
    rare_unseen_rows: list[dict] = field(default_factory=list)


def winners_summary(las_rows: list[dict]):
    """Mean LAS per (framework, method) and the share of test languages on
    which each model is best (ties credit every tied model)."""
    mean_las: dict[tuple[str, str, str], list[float]] = {}
    for row in las_rows:
        key = (row["test_lang"], row["framework"], row["method"])
        mean_las.setdefault(key, []).append(float(row["las"]))
    per_lang: dict[str, dict[tuple[str, str], float]] = {}
    for (lang, fw, method), vals in mean_las.items():
        per_lang.setdefault(lang, {})[(fw, method)] = sum(vals) / len(vals)
    models = sorted({(fw, m) for scores in per_lang.values() for fw, m in scores})
    wins = {m: 0 for m in models}
    best_rows = []
    for lang in sorted(per_lang):
        scores = per_lang[lang]
        top = max(scores.values())
        for m in models:
            if m in scores and scores[m] == top:
                wins[m] += 1
        best = sorted(m for m in scores if scores[m] == top)[0]
        best_rows.append([lang, best[0], best[1], top])
    n_langs = len(per_lang)
    summary_rows = []
    for fw, method in models:
        vals = [v[(fw, method)] for v in per_lang.values() if (fw, method) in v]
        summary_rows.append([fw, method, sum(vals) / len(vals),
                             100.0 * wins[(fw, method)] / n_langs])
    return summary_rows, best_rows


def density_rows(las_rows: list[dict], baseline_method: str = "full"):
    """Relative LAS change of each method against the same-framework baseline."""
    mean: dict[tuple[str, str, str], list[float]] = {}
    for row in las_rows:
        key = (row["test_lang"], row["framework"], row["method"])
        mean.setdefault(key, []).append(float(row["las"]))
    avg = {k: sum(v) / len(v) for k, v in mean.items()}
    rows = []
    for (lang, fw, method) in sorted(avg):
        if method == baseline_method:
            continue
        base = avg.get((lang, fw, baseline_method))
        if base is None:
            continue
        rows.append([lang, fw, method, avg[(lang, fw, method)] - base])
    return rows


def emit_report(results: ExperimentResults, out_dir: str) -> list[str]:
    """Write the CSV report bundle; returns the created file paths."""
    if not (results.las_rows or results.conflict_rows or results.rare_unseen_rows):
        raise UsageError("no results to report")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    if results.las_rows:
        path = os.path.join(out_dir, "results.csv")
        rows = [[r["test_lang"], r["method"], r["framework"], r["seed"],
                 float(r["las"]), float(r["uas"])]
                for r in sorted(results.las_rows,
                                key=lambda r: (r["test_lang"], r["framework"],
                                               r["method"], r["seed"]))]
        _write_csv(path, ["test_lang", "method", "framework", "seed", "las", "uas"], rows)
        written.append(path)

        summary_rows, best_rows = winners_summary(results.las_rows)
        path = os.path.join(out_dir, "winners.csv")
        _write_csv(path, ["framework", "method", "mean_las", "best_pct"], summary_rows)
        written.append(path)
        path = os.path.join(out_dir, "per_language_best.csv")
        _write_csv(path, ["test_lang", "framework", "method", "las"], best_rows)
        written.append(path)

        dens = density_rows(results.las_rows)
        if dens:
            path = os.path.join(out_dir, "density.csv")
            _write_csv(path, ["test_lang", "framework", "method", "delta_las"], dens)
            written.append(path)

    if results.conflict_rows:
        path = os.path.join(out_dir, "conflicts.csv")
        rows = [[r["framework"], r["method"], r["seed"], r.get("pair", "ALL"),
                 float(r["conflict_pct"]), float(r["mean_cosine"]),
                 int(r.get("window", 50))]
                for r in sorted(results.conflict_rows,
                                key=lambda r: (r["framework"], r["method"],
                                               str(r["seed"]), r.get("pair", "ALL")))]
        _write_csv(path, ["framework", "method", "seed", "pair", "conflict_pct",
                          "mean_cosine", "window"], rows)
        written.append(path)

    if results.rare_unseen_rows:
        path = os.path.join(out_dir, "rare_unseen.csv")
        rows = [[r["framework"], r["method"], r["category"], int(r["correct"]),
                 int(r["total"]), float(r["pct"]), int(r["n_labels"]),
                 int(r["n_languages"])]
                for r in sorted(results.rare_unseen_rows,
                                key=lambda r: (r["framework"], r["method"],
                                               r["category"]))]
        _write_csv(path, ["framework", "method", "category", "correct", "total",
                          "pct", "n_labels", "n_languages"], rows)
        written.append(path)
    return written
