"""Automatic evaluation: ROUGE-1/2/L, readability scores, abstractiveness,
and the statistics used for significance marks and judge agreement.

All text measures share the package tokenizer and sentence splitter.  ROUGE
is computed on lowercased tokens with no stemming and no stopword removal.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .corpus import familiar_words, sentence_texts, token_surfaces, word_ranks
from .errors import GraphlayError

# ---------------------------------------------------------------------------
# ROUGE


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if (p + r) > 0 else 0.0


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _words(text: str) -> list[str]:
    return [t.lower() for t in token_surfaces(text)]


def rouge_n(candidate: str, reference: str, n: int) -> RougeScore:
    """Clipped n-gram overlap P/R/F1 on a 0-100 scale."""
    if n not in (1, 2):
        raise GraphlayError("rouge_n supports n in {1, 2}")
    cand = _ngrams(_words(candidate), n)
    ref = _ngrams(_words(reference), n)
    overlap = sum((cand & ref).values())
    p = overlap / max(1, sum(cand.values())) if cand else 0.0
    r = overlap / max(1, sum(ref.values())) if ref else 0.0
    return RougeScore(100 * p, 100 * r, 100 * _f1(p, r))


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> RougeScore:
    """LCS-based P/R/F1 on a 0-100 scale."""
    cand = _words(candidate)
    ref = _words(reference)
    lcs = _lcs_length(cand, ref)
    p = lcs / len(cand) if cand else 0.0
    r = lcs / len(ref) if ref else 0.0
    return RougeScore(100 * p, 100 * r, 100 * _f1(p, r))


# ---------------------------------------------------------------------------
# Readability

_VOWELS = frozenset("aeiouy")


def syllables(word: str) -> int:
    """Vowel-group syllable heuristic.

    Counts maximal runs of a/e/i/o/u/y, subtracts a word-final silent "e"
    unless the word ends in consonant+"le", and never returns less than 1.
    """
    w = "".join(ch for ch in word.lower() if ch.isalpha())
    if not w:
        return 1
    count = 0
    prev_vowel = False
    for ch in w:
        is_vowel = ch in _VOWELS
        if is_vowel and not prev_vowel:
            count += 1
        prev_vowel = is_vowel
    if w.endswith("e"):
        consonant_le = len(w) >= 3 and w.endswith("le") and w[-3] not in _VOWELS
        if not consonant_le:
            count -= 1
    return max(1, count)


def _counts(text: str) -> tuple[list[str], int]:
    words = token_surfaces(text)
    if not words:
        raise GraphlayError("readability metrics require at least one word")
    n_sentences = max(1, len(sentence_texts(text)))
    return words, n_sentences


def fkgl(text: str) -> float:
    """Flesch-Kincaid grade level."""
    words, n_sent = _counts(text)
    n_syll = sum(syllables(w) for w in words)
    return 0.39 * (len(words) / n_sent) + 11.8 * (n_syll / len(words)) - 15.59


def cli_index(text: str) -> float:
    """Coleman-Liau index; L and S are letters / sentences per 100 words."""
    words, n_sent = _counts(text)
    letters = sum(1 for w in words for ch in w if ch.isalpha())
    L = 100.0 * letters / len(words)
    S = 100.0 * n_sent / len(words)
    return 0.0588 * L - 0.296 * S - 15.8


def _is_numeral(word: str) -> bool:
    return any(ch.isdigit() for ch in word) and not any(ch.isalpha() for ch in word)


def dcrs(text: str, familiar_word_list: Iterable[str] | None = None) -> float:
    """Dale-Chall readability score with the +3.6365 adjustment above 5%
    difficult words; numerals always count as familiar."""
    familiar = frozenset(familiar_word_list) if familiar_word_list is not None else familiar_words()
    words, n_sent = _counts(text)
    difficult = sum(1 for w in words if w.lower() not in familiar and not _is_numeral(w))
    pct_difficult = 100.0 * difficult / len(words)
    score = 0.1579 * pct_difficult + 0.0496 * (len(words) / n_sent)
    if pct_difficult > 5.0:
        score += 3.6365
    return score


def wordrank(text: str, freq_ranked_list: Sequence[str] | Mapping[str, int] | None = None) -> float:
    """Mean log2 frequency rank of the tokens; unknown tokens take the rank
    equal to the list length."""
    if freq_ranked_list is None:
        ranks: Mapping[str, int] = word_ranks()
        fallback = len(ranks)
    elif isinstance(freq_ranked_list, Mapping):
        ranks = freq_ranked_list
        fallback = len(ranks)
    else:
        ranks = {w: i + 1 for i, w in enumerate(freq_ranked_list)}
        fallback = len(freq_ranked_list)
    words = token_surfaces(text)
    if not words:
        raise GraphlayError("wordrank requires at least one word")
    total = sum(math.log2(ranks.get(w.lower(), fallback)) for w in words)
    return total / len(words)


def abstractiveness(summary: str, source: str) -> float:
    """Percent of summary unigram types absent from the source token set."""
    summary_types = set(_words(summary))
    if not summary_types:
        return 0.0
    source_types = set(_words(source))
    novel = summary_types - source_types
    return 100.0 * len(novel) / len(summary_types)


# ---------------------------------------------------------------------------
# Statistics

_EXACT_LIMIT = 12


def _u_statistic(a: Sequence[float], b: Sequence[float]) -> float:
    u = 0.0
    for x in a:
        for y in b:
            if x > y:
                u += 1.0
            elif x == y:
                u += 0.5
    return u


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided Mann-Whitney U test.

    Returns (U of the first sample, p).  Uses exact enumeration over all
    assignments of the pooled values when len(a)+len(b) <= 12, otherwise a
    tie-corrected normal approximation (no continuity correction).
    """
    if not a or not b:
        raise GraphlayError("mann_whitney_u requires two non-empty samples")
    n1, n2 = len(a), len(b)
    u_obs = _u_statistic(a, b)
    if n1 + n2 <= _EXACT_LIMIT:
        pooled = list(a) + list(b)
        # Compare doubled deviations from the mean as exact integers.
        dev_obs = abs(round(2 * u_obs) - n1 * n2)
        hits = 0
        total = 0
        for combo in itertools.combinations(range(n1 + n2), n1):
            combo_set = set(combo)
            ga = [pooled[i] for i in combo]
            gb = [pooled[i] for i in range(n1 + n2) if i not in combo_set]
            dev = abs(round(2 * _u_statistic(ga, gb)) - n1 * n2)
            total += 1
            if dev >= dev_obs:
                hits += 1
        return u_obs, hits / total
    pooled = sorted(a) + sorted(b)
    counts = Counter(list(a) + list(b))
    n = n1 + n2
    tie_term = sum(c**3 - c for c in counts.values())
    correction = 1.0 - tie_term / (n**3 - n)
    sigma_sq = correction * n1 * n2 * (n + 1) / 12.0
    if sigma_sq <= 0:
        return u_obs, 1.0
    z = (u_obs - n1 * n2 / 2.0) / math.sqrt(sigma_sq)
    return u_obs, min(1.0, 2.0 * _normal_sf(abs(z)))


def cohens_kappa(r1: Sequence[int], r2: Sequence[int]) -> float:
    """Chance-corrected agreement for two binary raters."""
    if len(r1) != len(r2):
        raise GraphlayError("cohens_kappa requires equal-length ratings")
    if not r1:
        raise GraphlayError("cohens_kappa requires at least one rating")
    n = len(r1)
    p_o = sum(1 for x, y in zip(r1, r2) if x == y) / n
    p1a = sum(r1) / n
    p1b = sum(r2) / n
    p_e = p1a * p1b + (1 - p1a) * (1 - p1b)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1 - p_e)


# ---------------------------------------------------------------------------
# Run evaluation

PER_DOC_METRICS = ("R1", "R2", "RL", "CLI", "DCRS", "FKGL", "WordRank", "Abstractiveness")
SIGNIFICANCE_ALPHA = 0.05


@dataclass(frozen=True)
class MetricRow:
    model_name: str
    n_docs: int
    means: dict[str, float]
    p_values: dict[str, float]
    significant: dict[str, bool] = field(default_factory=dict)


def _doc_scores(summary: str, reference: str, source: str) -> dict[str, float]:
    return {
        "R1": rouge_n(summary, reference, 1).f1,
        "R2": rouge_n(summary, reference, 2).f1,
        "RL": rouge_l(summary, reference).f1,
        "CLI": cli_index(summary),
        "DCRS": dcrs(summary),
        "FKGL": fkgl(summary),
        "WordRank": wordrank(summary),
        "Abstractiveness": abstractiveness(summary, source),
    }


def evaluate_run(
    outputs: Mapping[str, Mapping[str, str]],
    references: Mapping[str, str],
    sources: Mapping[str, str],
    base_outputs: Mapping[str, str],
) -> list[MetricRow]:
    """Score each model's outputs and test per-document metric differences
    against the base model's outputs with a two-sided Mann-Whitney U test."""
    base_scores: dict[str, dict[str, float]] = {}
    for art_id, summary in base_outputs.items():
        if art_id not in references:
            raise GraphlayError(f"base output for unknown article id {art_id!r}")
        base_scores[art_id] = _doc_scores(summary, references[art_id], sources[art_id])

    rows = []
    for model_name in sorted(outputs):
        model_outputs = outputs[model_name]
        ids = sorted(model_outputs)
        missing = [i for i in ids if i not in references or i not in sources]
        if missing:
            raise GraphlayError(f"model {model_name!r}: outputs misaligned with references: {missing[:3]}")
        per_doc = {i: _doc_scores(model_outputs[i], references[i], sources[i]) for i in ids}
        shared = [i for i in ids if i in base_scores]
        means, p_values, significant = {}, {}, {}
        for metric in PER_DOC_METRICS:
            values = [per_doc[i][metric] for i in ids]
            means[metric] = sum(values) / len(values) if values else 0.0
            if shared:
                a = [per_doc[i][metric] for i in shared]
                b = [base_scores[i][metric] for i in shared]
                _, p = mann_whitney_u(a, b)
            else:
                p = 1.0
            p_values[metric] = p
            significant[metric] = p < SIGNIFICANCE_ALPHA
        rows.append(MetricRow(model_name, len(ids), means, p_values, significant))
    return rows


def report_markdown(rows: Sequence[MetricRow]) -> str:
    """Tabular report; pretrained-model metrics are explicitly out of scope."""
    header = (
        "| Model | # | R-1 | R-2 | R-L | BeS | CLI | DCRS | FKGL | WordRank | Novel 1-grams | BaS |"
    )
    sep = "|---" * 12 + "|"
    lines = [header, sep]
    for row in rows:
        def cell(metric: str) -> str:
            star = "*" if row.significant.get(metric) else ""
            return f"{row.means[metric]:.2f}{star}"

        lines.append(
            "| {model} | {n} | {r1} | {r2} | {rl} | n/a (out of scope) | {cli} | {dcrs} | {fkgl} | {wr} | {abst} | n/a (out of scope) |".format(
                model=row.model_name,
                n=row.n_docs,
                r1=cell("R1"),
                r2=cell("R2"),
                rl=cell("RL"),
                cli=cell("CLI"),
                dcrs=cell("DCRS"),
                fkgl=cell("FKGL"),
                wr=cell("WordRank"),
                abst=cell("Abstractiveness"),
            )
        )
    lines.append("")
    lines.append(f"`*` marks a two-sided Mann-Whitney U test p < {SIGNIFICANCE_ALPHA} against the base model.")
    return "\n".join(lines) + "\n"


def report_json(rows: Sequence[MetricRow]) -> dict:
    return {
        "models": [
            {
                "model": row.model_name,
                "n_docs": row.n_docs,
                "means": dict(row.means),
                "p_values": dict(row.p_values),
                "significant": dict(row.significant),
                "BERTScore": "n/a (out of scope)",
                "BARTScore": "n/a (out of scope)",
            }
            for row in rows
        ],
        "alpha": SIGNIFICANCE_ALPHA,
    }
