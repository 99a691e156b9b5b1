"""Deterministic lexicon-based concept matching with word-overlap filtering.

Matching is a two-stage pipeline: a deliberately permissive candidate match
(``loose`` mode admits any concept sharing a single name word with the
section) followed by a word-overlap filter that keeps a concept only when all
words of one of its names occur in the section.  ``exact`` mode, which
requires a contiguous run of the name words, is available for comparison and
always survives the filter.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .corpus import Article, Lexicon, Token, stopwords, token_surfaces
from .errors import ExtractionError

# ---------------------------------------------------------------------------
# Normalization

# Suffix-strip rules applied in order; the first rule whose stem keeps at
# least MIN_STEM characters wins.  "ies" is rewritten to "y".
_SUFFIX_RULES = (("ies", "y"), ("es", ""), ("s", ""), ("ing", ""), ("ed", ""))
_MIN_STEM = 3


def stem(word: str) -> str:
    """Rule-based stemmer: ies->y, then strip es/s/ing/ed, min stem length 3."""
    for suffix, repl in _SUFFIX_RULES:
        if word.endswith(suffix) and len(word) - len(suffix) >= _MIN_STEM:
            return word[: -len(suffix)] + repl
    return word


def normalize(tokens: Sequence[str | Token], stopword_list: Iterable[str] | None = None) -> list[str]:
    """Lowercase, drop stopwords, and stem, preserving order."""
    stops = frozenset(stopword_list) if stopword_list is not None else stopwords()
    out = []
    for tok in tokens:
        surface = tok.surface if isinstance(tok, Token) else tok
        w = surface.lower()
        if w in stops:
            continue
        out.append(stem(w))
    return out


def normalize_text(text: str, stopword_list: Iterable[str] | None = None) -> list[str]:
    return normalize(token_surfaces(text), stopword_list)


# ---------------------------------------------------------------------------
# Matching

@dataclass(frozen=True)
class CandidateMention:
    concept_id: str
    section_index: int
    matched_name: str
    match_fraction: float


@dataclass(frozen=True)
class SectionConceptMap:
    """Filtered concept ids per section (-1 = abstract) plus, per section,
    the ids ordered by first mention position."""

    concepts: dict[int, frozenset[str]]
    order: dict[int, tuple[str, ...]]


def _contains_run(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    n = len(needle)
    if n == 0 or n > len(haystack):
        return False
    for i in range(len(haystack) - n + 1):
        if list(haystack[i : i + n]) == list(needle):
            return True
    return False


def match_concepts(
    section_text: str,
    lexicon: Lexicon,
    mode: str = "exact",
    section_index: int = 0,
) -> list[CandidateMention]:
    """Candidate concept mentions for one section.

    ``exact``: all normalized name words appear as a contiguous run in the
    normalized section.  ``loose``: any single name word appearing anywhere
    makes the concept a candidate; the fraction of name words found is
    recorded.
    """
    if mode not in ("exact", "loose"):
        raise ExtractionError(f"unknown match mode {mode!r}")
    words = normalize_text(section_text)
    word_set = set(words)
    mentions: list[CandidateMention] = []
    for cid in sorted(lexicon.concepts):
        concept = lexicon.concepts[cid]
        for name in concept.names:
            name_words = normalize_text(name)
            if not name_words:
                continue
            if mode == "exact":
                if _contains_run(words, name_words):
                    mentions.append(CandidateMention(cid, section_index, name, 1.0))
            else:
                found = sum(1 for w in name_words if w in word_set)
                if found > 0:
                    mentions.append(
                        CandidateMention(cid, section_index, name, found / len(name_words))
                    )
    return mentions


def filter_concepts(
    candidates: Iterable[CandidateMention],
    section_text: str,
    lexicon: Lexicon,
) -> set[str]:
    """Keep a candidate concept only if every word of at least one of its
    names occurs somewhere in the section (contiguity not required)."""
    word_set = set(normalize_text(section_text))
    kept: set[str] = set()
    for cid in {m.concept_id for m in candidates}:
        concept = lexicon.concepts.get(cid)
        if concept is None:
            continue
        for name in concept.names:
            name_words = normalize_text(name)
            if name_words and all(w in word_set for w in name_words):
                kept.add(cid)
                break
    return kept


def _first_mention_order(concept_ids: set[str], section_text: str, lexicon: Lexicon) -> tuple[str, ...]:
    """Order concepts by the first position at which any of their name words
    occurs in the normalized section; ties break on concept id."""
    words = normalize_text(section_text)
    first_index = {w: i for i, w in reversed(list(enumerate(words)))}
    keyed = []
    for cid in concept_ids:
        positions = [
            first_index[w]
            for name in lexicon.concepts[cid].names
            for w in normalize_text(name)
            if w in first_index
        ]
        keyed.append((min(positions) if positions else len(words), cid))
    return tuple(cid for _, cid in sorted(keyed))


def extract_article_concepts(article: Article, lexicon: Lexicon) -> SectionConceptMap:
    """Per-section filtered concepts; the abstract is keyed as -1."""
    concepts: dict[int, frozenset[str]] = {}
    order: dict[int, tuple[str, ...]] = {}
    indexed = [(-1, article.abstract)] + list(enumerate(article.sections))
    for idx, section in indexed:
        candidates = match_concepts(section.text, lexicon, mode="loose", section_index=idx)
        kept = filter_concepts(candidates, section.text, lexicon)
        concepts[idx] = frozenset(kept)
        order[idx] = _first_mention_order(kept, section.text, lexicon)
    return SectionConceptMap(concepts=concepts, order=order)


def select_salient_concepts(section_concept_map: SectionConceptMap) -> list[str]:
    """The abstract's concepts, ordered by first mention position."""
    if -1 not in section_concept_map.concepts:
        raise ExtractionError("section concept map has no abstract entry (-1)")
    return list(section_concept_map.order.get(-1, ()))
