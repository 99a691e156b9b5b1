"""Canonical data formats, tokenization primitives, and corpus generation.

Corpora are JSON-lines files, one article per line; lexicons are single JSON
documents.  The tokenizer and sentence splitter defined here are shared by
concept matching, all evaluation metrics, and the judgment service so every
consumer counts words the same way.
"""
from __future__ import annotations

import json
import os
import re
import random
from dataclasses import dataclass, field
from datetime import date
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CorpusError, LexiconError

# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class Section:
    title: str
    text: str


@dataclass(frozen=True)
class Article:
    id: str
    title: str
    keywords: tuple[str, ...]
    pub_date: str
    abstract: Section
    sections: tuple[Section, ...]
    lay_summary: str | None = None

    def full_text(self) -> str:
        """Canonical plain-text rendering used as model input.

        Title, then abstract, then each body section; section titles are kept
        on their own line so they contribute tokens.
        """
        parts = [self.title]
        for sec in (self.abstract, *self.sections):
            if sec.title:
                parts.append(sec.title + "\n" + sec.text)
            else:
                parts.append(sec.text)
        return "\n\n".join(parts)


@dataclass(frozen=True)
class Concept:
    names: tuple[str, ...]
    definition: str
    semtypes: tuple[str, ...]


@dataclass(frozen=True)
class SemType:
    name: str
    definition: str


@dataclass(frozen=True)
class Lexicon:
    concepts: dict[str, Concept]
    semtypes: dict[str, SemType]
    relations: tuple[tuple[str, str, str], ...]
    # ids of concepts that were dropped at load time for lacking a definition
    dropped_concepts: tuple[str, ...] = ()


@dataclass(frozen=True)
class Token:
    surface: str
    start: int
    end: int


@dataclass(frozen=True)
class SentenceSpan:
    start: int
    end: int


# ---------------------------------------------------------------------------
# Bundled data files

_DATA_ENV = "GRAPHLAY_DATA_DIR"


def data_path(name: str) -> Path:
    """Resolve a bundled data file, honoring the GRAPHLAY_DATA_DIR override."""
    override = os.environ.get(_DATA_ENV)
    if override:
        p = Path(override) / name
        if p.exists():
            return p
    return Path(str(resources.files("graphlay").joinpath("data", name)))


@lru_cache(maxsize=None)
def _load_wordlist(name: str) -> tuple[str, ...]:
    lines = data_path(name).read_text(encoding="utf-8").splitlines()
    return tuple(w.strip() for w in lines if w.strip())


def stopwords() -> frozenset[str]:
    return frozenset(_load_wordlist("stopwords.txt"))


def abbreviations() -> frozenset[str]:
    return frozenset(_load_wordlist("abbreviations.txt"))


def semantic_relation_registry() -> frozenset[str]:
    return frozenset(_load_wordlist("semantic_relations.txt"))


def familiar_words() -> frozenset[str]:
    return frozenset(_load_wordlist("familiar_words.txt"))


def word_ranks() -> dict[str, int]:
    """Frequency-ranked word list (rank 1 = most frequent)."""
    return {w: i + 1 for i, w in enumerate(_load_wordlist("word_ranks.txt"))}


def mini_lexicon() -> Lexicon:
    """The bundled 12-concept / 6-semtype lexicon used by fixtures and demos."""
    return load_lexicon(data_path("mini_lexicon.json"))


# ---------------------------------------------------------------------------
# Tokenization and sentence splitting

# Tokens are maximal runs of ASCII letters, digits, and apostrophes; runs
# containing no alphanumeric character (bare quote marks) are not words.
_TOKEN_RE = re.compile(r"[A-Za-z0-9']+")
_HAS_ALNUM_RE = re.compile(r"[A-Za-z0-9]")


def tokenize(text: str) -> list[Token]:
    """Split text into word tokens with exact character offsets."""
    out = []
    for m in _TOKEN_RE.finditer(text):
        if _HAS_ALNUM_RE.search(m.group()):
            out.append(Token(m.group(), m.start(), m.end()))
    return out


def token_surfaces(text: str) -> list[str]:
    return [t.surface for t in tokenize(text)]


_TERMINATOR = ".?!"


def _word_before(text: str, idx: int) -> str:
    """The run of letters/periods immediately preceding position idx."""
    j = idx
    while j > 0 and (text[j - 1].isalpha() or text[j - 1] == "."):
        j -= 1
    return text[j:idx]


def split_sentences(text: str) -> list[SentenceSpan]:
    """Sentence spans over ``text``.

    A boundary is a run of [.?!] followed by whitespace or end of text; a
    single period does not split when the preceding word is in the bundled
    abbreviation list.  Spans cover all non-whitespace text; a trailing
    fragment without a terminator is its own span.
    """
    abbrevs = abbreviations()
    spans: list[SentenceSpan] = []
    n = len(text)
    start = None
    i = 0
    while i < n:
        ch = text[i]
        if start is None:
            if not ch.isspace():
                start = i
            i += 1
            continue
        if ch in _TERMINATOR:
            run_end = i + 1
            while run_end < n and text[run_end] in _TERMINATOR:
                run_end += 1
            followed = run_end >= n or text[run_end].isspace()
            guard = False
            if followed and run_end - i == 1 and ch == ".":
                word = _word_before(text, i).lower().lstrip(".")
                guard = word in abbrevs
            if followed and not guard:
                spans.append(SentenceSpan(start, run_end))
                start = None
                i = run_end
                continue
            i = run_end
            continue
        i += 1
    if start is not None:
        end = n
        while end > start and text[end - 1].isspace():
            end -= 1
        spans.append(SentenceSpan(start, end))
    return spans


def sentence_texts(text: str) -> list[str]:
    return [text[s.start:s.end] for s in split_sentences(text)]


# ---------------------------------------------------------------------------
# Corpus I/O


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise CorpusError(f"{where}: missing field {key!r}")
    return obj[key]


def _section_from_json(obj: dict, where: str) -> Section:
    if not isinstance(obj, dict):
        raise CorpusError(f"{where}: section must be an object")
    title = _require(obj, "title", where)
    text = _require(obj, "text", where)
    if not isinstance(text, str) or not text:
        raise CorpusError(f"{where}: section text must be a non-empty string")
    return Section(str(title), text)


def article_from_json(obj: dict, where: str = "article") -> Article:
    art_id = _require(obj, "id", where)
    if not isinstance(art_id, str) or not art_id:
        raise CorpusError(f"{where}: id must be a non-empty string")
    where = f"{where} (article {art_id!r})"
    title = str(_require(obj, "title", where))
    keywords = _require(obj, "keywords", where)
    if not isinstance(keywords, list):
        raise CorpusError(f"{where}: keywords must be a list")
    pub_date = str(_require(obj, "pub_date", where))
    try:
        date.fromisoformat(pub_date)
    except ValueError as e:
        raise CorpusError(f"{where}: pub_date is not an ISO-8601 date: {e}") from None
    abstract = _section_from_json(_require(obj, "abstract", where), f"{where} abstract")
    sections = tuple(
        _section_from_json(s, f"{where} section {i}")
        for i, s in enumerate(_require(obj, "sections", where))
    )
    lay = obj.get("lay_summary")
    if lay is not None and not isinstance(lay, str):
        raise CorpusError(f"{where}: lay_summary must be a string when present")
    return Article(
        id=art_id,
        title=title,
        keywords=tuple(str(k) for k in keywords),
        pub_date=pub_date,
        abstract=abstract,
        sections=sections,
        lay_summary=lay,
    )


def article_to_json(article: Article) -> dict:
    obj = {
        "id": article.id,
        "title": article.title,
        "keywords": list(article.keywords),
        "pub_date": article.pub_date,
        "abstract": {"title": article.abstract.title, "text": article.abstract.text},
        "sections": [{"title": s.title, "text": s.text} for s in article.sections],
    }
    if article.lay_summary is not None:
        obj["lay_summary"] = article.lay_summary
    return obj


def load_corpus(path: str | Path) -> list[Article]:
    """Load a JSON-lines corpus, preserving order and enforcing unique ids."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    articles: list[Article] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: invalid JSON: {e}") from None
            art = article_from_json(obj, where=f"{path}:{lineno}")
            if art.id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate article id {art.id!r}")
            seen.add(art.id)
            articles.append(art)
    return articles


def dump_corpus(articles: Iterable[Article], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for art in articles:
            fh.write(json.dumps(article_to_json(art), sort_keys=True) + "\n")


def load_lexicon(path: str | Path) -> Lexicon:
    """Load a lexicon JSON document.

    Concepts that lack a definition are dropped (their ids are recorded in
    ``Lexicon.dropped_concepts``); unknown relation names and unresolvable
    semtype ids are hard errors.
    """
    path = Path(path)
    if not path.exists():
        raise LexiconError(f"lexicon file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise LexiconError(f"{path}: invalid JSON: {e}") from None

    semtypes: dict[str, SemType] = {}
    for tid, st in obj.get("semtypes", {}).items():
        name = st.get("name")
        definition = st.get("definition")
        if not name or not definition:
            raise LexiconError(f"semtype {tid!r}: name and definition are required")
        semtypes[tid] = SemType(name=name, definition=definition)

    concepts: dict[str, Concept] = {}
    dropped: list[str] = []
    for cid, c in obj.get("concepts", {}).items():
        names = tuple(c.get("names") or ())
        if not names:
            raise LexiconError(f"concept {cid!r}: at least one name is required")
        definition = c.get("definition") or ""
        if not definition.strip():
            dropped.append(cid)
            continue
        tids = tuple(c.get("semtypes") or ())
        if not tids:
            raise LexiconError(f"concept {cid!r}: at least one semtype is required")
        for tid in tids:
            if tid not in semtypes:
                raise LexiconError(f"concept {cid!r}: unresolvable semtype id {tid!r}")
        concepts[cid] = Concept(names=names, definition=definition, semtypes=tids)

    registry = semantic_relation_registry()
    relations: list[tuple[str, str, str]] = []
    for triple in obj.get("relations", []):
        if not (isinstance(triple, (list, tuple)) and len(triple) == 3):
            raise LexiconError(f"relation entry must be a [semtype, name, semtype] triple: {triple!r}")
        t1, rel, t2 = triple
        if rel not in registry:
            raise LexiconError(f"unknown relation name {rel!r}")
        for tid in (t1, t2):
            if tid not in semtypes:
                raise LexiconError(f"relation {rel!r}: unresolvable semtype id {tid!r}")
        relations.append((t1, rel, t2))

    return Lexicon(
        concepts=concepts,
        semtypes=semtypes,
        relations=tuple(relations),
        dropped_concepts=tuple(dropped),
    )


def dump_lexicon(lexicon: Lexicon, path: str | Path) -> None:
    obj = {
        "concepts": {
            cid: {"names": list(c.names), "definition": c.definition, "semtypes": list(c.semtypes)}
            for cid, c in lexicon.concepts.items()
        },
        "semtypes": {tid: {"name": s.name, "definition": s.definition} for tid, s in lexicon.semtypes.items()},
        "relations": [list(r) for r in lexicon.relations],
    }
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic corpus generation

_SENTENCE_FORMS = (
    "This work asks how {a} relates to {b} and {c} in living systems.",
    "We used careful measurements of {a} to follow changes in {b} and {c}.",
    "Across many trials {a} moved together with {b} while {c} stayed stable.",
    "The results place {a} at the center of a pathway linking {b} to {c}.",
    "Earlier reports connected {a} with {b} but said little about {c}.",
    "Our findings suggest that {a} can reshape both {b} and {c} over time.",
    "A simple model of {a} was enough to predict how {b} responds to {c}.",
    "We found that {a} appears well before {b} and long after {c}.",
)

_TITLE_FORMS = (
    "How {a} shapes {b}",
    "The role of {a} in {b}",
    "Linking {a} and {b} in the living body",
    "What {a} tells us about {b}",
)

_SECTION_TITLES = ("Introduction", "Results")


def _sentences_for(rng: random.Random, pool: list[str], count: int) -> str:
    parts = []
    for _ in range(count):
        form = rng.choice(_SENTENCE_FORMS)
        a, b, c = rng.sample(pool, 3)
        parts.append(form.format(a=a, b=b, c=c))
    return " ".join(parts)


def generate_synthetic_corpus(seed: int, n_articles: int, lexicon: Lexicon) -> list[Article]:
    """Deterministic desk-scale corpus driven by the lexicon.

    Every section (including the abstract) mentions at least three concept
    names verbatim, and the lay summary reuses the words of the first two
    mentioned concepts' definitions so that graph-derived knowledge carries
    usable signal for the toy models.
    """
    if n_articles < 1:
        raise CorpusError("n_articles must be >= 1")
    if not lexicon.concepts:
        raise CorpusError("cannot generate articles from an empty lexicon")
    rng = random.Random(seed)
    concept_ids = sorted(lexicon.concepts)
    articles = []
    for i in range(n_articles):
        k = min(5, len(concept_ids))
        pool_ids = rng.sample(concept_ids, k) if k >= 3 else concept_ids * 3
        pool = [lexicon.concepts[cid].names[0] for cid in pool_ids]
        title = rng.choice(_TITLE_FORMS).format(a=pool[0], b=pool[1])
        abstract = Section(title="Abstract", text=_sentences_for(rng, pool, 2))
        sections = tuple(
            Section(title=_SECTION_TITLES[j], text=_sentences_for(rng, pool, 2))
            for j in range(2)
        )
        year = 2020 + rng.randrange(5)
        pub_date = f"{year}-{rng.randrange(1, 13):02d}-{rng.randrange(1, 29):02d}"
        lay_bits = []
        for cid in pool_ids[:2]:
            c = lexicon.concepts[cid]
            definition = c.definition[0].lower() + c.definition[1:]
            lay_bits.append(f"{c.names[0]} means {definition}.")
        articles.append(
            Article(
                id=f"synth{seed:03d}-{i:03d}",
                title=title,
                keywords=(pool[0], pool[1]),
                pub_date=pub_date,
                abstract=abstract,
                sections=sections,
                lay_summary=" ".join(lay_bits),
            )
        )
    return articles
