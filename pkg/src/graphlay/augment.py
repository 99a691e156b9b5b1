"""Article text augmentation: rendering salient concepts into a textual
preamble that is prepended to the model input.

Concept lines follow ``{name} = {definition}. {name} is a {semtype}.`` using
the concept's primary name and first semantic type; they are followed by one
``{semtype} = {definition}`` line per distinct semantic type of the listed
concepts, in first-mention order.  Blocks are separated by a blank line, as
is the boundary to the article text, so the article text is always a byte
suffix of the augmented input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .corpus import Lexicon
from .errors import ExtractionError


@dataclass(frozen=True)
class AugmentationText:
    concept_block: str
    semtype_block: str

    @property
    def rendered(self) -> str:
        if not self.concept_block and not self.semtype_block:
            return ""
        return self.concept_block + "\n\n" + self.semtype_block


def format_augmentation(salient_concepts: Sequence[str], lexicon: Lexicon) -> AugmentationText:
    """Render the augmentation text for an ordered list of concept ids."""
    concept_lines = []
    semtype_order: list[str] = []
    for cid in salient_concepts:
        concept = lexicon.concepts.get(cid)
        if concept is None:
            raise ExtractionError(f"unresolvable concept id {cid!r}")
        for tid in concept.semtypes:
            if tid not in lexicon.semtypes:
                raise ExtractionError(f"unresolvable semtype id {tid!r}")
            if tid not in semtype_order:
                semtype_order.append(tid)
        name = concept.names[0]
        first_type = lexicon.semtypes[concept.semtypes[0]].name
        concept_lines.append(f"{name} = {concept.definition}. {name} is a {first_type}.")
    semtype_lines = [
        f"{lexicon.semtypes[tid].name} = {lexicon.semtypes[tid].definition}"
        for tid in semtype_order
    ]
    if not concept_lines:
        return AugmentationText(concept_block="", semtype_block="")
    return AugmentationText(
        concept_block="\n".join(concept_lines),
        semtype_block="\n".join(semtype_lines),
    )


def augment_article(article_text: str, aug: AugmentationText) -> str:
    """Prepend the rendered augmentation; empty augmentation is a no-op."""
    rendered = aug.rendered
    if not rendered:
        return article_text
    return rendered + "\n\n" + article_text
