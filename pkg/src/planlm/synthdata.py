"""Templated synthetic corpora with known latent section structure.

Articles are sequences of sentences; each sentence realizes a template of its
article's current section, and sections evolve by a first-order Markov chain.
Per-section slot lexicons are disjoint, so a lexical sentence encoder can
separate sections, and the ground-truth section labels ride along for
agreement checks.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Article, word_tokens
from .errors import ValidationError

_SLOT_RE = re.compile(r"\{([A-Z0-9_]+)\}")


@dataclass
class SectionSpec:
    name: str
    templates: list[str]
    lexicons: dict[str, list[str]] = field(default_factory=dict)


@dataclass
class TemplateGrammar:
    sections: list[SectionSpec]
    transition: np.ndarray     # (S, S) row-stochastic
    initial: np.ndarray        # (S,)
    seed: int = 0

    @property
    def n_sections(self) -> int:
        return len(self.sections)

    def validate(self) -> None:
        s = self.n_sections
        if self.transition.shape != (s, s):
            raise ValidationError("transition matrix shape mismatch")
        if np.any(self.transition < 0) or \
                not np.allclose(self.transition.sum(axis=1), 1.0, atol=1e-9):
            raise ValidationError("transition rows must be stochastic")
        if not np.isclose(self.initial.sum(), 1.0, atol=1e-9):
            raise ValidationError("initial distribution must sum to 1")
        for section in self.sections:
            if not section.templates:
                raise ValidationError(f"section {section.name} has no templates")
            for template in section.templates:
                if len(word_tokens(template)) < 3:
                    raise ValidationError(
                        f"template too short in {section.name}: {template!r}")
                for slot in _SLOT_RE.findall(template):
                    if not section.lexicons.get(slot):
                        raise ValidationError(
                            f"template slot {slot} of {section.name} has no lexicon")


def render_sentence(section: SectionSpec, rng: np.random.Generator) -> str:
    template = section.templates[int(rng.integers(len(section.templates)))]

    def fill(match: re.Match) -> str:
        lexicon = section.lexicons[match.group(1)]
        return lexicon[int(rng.integers(len(lexicon)))]

    text = _SLOT_RE.sub(fill, template)
    return text[0].upper() + text[1:]


def generate_corpus(grammar: TemplateGrammar, n_articles: int,
                    sentences_per_article: int,
                    ) -> tuple[list[Article], dict[str, list[int]]]:
    """Deterministic by grammar.seed; labels are the section id per sentence."""
    grammar.validate()
    rng = np.random.default_rng(grammar.seed)
    articles: list[Article] = []
    labels: dict[str, list[int]] = {}
    s = grammar.n_sections
    for i in range(n_articles):
        section = int(rng.choice(s, p=grammar.initial))
        sentence_labels: list[int] = []
        sentences: list[str] = []
        for _ in range(sentences_per_article):
            sentence_labels.append(section)
            sentences.append(render_sentence(grammar.sections[section], rng))
            section = int(rng.choice(s, p=grammar.transition[section]))
        article_id = f"synth{i:05d}"
        articles.append(Article(article_id, f"Synthetic article {i}",
                                " ".join(sentences)))
        labels[article_id] = sentence_labels
    return articles, labels


def save_labels(labels: dict[str, list[int]], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for article_id, seq in labels.items():
            fh.write(json.dumps({"id": article_id, "labels": seq}) + "\n")


def load_labels(path: Path) -> dict[str, list[int]]:
    labels: dict[str, list[int]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        obj = json.loads(line)
        labels[obj["id"]] = list(obj["labels"])
    return labels


def cycle_transition(n_sections: int, p_next: float = 0.8, p_skip: float = 0.1,
                     p_stay: float = 0.1) -> np.ndarray:
    """Mostly-cyclic section chain: advance, sometimes skip ahead or stall."""
    if not np.isclose(p_next + p_skip + p_stay, 1.0):
        raise ValidationError("cycle probabilities must sum to 1")
    t = np.zeros((n_sections, n_sections))
    for i in range(n_sections):
        t[i, (i + 1) % n_sections] += p_next
        t[i, (i + 2) % n_sections] += p_skip
        t[i, i] += p_stay
    return t


def _lex(prefix: str, n: int = 12) -> list[str]:
    return [f"{prefix}{chr(ord('a') + j)}" for j in range(n)]


def default_grammar(seed: int = 0, p_next: float = 0.8, p_skip: float = 0.1,
                    p_stay: float = 0.1) -> TemplateGrammar:
    """Eight sections loosely shaped like encyclopedia article structure."""
    # templates within a section share a long distinctive frame (one tail word
    # varies) so the lexical encoder keeps sections cohesive; slot lexicons
    # are disjoint across sections
    sections = [
        SectionSpec("origin", [
            "{NAME} was born inside that old quiet village .",
            "{NAME} was born inside that old quiet parish .",
        ], {"NAME": _lex("person")}),
        SectionSpec("education", [
            "he studied ancient {SUBJECT} with strong scholarly honors .",
            "he studied ancient {SUBJECT} with strong scholarly merit .",
        ], {"SUBJECT": _lex("topic")}),
        SectionSpec("career", [
            "later he worked many decades as chief {JOB} .",
            "later he worked many decades as senior {JOB} .",
        ], {"JOB": _lex("trade")}),
        SectionSpec("family", [
            "at home cousin {KIN} shared every single meal .",
            "at home cousin {KIN} shared every single chore .",
        ], {"KIN": _lex("uncle")}),
        SectionSpec("demographics", [
            "census takers recorded {NUM} thousand residents overall .",
            "census takers recorded {NUM} thousand families overall .",
        ], {"NUM": _lex("figure")}),
        SectionSpec("geography", [
            "its green valley lies beside river {RIVER} today .",
            "its green valley runs beside river {RIVER} today .",
        ], {"RIVER": _lex("stream")}),
        SectionSpec("business", [
            "that firm acquired company {TARGET} using spare cash .",
            "that firm acquired company {TARGET} using spare shares .",
        ], {"TARGET": _lex("brand")}),
        SectionSpec("schools", [
            "nearby districts opened school {BUILDING} for young pupils .",
            "nearby districts opened school {BUILDING} for young classes .",
        ], {"BUILDING": _lex("hall")}),
    ]
    s = len(sections)
    return TemplateGrammar(sections=sections,
                           transition=cycle_transition(s, p_next, p_skip, p_stay),
                           initial=np.full(s, 1.0 / s), seed=seed)
