"""
Prompt templates for entity generation, disambiguation and the two probes.

Templates use the placeholders <sentence>, <entity>, <text>, <type_a> and
<type_b>. Rendering substitutes all of them in one pass, so text that itself
contains a placeholder is never expanded twice.
"""
import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from decouple import Config, RepositoryEnv, UndefinedValueError
from loguru import logger

from corpus import ENTITY_ORDER, EntityType
from errors import PromptError, TemplateError
from fileio import write_text_atomic

PLACEHOLDER = re.compile(r"<(sentence|entity|text|type_a|type_b)>")

TYPE_NOUNS = {
    EntityType.PERS: "person",
    EntityType.LOC: "location",
    EntityType.ORG: "organization",
    EntityType.TIME: "date",
    EntityType.PROD: "media or doctrine",
}

GENERATION_TEMPLATE = "Input: <sentence>\n In input, what are the names of {0}? Separate answers with commas."
DISAMBIGUATION_TEMPLATE = "Input: <sentence>\n In input, is <entity> a <type_a> or a <type_b>? Give only one answer."
LANGUAGE_PROBE_TEMPLATE = "<sentence>\n Q:Name the language of the previous sentence.\nA: "
DATE_PROBE_TEMPLATE = "In which year is the following text likely to have been published: text: <text>"

DATE_PROBE_TOKENS = 100


class TemplateKind(str, Enum):
    GENERATION = "generation"
    DISAMBIGUATION = "disambiguation"
    PROBE_LANGUAGE = "probe_language"
    PROBE_DATE = "probe_date"


@dataclass(frozen=True)
class PromptTemplate:
    kind: TemplateKind
    text: str
    entity_type: Optional[EntityType] = None

    @property
    def key(self):
        if self.kind == TemplateKind.GENERATION:
            return "generation." + self.entity_type.value
        if self.kind == TemplateKind.PROBE_LANGUAGE:
            return "probe.language"
        if self.kind == TemplateKind.PROBE_DATE:
            return "probe.date"
        return "disambiguation"

    def validate(self):
        counts = {name: self.text.count("<{0}>".format(name)) for name in ("sentence", "entity", "text")}
        if self.kind == TemplateKind.GENERATION and counts["sentence"] != 1:
            raise TemplateError("{0} must contain <sentence> exactly once".format(self.key))
        if self.kind == TemplateKind.DISAMBIGUATION and not (counts["sentence"] and counts["entity"]):
            raise TemplateError("{0} must contain <sentence> and <entity>".format(self.key))
        if self.kind == TemplateKind.PROBE_LANGUAGE and not counts["sentence"]:
            raise TemplateError("{0} must contain <sentence>".format(self.key))
        if self.kind == TemplateKind.PROBE_DATE and not counts["text"]:
            raise TemplateError("{0} must contain <text>".format(self.key))
        return self


@dataclass(frozen=True)
class PromptProvenance:
    kind: TemplateKind
    entity_type: Optional[EntityType] = None
    reference: str = ""
    degenerate: bool = False


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    provenance: PromptProvenance


def default_templates():
    templates = {}
    for entity_type in ENTITY_ORDER:
        template = PromptTemplate(TemplateKind.GENERATION, GENERATION_TEMPLATE.format(TYPE_NOUNS[entity_type]), entity_type)
        templates[template.key] = template
    for template in (
        PromptTemplate(TemplateKind.DISAMBIGUATION, DISAMBIGUATION_TEMPLATE),
        PromptTemplate(TemplateKind.PROBE_LANGUAGE, LANGUAGE_PROBE_TEMPLATE),
        PromptTemplate(TemplateKind.PROBE_DATE, DATE_PROBE_TEMPLATE),
    ):
        templates[template.key] = template
    return templates


ESCAPES = {"n": "\n", "t": "\t", "\\": "\\", '"': '"'}


def escape_value(text):
    return text.replace("\\", "\\\\").replace("\n", "\\n").replace("\t", "\\t")


def unescape_value(text):
    return re.sub(r"\\(.)", lambda match: ESCAPES.get(match.group(1), match.group(0)), text)


def load_templates(path):
    """
    Reads a flat key="value" template file. Keys that are not in the file
    keep their built-in default.
    """
    repository = Config(RepositoryEnv(str(path)))
    templates = {}
    for key, template in default_templates().items():
        try:
            raw = repository.get(key)
        except UndefinedValueError:
            templates[key] = template
            continue
        templates[key] = PromptTemplate(template.kind, unescape_value(raw), template.entity_type).validate()
        if templates[key].text != template.text:
            logger.info("template {0} overridden from {1}", key, path)
    return templates


def save_templates(templates, path):
    lines = ['{0}="{1}"'.format(key, escape_value(template.text)) for key, template in templates.items()]
    return write_text_atomic(path, "\n".join(lines) + "\n")


def _render(template, values, provenance):
    def substitute(match):
        return values.get(match.group(1), match.group(0))

    text = PLACEHOLDER.sub(substitute, template.text)
    return RenderedPrompt(text, provenance)


def _templates(templates):
    return templates if templates is not None else default_templates()


def render_generation(sentence, entity_type, templates=None, reference=""):
    template = _templates(templates)["generation." + EntityType(entity_type).value]
    provenance = PromptProvenance(TemplateKind.GENERATION, EntityType(entity_type), reference, not sentence.strip())
    return _render(template, {"sentence": sentence}, provenance)


def render_disambiguation(sentence, entity_surface, type_a, type_b, templates=None, reference=""):
    type_a, type_b = EntityType(type_a), EntityType(type_b)
    if type_a == type_b:
        raise PromptError("disambiguation needs two different types, got {0} twice".format(type_a.value))
    if not entity_surface or entity_surface not in sentence:
        raise PromptError("entity {0!r} does not occur in the sentence".format(entity_surface))
    template = _templates(templates)["disambiguation"]
    values = {
        "sentence": sentence,
        "entity": entity_surface,
        "type_a": TYPE_NOUNS[type_a],
        "type_b": TYPE_NOUNS[type_b],
    }
    return _render(template, values, PromptProvenance(TemplateKind.DISAMBIGUATION, None, reference))


def render_language_probe(sentence, templates=None, reference=""):
    template = _templates(templates)["probe.language"]
    provenance = PromptProvenance(TemplateKind.PROBE_LANGUAGE, None, reference, not sentence.strip())
    return _render(template, {"sentence": sentence}, provenance)


def render_date_probe(text, templates=None, reference=""):
    template = _templates(templates)["probe.date"]
    provenance = PromptProvenance(TemplateKind.PROBE_DATE, None, reference, not text.strip())
    return _render(template, {"text": text}, provenance)


def document_probe_text(document, max_tokens=DATE_PROBE_TOKENS):
    """The first max_tokens tokens of a document, space separated."""
    surfaces = []
    for sentence in document.sentences:
        for token in sentence.tokens:
            if len(surfaces) >= max_tokens:
                return " ".join(surfaces)
            surfaces.append(token.surface)
    return " ".join(surfaces)
