import pytest

from corpus import EntityType
from errors import PromptError, TemplateError
from prompting import (
    PromptTemplate,
    TemplateKind,
    default_templates,
    document_probe_text,
    escape_value,
    load_templates,
    render_date_probe,
    render_disambiguation,
    render_generation,
    render_language_probe,
    save_templates,
    unescape_value,
)


def test_generation_prompt_for_each_type():
    prompt = render_generation("Il pleut à Paris .", EntityType.LOC)
    assert prompt.text == "Input: Il pleut à Paris .\n In input, what are the names of location? Separate answers with commas."
    assert prompt.provenance.entity_type == EntityType.LOC
    assert "media or doctrine" in render_generation("x", "PROD").text
    assert "names of date?" in render_generation("x", EntityType.TIME).text


def test_empty_sentence_is_flagged_degenerate():
    assert render_generation("  ", EntityType.PERS).provenance.degenerate
    assert not render_generation("Paris", EntityType.PERS).provenance.degenerate


def test_placeholder_in_sentence_is_not_expanded_again():
    prompt = render_generation("see <entity> and <sentence>", EntityType.PERS)
    assert "Input: see <entity> and <sentence>\n" in prompt.text


def test_disambiguation_prompt():
    prompt = render_disambiguation("Die Zeitung aus Wien .", "Zeitung", EntityType.PERS, EntityType.LOC, reference="de-doc2/0")
    assert prompt.text == "Input: Die Zeitung aus Wien .\n In input, is Zeitung a person or a location? Give only one answer."
    assert prompt.provenance.reference == "de-doc2/0"


def test_disambiguation_rejects_bad_input():
    with pytest.raises(PromptError):
        render_disambiguation("Paris", "Paris", EntityType.LOC, EntityType.LOC)
    with pytest.raises(PromptError):
        render_disambiguation("Paris", "Berlin", EntityType.LOC, EntityType.PERS)


def test_probe_prompts():
    assert render_language_probe("Bonjour .").text == "Bonjour .\n Q:Name the language of the previous sentence.\nA: "
    assert render_date_probe("Le roi est mort").text.endswith("published: text: Le roi est mort")


def test_document_probe_text_truncates(make_document):
    document = make_document("d", "fr", 1850, (["a", "b", "c"], None), (["d", "e"], None))
    assert document_probe_text(document, max_tokens=4) == "a b c d"
    assert document_probe_text(document) == "a b c d e"


def test_template_validation():
    with pytest.raises(TemplateError):
        PromptTemplate(TemplateKind.GENERATION, "no placeholder", EntityType.PERS).validate()
    with pytest.raises(TemplateError):
        PromptTemplate(TemplateKind.PROBE_DATE, "<sentence>").validate()
    for template in default_templates().values():
        template.validate()


def test_escape_round_trip():
    text = "a\\b\n\tc "
    assert unescape_value(escape_value(text)) == text


def test_save_and_load_templates(tmp_path):
    templates = default_templates()
    templates["generation.PERS"] = PromptTemplate(
        TemplateKind.GENERATION, "Sentence: <sentence>\nWho is named? ", EntityType.PERS
    )
    path = save_templates(templates, tmp_path / "templates.env")
    loaded = load_templates(path)
    assert loaded == templates
    assert render_language_probe("x", loaded).text.endswith("A: ")


def test_missing_template_keys_keep_defaults(tmp_path):
    path = tmp_path / "templates.env"
    path.write_text('probe.date="Year of: <text>"\n', encoding="utf-8")
    loaded = load_templates(path)
    assert loaded["probe.date"].text == "Year of: <text>"
    assert loaded["generation.LOC"] == default_templates()["generation.LOC"]


def test_invalid_template_file_is_rejected(tmp_path):
    path = tmp_path / "templates.env"
    path.write_text('generation.LOC="no sentence here"\n', encoding="utf-8")
    with pytest.raises(TemplateError):
        load_templates(path)
