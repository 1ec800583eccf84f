import json
import random
import unicodedata

import pytest

from backend import Generator, MockBackend
from corpus import EntitySpan, EntityType
from errors import ReportError
from extraction import PipelineConfig, PredictionStore, run_pipeline
from make_expected_metrics import expected_csv
from metrics import (
    EPSILON,
    BaselineRow,
    Counts,
    MetricsRow,
    baseline_table,
    chart_series,
    classify,
    format_csv,
    format_json,
    item_windows,
    levenshtein,
    micro_average,
    normalized_levenshtein,
    precision_recall_f1,
    render_svg,
    report,
    rows_from_csv,
    rows_from_json,
    sweep,
)

THRESHOLDS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
ALPHABET = "abcde\u00e9\u00fc\u00df\u00e7\u00f1\u65e5\u672c\u8a9e \u0301"
WORDS = ["Paris", "Pariz", "Berlin", "Wien", "Lincoln", "London", "Londn", "Times", "Zeitung", "Müller", "Muller", "aus", "."]


def dp_distance(a, b):
    previous = list(range(len(b) + 1))
    for i, left in enumerate(a, start=1):
        current = [i]
        for j, right in enumerate(b, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (left != right)))
        previous = current
    return previous[-1]


def oracle_normalized(a, b):
    a, b = unicodedata.normalize("NFC", a.lower()), unicodedata.normalize("NFC", b.lower())
    longest = max(len(a), len(b))
    return dp_distance(a, b) / longest if longest else 0.0


def oracle_classify(texts, surfaces, gold, threshold):
    """Smallest sorted assignment among all maximal one-to-one matchings; FPs by exhaustive window search."""
    within = lambda distance: distance <= threshold + EPSILON  # noqa: E731
    pairs = {}
    for gold_index, span in enumerate(gold):
        for position, text in enumerate(texts):
            distance = oracle_normalized(text, span.surface)
            if within(distance):
                pairs[(gold_index, position)] = (distance, span.start, gold_index, position)

    best = None

    def extend(gold_index, used, chosen):
        nonlocal best
        if gold_index == len(gold):
            free_golds = {g for g in range(len(gold))} - {key[2] for key in chosen}
            for g in free_golds:
                if any((g, p) in pairs for p in range(len(texts)) if p not in used):
                    return
            candidate = tuple(sorted(chosen))
            if best is None or candidate < best:
                best = candidate
            return
        extend(gold_index + 1, used, chosen)
        for position in range(len(texts)):
            if position not in used and (gold_index, position) in pairs:
                extend(gold_index + 1, used | {position}, chosen + [pairs[(gold_index, position)]])

    extend(0, frozenset(), [])
    tp = len(best)

    fp = 0
    for position, text in enumerate(texts):
        if any((g, position) in pairs for g in range(len(gold))):
            continue
        width = max(1, len(text.split()))
        windows = [
            " ".join(surfaces[start:start + size])
            for start in range(len(surfaces))
            for size in range(1, width + 1)
            if start + size <= len(surfaces)
        ]
        if not any(within(oracle_normalized(text, window)) for window in windows):
            fp += 1
    return Counts(tp, fp, len(gold) - tp)


def random_instance(rng):
    surfaces = [rng.choice(WORDS) for _ in range(rng.randint(1, 10))]
    gold = []
    position = 0
    while position < len(surfaces) and len(gold) < 5:
        position += rng.randint(0, 2)
        if position >= len(surfaces):
            break
        end = min(len(surfaces) - 1, position + rng.randint(0, 1))
        gold.append(EntitySpan(EntityType.LOC, position, end, " ".join(surfaces[position:end + 1])))
        position = end + 1
    texts = []
    for _ in range(rng.randint(0, 8)):
        roll = rng.random()
        if gold and roll < 0.5:
            text = rng.choice(gold).surface
        elif roll < 0.8:
            text = rng.choice(WORDS)
        else:
            text = "".join(rng.choice("abcdefghij") for _ in range(rng.randint(1, 7)))
        if rng.random() < 0.4 and text:
            index = rng.randrange(len(text))
            text = text[:index] + rng.choice("xyz") + text[index + 1:]
        texts.append(text)
    return texts, surfaces, gold


@pytest.mark.parametrize("a, b, expected", [("abc", "abc", 0), ("kitten", "sitting", 3), ("", "abc", 3)])
def test_levenshtein_examples(a, b, expected):
    assert levenshtein(a, b) == expected


@pytest.mark.parametrize("a, b, expected", [("Paris", "Pariz", 0.2), ("a", "a", 0.0), ("ab", "", 1.0), ("", "", 0.0)])
def test_normalized_levenshtein_examples(a, b, expected):
    assert normalized_levenshtein(a, b) == expected


def test_levenshtein_matches_dp_oracle():
    rng = random.Random(2024)
    for _ in range(10000):
        a = "".join(rng.choice(ALPHABET) for _ in range(rng.randint(0, 40)))
        b = "".join(rng.choice(ALPHABET) for _ in range(rng.randint(0, 40)))
        na, nb = unicodedata.normalize("NFC", a), unicodedata.normalize("NFC", b)
        expected = dp_distance(na, nb)
        assert levenshtein(a, b) == expected
        longest = max(len(na), len(nb))
        assert normalized_levenshtein(a, b) == (expected / longest if longest else 0.0)


def test_levenshtein_is_a_metric():
    rng = random.Random(8)
    for _ in range(500):
        a, b, c = ("".join(rng.choice("abc") for _ in range(rng.randint(0, 6))) for _ in range(3))
        assert levenshtein(a, b) == levenshtein(b, a)
        assert (levenshtein(a, b) == 0) == (a == b)
        assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)
        assert 0.0 <= normalized_levenshtein(a, b) <= 1.0


def test_composed_and_decomposed_forms_are_equal():
    assert levenshtein("Caf\u00e9", "Cafe\u0301") == 0


@pytest.mark.parametrize(
    "prediction, threshold, expected",
    [("Paris", 0.0, Counts(1, 0, 0)), ("Pariz", 0.0, Counts(0, 1, 1)), ("Pariz", 0.4, Counts(1, 0, 0))],
)
def test_classify_examples(make_sentence, prediction, threshold, expected):
    sentence = make_sentence("Le roi à Paris", ["O", "O", "O", "B-LOC"])
    gold = [EntitySpan(EntityType.LOC, 3, 3, "Paris")]
    assert classify([prediction], sentence, gold, threshold) == expected


def test_classify_prefers_closest_prediction(make_sentence):
    sentence = make_sentence("in Paris and Berlin")
    gold = [EntitySpan(EntityType.LOC, 1, 1, "Paris")]
    assert classify(["Pariz", "Paris"], sentence, gold, 0.4) == Counts(1, 0, 0)
    assert classify(["Rome"], sentence, gold, 0.4) == Counts(0, 1, 1)
    assert classify(["Berlin"], sentence, gold, 0.4) == Counts(0, 0, 1)
    assert classify([], sentence, [], 0.4) == Counts()


def test_classify_matches_brute_force_oracle_and_is_monotone():
    rng = random.Random(99)
    for _ in range(1000):
        texts, surfaces, gold = random_instance(rng)
        previous = None
        for threshold in THRESHOLDS:
            counts = classify(texts, surfaces, gold, threshold)
            assert counts == oracle_classify(texts, surfaces, gold, threshold)
            assert counts.tp + counts.fn == len(gold)
            if previous is not None:
                assert counts.tp >= previous.tp
                assert precision_recall_f1(counts)[1] >= precision_recall_f1(previous)[1]
            previous = counts


def test_precomputed_windows_give_the_same_counts():
    rng = random.Random(17)
    for _ in range(200):
        texts, surfaces, gold = random_instance(rng)
        windows = item_windows(texts, surfaces)
        for threshold in THRESHOLDS:
            assert classify(texts, surfaces, gold, threshold, windows) == classify(texts, surfaces, gold, threshold)


def test_metrics_row_arithmetic():
    row = MetricsRow("fr", "LOC", None, 0.4, Counts(1, 1, 0))
    assert (row.precision, row.recall) == (0.5, 1.0)
    assert row.f1 == pytest.approx(2 / 3)
    assert MetricsRow("fr", "LOC", None, 0.4, Counts()).f1 == 0.0
    assert Counts(1, 2, 3) + Counts(1, 1, 1) == Counts(2, 3, 4)


def test_baseline_table():
    assert baseline_table() == [
        BaselineRow("en", 0.794, 0.817, 0.806),
        BaselineRow("de", 0.870, 0.886, 0.878),
        BaselineRow("fr", 0.912, 0.931, 0.921),
    ]


@pytest.fixture
def fixture_rows(fixture_corpus, data_dir):
    generator = Generator(MockBackend.from_file(data_dir / "mock_script.json"))
    store = run_pipeline(fixture_corpus, generator, PipelineConfig(0.4, (EntityType.PERS, EntityType.LOC)))
    return sweep(store, fixture_corpus, (0.0, 0.4), 0.4)


def test_sweep_fixture_matches_expected_file(fixture_rows, data_dir):
    expected = (data_dir / "expected_metrics.csv").read_text(encoding="utf-8")
    assert format_csv(fixture_rows) == expected


def test_expected_file_matches_exhaustive_rebuild(data_dir):
    assert expected_csv() == (data_dir / "expected_metrics.csv").read_text(encoding="utf-8")


def test_sweep_single_threshold_is_consistent(fixture_corpus, fixture_rows, data_dir):
    generator = Generator(MockBackend.from_file(data_dir / "mock_script.json"))
    store = run_pipeline(fixture_corpus, generator, PipelineConfig(0.4, (EntityType.PERS, EntityType.LOC)))
    single = [row for row in sweep(store, fixture_corpus, (0.4,), 0.4) if row.period is None]
    assert single == [row for row in fixture_rows if row.period is None and row.threshold == 0.4]


def test_period_rows_sum_to_threshold_rows(fixture_rows):
    for row in fixture_rows:
        if row.period is None and row.threshold == 0.4:
            parts = [r.counts for r in fixture_rows if r.period and r.language == row.language and r.entity_type == row.entity_type]
            assert sum(parts, Counts()) == row.counts


def test_sweep_with_empty_store(fixture_corpus):
    rows = sweep(PredictionStore(entity_types=(EntityType.LOC,)), fixture_corpus, (0.4,))
    assert all(row.counts.tp == 0 and row.counts.fp == 0 and row.f1 == 0.0 for row in rows)
    assert sum(row.counts.fn for row in rows if row.period is None) == 4


def test_micro_average(fixture_rows):
    micro = {(row.language, row.threshold): row.counts for row in micro_average(fixture_rows)}
    assert micro[("en", 0.0)] == Counts(1, 2, 1)
    assert micro[("de", 0.4)] == Counts(3, 0, 0)
    assert list(micro)[0] == ("en", 0.0)


def test_csv_and_json_reports_parse_back(fixture_rows):
    assert rows_from_csv(report(fixture_rows, format="csv")) == [
        MetricsRow(r.language, r.entity_type, r.period, round(r.threshold, 3), r.counts) for r in fixture_rows
    ]
    text = report(fixture_rows, baseline_table(), "json", {"seed": 0})
    assert rows_from_json(text) == fixture_rows
    payload = json.loads(text)
    assert payload["metadata"] == {"seed": 0, "fp_counting": "per_item"}
    assert payload["baselines"][2] == {"language": "fr", "precision": 0.912, "recall": 0.931, "f1": 0.921}
    assert format_json(fixture_rows) == format_json(fixture_rows)


@pytest.mark.parametrize("by", ["threshold", "period"])
def test_svg_has_one_series_per_language(fixture_rows, by):
    svg = render_svg(fixture_rows, "f1", by)
    assert svg.lstrip().startswith("<?xml")
    for language in ("en", "de", "fr"):
        assert svg.count('id="series-{0}"'.format(language)) == 1
    assert svg == render_svg(fixture_rows, "f1", by)


def test_entity_series_match_sweep_rows(fixture_rows):
    series = chart_series(fixture_rows, "precision", "entity", 0.4)
    assert list(series) == ["PERS", "LOC"]
    for entity_type, (languages, values) in series.items():
        assert languages == ["en", "de", "fr"]
        expected = {
            row.language: row.precision
            for row in fixture_rows
            if row.period is None and row.threshold == 0.4 and row.entity_type == entity_type
        }
        assert values == [expected[language] for language in languages]


def test_entity_chart_has_one_series_per_type(fixture_rows):
    svg = render_svg(fixture_rows, "recall", "entity")
    assert svg.count('id="series-PERS"') == 1
    assert svg.count('id="series-LOC"') == 1
    assert 'id="series-en"' not in svg


def test_unknown_report_format():
    with pytest.raises(ReportError):
        report([], format="xlsx")
    with pytest.raises(ReportError):
        render_svg([], metric="accuracy")
