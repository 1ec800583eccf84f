"""
Normalized Levenshtein scoring and precision/recall/F1 tables.

A prediction is a true positive when it is the closest remaining answer to
a gold span within the threshold; golds are assigned greedily by ascending
distance, ties going to the earlier gold and then the earlier answer.
Answers that are neither near a gold nor near any run of sentence tokens
are false positives. Gold spans left without a true positive are false
negatives, so tp + fn always equals the number of gold spans.
"""
import csv
import io
import json
import unicodedata
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

import Levenshtein
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from corpus import ENTITY_ORDER, LANGUAGES, assign_period, decode_entities, languages_in  # noqa: E402
from errors import ReportError  # noqa: E402

DEFAULT_THRESHOLDS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
PERIOD_THRESHOLD = 0.4
EPSILON = 1e-9
ALL_ENTITIES = "ALL"
FP_COUNTING = "per_item"

REPORT_HEADER = ("language", "entity", "period", "threshold", "tp", "fp", "fn", "precision", "recall", "f1")
REPORT_FORMATS = ("csv", "json", "svg")
CHART_METRICS = ("precision", "recall", "f1")
CHART_AXES = ("threshold", "period", "entity")
AXIS_LABELS = {
    "threshold": "Levenshtein threshold",
    "period": "period (threshold {0})",
    "entity": "language (threshold {0})",
}
MARKERS = {"en": "o", "de": "s", "fr": "^"}
SVG_SALT = "hipe-ner"
LANGUAGE_ORDER = {language: position for position, language in enumerate(LANGUAGES)}
ENTITY_POSITION = {entity_type.value: position for position, entity_type in enumerate(ENTITY_ORDER)}


def nfc(text):
    return unicodedata.normalize("NFC", text)


def levenshtein(a, b):
    return Levenshtein.distance(nfc(a), nfc(b))


def normalized_levenshtein(a, b):
    a, b = nfc(a), nfc(b)
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return Levenshtein.distance(a, b) / longest


def within(distance, threshold):
    return distance <= threshold + EPSILON


def best_window(text, surfaces, max_width=None):
    """
    Closest run of consecutive tokens to text, comparing case-insensitively.
    Runs are at most as long as text has words. Returns (start, end,
    distance) or None for an empty sentence; ties go to the earliest start,
    then the shortest run.
    """
    width = max_width or max(1, len(text.split()))
    target = text.lower()
    best = None
    for start in range(len(surfaces)):
        for size in range(1, width + 1):
            end = start + size - 1
            if end >= len(surfaces):
                break
            distance = normalized_levenshtein(target, " ".join(surfaces[start:end + 1]).lower())
            if best is None or distance < best[2]:
                best = (start, end, distance)
    return best


@dataclass(frozen=True)
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def precision_recall_f1(counts):
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass(frozen=True)
class MetricsRow:
    language: str
    entity_type: str
    period: Optional[str]
    threshold: float
    counts: Counts

    @property
    def precision(self):
        return precision_recall_f1(self.counts)[0]

    @property
    def recall(self):
        return precision_recall_f1(self.counts)[1]

    @property
    def f1(self):
        return precision_recall_f1(self.counts)[2]

    def to_dict(self):
        return {
            "language": self.language,
            "entity": self.entity_type,
            "period": self.period,
            "threshold": self.threshold,
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "fn": self.counts.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["language"],
            data["entity"],
            data.get("period") or None,
            float(data["threshold"]),
            Counts(int(data["tp"]), int(data["fp"]), int(data["fn"])),
        )


@dataclass(frozen=True)
class BaselineRow:
    language: str
    precision: float
    recall: float
    f1: float


def _text(prediction):
    if isinstance(prediction, str):
        return prediction
    item = getattr(prediction, "item", None)
    return item.text if item is not None else prediction.text


def _surfaces(sentence):
    return sentence.surfaces if hasattr(sentence, "surfaces") else list(sentence)


def item_windows(predictions, sentence):
    """Threshold-independent best_window of every answer item."""
    surfaces = _surfaces(sentence)
    return [best_window(_text(prediction), surfaces) for prediction in predictions]


def classify(predictions, sentence, gold, threshold, windows=None):
    """
    Counts for one query: its answer items against the gold spans of that
    type. windows, when given, is item_windows(predictions, sentence).
    """
    surfaces = _surfaces(sentence)
    texts = [_text(prediction) for prediction in predictions]
    if windows is None:
        windows = item_windows(predictions, surfaces)

    pairs = []
    for gold_index, span in enumerate(gold):
        target = (span.surface or " ".join(surfaces[span.start:span.end + 1])).lower()
        for position, text in enumerate(texts):
            distance = normalized_levenshtein(text.lower(), target)
            if within(distance, threshold):
                pairs.append((distance, span.start, gold_index, position))
    pairs.sort()

    taken_gold = set()
    taken_prediction = set()
    for _, _, gold_index, position in pairs:
        if gold_index in taken_gold or position in taken_prediction:
            continue
        taken_gold.add(gold_index)
        taken_prediction.add(position)

    near_gold = {pair[3] for pair in pairs}
    fp = 0
    for position, text in enumerate(texts):
        if position in near_gold:
            continue
        window = windows[position]
        if window is None or not within(window[2], threshold):
            fp += 1
    tp = len(taken_gold)
    return Counts(tp, fp, len(gold) - tp)


def _period_sort_key(label):
    return int(label.split("-")[0])


def sweep(store, corpus, thresholds=DEFAULT_THRESHOLDS, period_threshold=PERIOD_THRESHOLD, entity_types=None):
    """
    One row per (language, entity type, threshold), then one row per
    (language, entity type, period) at period_threshold for every period
    that holds documents of that language.
    """
    entity_types = tuple(entity_types or store.entity_types)
    thresholds = sorted(set(float(threshold) for threshold in thresholds))
    by_threshold = defaultdict(Counts)
    by_period = defaultdict(Counts)

    for document in corpus:
        period = assign_period(document).label
        for entity_type in entity_types:
            by_period[(document.language, entity_type, period)] += Counts()
        for sentence in document.sentences:
            gold_by_type = defaultdict(list)
            for span in decode_entities(sentence):
                gold_by_type[span.entity_type].append(span)
            for entity_type in entity_types:
                items = store.items.get((document.id, sentence.id, entity_type), [])
                gold = gold_by_type[entity_type]
                windows = item_windows(items, sentence)
                for threshold in thresholds:
                    by_threshold[(document.language, entity_type, threshold)] += classify(items, sentence, gold, threshold, windows)
                by_period[(document.language, entity_type, period)] += classify(items, sentence, gold, period_threshold, windows)

    rows = []
    languages = languages_in(corpus)
    for language in languages:
        for entity_type in entity_types:
            for threshold in thresholds:
                counts = by_threshold[(language, entity_type, threshold)]
                rows.append(MetricsRow(language, entity_type.value, None, threshold, counts))
    for language in languages:
        for entity_type in entity_types:
            periods = sorted({key[2] for key in by_period if key[0] == language and key[1] == entity_type}, key=_period_sort_key)
            for period in periods:
                rows.append(MetricsRow(language, entity_type.value, period, period_threshold, by_period[(language, entity_type, period)]))
    return rows


def micro_average(rows):
    """Sums threshold rows over entity types, one ALL row per (language, threshold)."""
    totals = defaultdict(Counts)
    for row in rows:
        if row.period is None and row.entity_type != ALL_ENTITIES:
            totals[(row.language, row.threshold)] += row.counts
    keys = sorted(totals, key=lambda key: (_language_order(key[0]), key[1]))
    return [MetricsRow(language, ALL_ENTITIES, None, threshold, totals[(language, threshold)]) for language, threshold in keys]


def baseline_table():
    return [
        BaselineRow("en", 0.794, 0.817, 0.806),
        BaselineRow("de", 0.870, 0.886, 0.878),
        BaselineRow("fr", 0.912, 0.931, 0.921),
    ]


def _format_float(value):
    return "{0:.3f}".format(value)


def format_csv(rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for row in rows:
        writer.writerow(
            (
                row.language,
                row.entity_type,
                row.period or "",
                _format_float(row.threshold),
                row.counts.tp,
                row.counts.fp,
                row.counts.fn,
                _format_float(row.precision),
                _format_float(row.recall),
                _format_float(row.f1),
            )
        )
    return buffer.getvalue()


def format_json(rows, baselines=None, metadata=None):
    payload = {
        "metadata": dict(metadata or {}, fp_counting=FP_COUNTING),
        "rows": [row.to_dict() for row in rows],
        "micro": [row.to_dict() for row in micro_average(rows)],
        "baselines": [
            {"language": row.language, "precision": row.precision, "recall": row.recall, "f1": row.f1}
            for row in (baselines or [])
        ],
    }
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def rows_from_csv(text):
    return [MetricsRow.from_dict(record) for record in csv.DictReader(io.StringIO(text))]


def rows_from_json(text):
    return [MetricsRow.from_dict(record) for record in json.loads(text)["rows"]]


def _language_order(language):
    return LANGUAGE_ORDER.get(language, len(LANGUAGE_ORDER))


def _period_counts(rows, period_threshold):
    """Period rows at period_threshold, keyed by (language, entity type, period)."""
    return {
        (row.language, row.entity_type, row.period): row.counts
        for row in rows
        if row.period is not None and abs(row.threshold - period_threshold) < EPSILON
    }


def chart_series(rows, metric, by="threshold", period_threshold=PERIOD_THRESHOLD):
    """
    Series of (x labels, y values) to plot. By threshold and by period there
    is one series per language, summed over entity types; by entity there is
    one series per entity type with the languages on the x axis, summed over
    periods at period_threshold.
    """
    series = {}
    if by == "threshold":
        for row in micro_average(rows):
            xs, ys = series.setdefault(row.language, ([], []))
            xs.append(_format_float(row.threshold)[:3])
            ys.append(getattr(row, metric))
        return series

    totals = defaultdict(Counts)
    for (language, entity_type, period), counts in _period_counts(rows, period_threshold).items():
        if by == "period":
            totals[(language, period)] += counts
        else:
            totals[(entity_type, language)] += counts

    if by == "period":
        keys = sorted(totals, key=lambda key: (_language_order(key[0]), _period_sort_key(key[1])))
        for language, period in keys:
            xs, ys = series.setdefault(language, ([], []))
            xs.append(period)
            ys.append(getattr(MetricsRow(language, ALL_ENTITIES, period, period_threshold, totals[(language, period)]), metric))
        return series

    keys = sorted(totals, key=lambda key: (ENTITY_POSITION.get(key[0], len(ENTITY_POSITION)), _language_order(key[1])))
    for entity_type, language in keys:
        xs, ys = series.setdefault(entity_type, ([], []))
        xs.append(language)
        ys.append(getattr(MetricsRow(language, entity_type, None, period_threshold, totals[(entity_type, language)]), metric))
    return series


def render_svg(rows, metric="precision", by="threshold", period_threshold=PERIOD_THRESHOLD):
    """Line chart of chart_series; each line carries the id series-<key>, key being a language or an entity type."""
    if metric not in CHART_METRICS:
        raise ReportError("unknown metric {0!r}".format(metric))
    if by not in CHART_AXES:
        raise ReportError("unknown chart axis {0!r}".format(by))

    figure, axes = plt.subplots(figsize=(7, 4))
    try:
        for key, (xs, ys) in chart_series(rows, metric, by, period_threshold).items():
            (line,) = axes.plot(xs, ys, marker=MARKERS.get(key, "o"), label=key)
            line.set_gid("series-" + key)
        axes.set_xlabel(AXIS_LABELS[by].format(period_threshold))
        axes.set_ylabel(metric)
        axes.set_ylim(0.0, 1.05)
        if axes.get_legend_handles_labels()[0]:
            axes.legend()
        figure.tight_layout()
        buffer = io.StringIO()
        with plt.rc_context({"svg.hashsalt": SVG_SALT}):
            figure.savefig(buffer, format="svg", metadata={"Date": None})
    finally:
        plt.close(figure)
    return buffer.getvalue()


def report(rows, baselines=None, format="csv", metadata=None, metric="precision", by="threshold"):
    if format == "csv":
        return format_csv(rows)
    if format == "json":
        return format_json(rows, baselines, metadata)
    if format == "svg":
        return render_svg(rows, metric, by)
    raise ReportError("unknown report format {0!r}, expected one of {1}".format(format, ", ".join(REPORT_FORMATS)))
