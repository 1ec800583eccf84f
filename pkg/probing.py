"""
Language identification and publication-date probes.

Both probes send one prompt per item through a Generator and score the
free-text answers: the language probe by keyword containment, the date probe
by the first plausible four-digit year.
"""
import csv
import io
import random
import re
import statistics
import unicodedata
from dataclasses import dataclass
from typing import Optional

from loguru import logger

from backend import DEFAULT_MAX_NEW_TOKENS, STAGE_PROBE, GenerationRequest
from corpus import LANGUAGES
from errors import BackendError, ProbeError
from fileio import write_text_atomic
from prompting import DATE_PROBE_TOKENS, document_probe_text, render_date_probe, render_language_probe

LANGUAGE_KEYWORDS = (
    ("en", ("english",)),
    ("de", ("german", "deutsch")),
    ("fr", ("french", "français")),
)

WILI_LABELS = {"en": "eng", "de": "deu", "fr": "fra"}

YEAR_PATTERN = re.compile(r"(?<!\d)(\d{4})(?!\d)")
MIN_YEAR = 1400
MAX_YEAR = 2100

REFERENCE_LANGUAGE_ACCURACY = {"fr": 0.830, "de": 0.741, "en": 0.354}
REFERENCE_DATE_ERRORS = {"en": (40.48, 30.0), "de": (40.11, 32.0), "fr": (55.25, 48.0)}

LANGUAGE_HEADER = ("language", "n", "accuracy")
DATE_HEADER = ("language", "n_scored", "n_unparsed", "mean_abs_error", "median_abs_error")


@dataclass(frozen=True)
class WiliSentence:
    index: int
    text: str
    language: str


@dataclass(frozen=True)
class LanguageProbeResult:
    reference: str
    gold: str
    answer: str
    predicted: Optional[str] = None

    @property
    def correct(self):
        return self.predicted == self.gold


@dataclass(frozen=True)
class DateProbeResult:
    document_id: str
    language: str
    gold_year: int
    answer: str
    predicted_year: Optional[int] = None

    @property
    def absolute_error(self):
        if self.predicted_year is None:
            return None
        return abs(self.predicted_year - self.gold_year)


@dataclass(frozen=True)
class LanguageAccuracy:
    language: str
    n: int
    correct: int

    @property
    def accuracy(self):
        return self.correct / self.n if self.n else 0.0


@dataclass(frozen=True)
class DateErrorSummary:
    language: str
    n_scored: int
    n_unparsed: int
    mean_abs_error: Optional[float]
    median_abs_error: Optional[float]


def parse_language_answer(raw):
    folded = unicodedata.normalize("NFC", raw).casefold()
    for language, keywords in LANGUAGE_KEYWORDS:
        if any(keyword in folded for keyword in keywords):
            return language
    return None


def parse_year(raw):
    for match in YEAR_PATTERN.finditer(raw):
        year = int(match.group(1))
        if MIN_YEAR <= year <= MAX_YEAR:
            return year
    return None


def _language_order(language):
    return LANGUAGES.index(language) if language in LANGUAGES else len(LANGUAGES)


def language_accuracy(results):
    """Accuracy per gold language; unparsed answers count as wrong."""
    totals = {}
    correct = {}
    for result in results:
        totals[result.gold] = totals.get(result.gold, 0) + 1
        correct[result.gold] = correct.get(result.gold, 0) + int(result.correct)
    return [LanguageAccuracy(language, totals[language], correct[language]) for language in sorted(totals, key=_language_order)]


def date_errors(results):
    by_language = {}
    for result in results:
        by_language.setdefault(result.language, []).append(result)

    summaries = []
    for language in sorted(by_language, key=_language_order):
        errors = [result.absolute_error for result in by_language[language] if result.absolute_error is not None]
        unparsed = len(by_language[language]) - len(errors)
        if not errors:
            logger.warning("no parseable year among {0} {1} answer(s)", unparsed, language)
            summaries.append(DateErrorSummary(language, 0, unparsed, None, None))
            continue
        summaries.append(
            DateErrorSummary(language, len(errors), unparsed, float(statistics.mean(errors)), float(statistics.median(errors)))
        )
    return summaries


def _read_lines(path):
    try:
        with open(path, encoding="utf-8") as handle:
            return handle.read().splitlines()
    except (OSError, UnicodeDecodeError) as error:
        raise ProbeError("cannot read {0}: {1}".format(path, error)) from error


def sample_wili_subset(sentences_path, labels_path, per_language=1000, seed=0):
    """
    Draws per_language sentences for each of en, de and fr from a WiLI pair of
    files (x: one sentence per line, y: one label per line). The draw depends
    only on the file contents, per_language and seed.
    """
    sentences = _read_lines(sentences_path)
    labels = [label.strip() for label in _read_lines(labels_path)]
    if len(sentences) != len(labels):
        raise ProbeError("{0} has {1} line(s) but {2} has {3}".format(sentences_path, len(sentences), labels_path, len(labels)))

    generator = random.Random(seed)
    subset = []
    for language in LANGUAGES:
        indexes = [index for index, label in enumerate(labels) if label == WILI_LABELS[language]]
        if len(indexes) < per_language:
            raise ProbeError(
                "asked for {0} {1} sentence(s) but only {2} are available".format(per_language, language, len(indexes))
            )
        chosen = sorted(generator.sample(indexes, per_language))
        subset.extend(WiliSentence(index, sentences[index], language) for index in chosen)
    return subset


def run_language_probe(sentences, generator, templates=None, max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """Returns (results, errors); failed requests are left out of the results."""
    batch = []
    for sentence in sentences:
        prompt = render_language_probe(sentence.text, templates, str(sentence.index))
        batch.append((sentence, GenerationRequest(prompt.text, max_new_tokens, STAGE_PROBE)))
    answers = generator.generate_all(request for _, request in batch)

    results, errors = [], []
    unparsed = 0
    for sentence, request in batch:
        answer = answers[request.key]
        if isinstance(answer, BackendError):
            errors.append(dict(answer.as_dict(), reference=str(sentence.index)))
            continue
        predicted = parse_language_answer(answer.text)
        unparsed += predicted is None
        results.append(LanguageProbeResult(str(sentence.index), sentence.language, answer.text, predicted))
    if unparsed:
        logger.warning("{0} language answer(s) named no known language", unparsed)
    return results, errors


def run_date_probe(corpus, generator, templates=None, max_tokens=DATE_PROBE_TOKENS, max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    batch = []
    for document in corpus:
        prompt = render_date_probe(document_probe_text(document, max_tokens), templates, document.id)
        batch.append((document, GenerationRequest(prompt.text, max_new_tokens, STAGE_PROBE)))
    answers = generator.generate_all(request for _, request in batch)

    results, errors = [], []
    for document, request in batch:
        answer = answers[request.key]
        if isinstance(answer, BackendError):
            errors.append(dict(answer.as_dict(), reference=document.id))
            continue
        predicted = parse_year(answer.text)
        if predicted is None:
            logger.warning("no year in answer for {0}: {1!r}", document.id, answer.text)
        results.append(DateProbeResult(document.id, document.language, document.year, answer.text, predicted))
    return results, errors


def _optional(value, pattern):
    return "" if value is None else pattern.format(value)


def format_language_csv(accuracies):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(LANGUAGE_HEADER)
    for row in accuracies:
        writer.writerow((row.language, row.n, "{0:.3f}".format(row.accuracy)))
    return buffer.getvalue()


def format_date_csv(summaries):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(DATE_HEADER)
    for row in summaries:
        writer.writerow(
            (row.language, row.n_scored, row.n_unparsed, _optional(row.mean_abs_error, "{0:.2f}"), _optional(row.median_abs_error, "{0:.2f}"))
        )
    return buffer.getvalue()


def write_language_csv(accuracies, path):
    return write_text_atomic(path, format_language_csv(accuracies))


def write_date_csv(summaries, path):
    return write_text_atomic(path, format_date_csv(summaries))
