"""
Reads CLEF-HIPE style TSV files into documents, sentences and tokens.

Only the TOKEN, NE-COARSE-LIT and MISC columns are read. Coarse literal tags
are normalized to O / B-<TYPE> / I-<TYPE>; nested, fine-grained and linking
columns are ignored.
"""
import csv
import io
import re
from collections import defaultdict
from dataclasses import dataclass
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Optional

from loguru import logger

from errors import CorpusParseError, DocumentDateError, DuplicateDocumentError, HarnessError, PeriodError
from fileio import write_text_atomic

LANGUAGES = ("en", "de", "fr")
SPLITS = ("train", "dev", "test")

FIRST_YEAR = 1790
LAST_YEAR = 2010
TABLE_END_YEAR = 1950
PERIOD_YEARS = 20

OUTSIDE = "O"
TOKEN_COLUMN = "TOKEN"
TAG_COLUMN = "NE-COARSE-LIT"
MISC_COLUMN = "MISC"
END_OF_SENTENCE = "EndOfSentence"

STATS_HEADER = ("period", "language", "documents", "tokens", "ne_percent")

DATE_PATTERN = re.compile(r"^(\d{4})(?:-(\d{1,2})(?:-(\d{1,2}))?)?$")


class EntityType(str, Enum):
    PERS = "PERS"
    LOC = "LOC"
    ORG = "ORG"
    TIME = "TIME"
    PROD = "PROD"


ENTITY_ORDER = tuple(EntityType)


def parse_entity_types(values):
    """Accepts "PERS,LOC" or an iterable of names and returns them in fixed order."""
    if isinstance(values, str):
        values = values.split(",")
    wanted = {EntityType(str(value).strip().upper()) for value in values if str(value).strip()}
    return tuple(entity_type for entity_type in ENTITY_ORDER if entity_type in wanted)


def normalize_tag(raw):
    raw = (raw or "").strip()
    if raw in ("", OUTSIDE, "_"):
        return OUTSIDE
    prefix, sep, kind = raw.partition("-")
    prefix = prefix.upper()
    if not sep or prefix not in ("B", "I"):
        logger.warning("unknown tag {0!r} mapped to O", raw)
        return OUTSIDE
    try:
        entity_type = EntityType(kind.upper())
    except ValueError:
        logger.warning("unknown entity type in tag {0!r} mapped to O", raw)
        return OUTSIDE
    return "{0}-{1}".format(prefix, entity_type.value)


def split_tag(tag):
    if tag == OUTSIDE:
        return OUTSIDE, None
    prefix, _, kind = tag.partition("-")
    return prefix, EntityType(kind)


@dataclass(frozen=True)
class Token:
    surface: str
    index: int
    coarse_lit_tag: str = OUTSIDE

    def __post_init__(self):
        if not self.surface.strip():
            raise ValueError("token surface is empty")


@dataclass(frozen=True)
class Sentence:
    id: int
    tokens: tuple

    @property
    def surfaces(self):
        return [token.surface for token in self.tokens]

    @property
    def text(self):
        return " ".join(self.surfaces)

    @property
    def tags(self):
        return [token.coarse_lit_tag for token in self.tokens]


@dataclass(frozen=True)
class PublicationDate:
    year: int
    month: Optional[int] = None
    day: Optional[int] = None

    @classmethod
    def parse(cls, raw):
        """Accepts YYYY, YYYY-MM and YYYY-MM-DD."""
        match = DATE_PATTERN.match((raw or "").strip())
        if match is None:
            raise ValueError("unparseable date {0!r}".format(raw))
        year, month, day = (int(part) if part else None for part in match.groups())
        if month is not None and not 1 <= month <= 12:
            raise ValueError("month out of range in {0!r}".format(raw))
        if day is not None:
            date(year, month, day)
        return cls(year, month, day)

    def __str__(self):
        text = "{0:04d}".format(self.year)
        if self.month is not None:
            text += "-{0:02d}".format(self.month)
        if self.day is not None:
            text += "-{0:02d}".format(self.day)
        return text


@dataclass(frozen=True)
class Document:
    id: str
    language: str
    date: PublicationDate
    sentences: tuple

    def __post_init__(self):
        if self.language not in LANGUAGES:
            raise ValueError("unsupported language {0!r}".format(self.language))

    @property
    def year(self):
        return self.date.year

    @property
    def n_tokens(self):
        return sum(len(sentence.tokens) for sentence in self.sentences)


@dataclass(frozen=True)
class EntitySpan:
    entity_type: EntityType
    start: int
    end: int
    surface: str = ""

    @property
    def length(self):
        return self.end - self.start + 1


@dataclass(frozen=True)
class PeriodBin:
    start_year: int
    end_year: int

    @property
    def label(self):
        return "{0}-{1}".format(self.start_year, self.end_year)

    @property
    def in_table(self):
        return self.start_year < TABLE_END_YEAR

    def __contains__(self, year):
        return self.start_year <= year < self.end_year


@dataclass(frozen=True)
class StatsRow:
    period: str
    language: str
    n_documents: int
    n_tokens: int
    n_entity_tokens: int
    ne_token_percent: Optional[float]


class _DocumentBuilder:
    """Collects rows into documents while the TSV is read line by line."""

    def __init__(self, language):
        self.language = language
        self.documents = []
        self.bad_dates = []
        self.pending_date = None
        self.document_id = None
        self.raw_date = None
        self.sentences = []
        self.tokens = []

    def comment(self, line):
        key, sep, value = line.lstrip("#").partition("=")
        if not sep:
            return
        key = key.strip().lower()
        value = value.strip()
        if key == "document_id":
            self.close_document()
            self.document_id = value
            self.raw_date, self.pending_date = self.pending_date, None
        elif key == "date":
            # HIPE writes the date before the id, so it usually belongs to the next document
            if self.document_id is not None and self.raw_date is None and not self.sentences and not self.tokens:
                self.raw_date = value
            else:
                self.pending_date = value

    def token(self, surface, tag, flags, line_number):
        if self.document_id is None:
            raise CorpusParseError("token row outside of a document", line_number)
        surface = surface.strip()
        if not surface:
            logger.warning("line {0}: blank token skipped", line_number)
            return
        self.tokens.append(Token(surface, len(self.tokens), normalize_tag(tag)))
        if END_OF_SENTENCE in flags:
            self.end_sentence()

    def end_sentence(self):
        if self.tokens:
            self.sentences.append(Sentence(len(self.sentences), tuple(self.tokens)))
            self.tokens = []

    def close_document(self):
        if self.document_id is None:
            return
        self.end_sentence()
        try:
            publication = PublicationDate.parse(self.raw_date)
            if not FIRST_YEAR <= publication.year <= LAST_YEAR:
                raise ValueError("year {0} outside {1}-{2}".format(publication.year, FIRST_YEAR, LAST_YEAR))
        except (ValueError, TypeError) as error:
            logger.error("document {0}: {1}", self.document_id, error)
            self.bad_dates.append(self.document_id)
        else:
            self.documents.append(Document(self.document_id, self.language, publication, tuple(self.sentences)))
        self.document_id = None
        self.raw_date = None
        self.sentences = []
        self.tokens = []

    def finish(self):
        self.close_document()
        if self.bad_dates:
            raise DocumentDateError(self.bad_dates)
        return self.documents


def _read_header(fields, line_number):
    columns = {name.strip(): position for position, name in enumerate(fields)}
    missing = [name for name in (TOKEN_COLUMN, TAG_COLUMN) if name not in columns]
    if missing:
        raise CorpusParseError("malformed header, missing column(s) {0}".format(", ".join(missing)), line_number)
    return columns


def _field(fields, columns, name, default=""):
    position = columns.get(name)
    if position is None or position >= len(fields):
        return default
    return fields[position]


def parse_hipe_tsv(stream, language):
    """
    Parses a HIPE TSV byte (or text) stream into a list of Document.

    A blank line or an EndOfSentence flag in MISC ends a sentence; a
    `# document_id` comment starts a new document.
    """
    if language not in LANGUAGES:
        raise CorpusParseError("unsupported language {0!r}".format(language))
    data = stream.read()
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8-sig")
        except UnicodeDecodeError as error:
            raise CorpusParseError("input is not UTF-8: {0}".format(error))

    builder = _DocumentBuilder(language)
    columns = None
    for line_number, line in enumerate(data.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            builder.end_sentence()
            continue
        if line.startswith("#") and "\t" not in line:
            builder.comment(line)
            continue
        fields = line.split("\t")
        if columns is None:
            columns = _read_header(fields, line_number)
            continue
        flags = _field(fields, columns, MISC_COLUMN).split("|")
        builder.token(_field(fields, columns, TOKEN_COLUMN), _field(fields, columns, TAG_COLUMN, OUTSIDE), flags, line_number)

    documents = builder.finish()
    logger.debug("parsed {0} {1} document(s)", len(documents), language)
    return documents


def read_hipe_file(path, language):
    with open(path, "rb") as handle:
        return parse_hipe_tsv(handle, language)


def spans_from_tags(tags, surfaces=None):
    """
    Decodes IOB tags into maximal (type, start, end) spans. An I- tag that
    does not continue a span of the same type opens a new one.
    """
    spans = []
    current = None
    start = 0
    for position, tag in enumerate(tags):
        prefix, entity_type = split_tag(tag)
        if prefix == "I" and entity_type == current:
            continue
        if current is not None:
            spans.append((current, start, position - 1))
            current = None
        if entity_type is not None:
            current, start = entity_type, position
    if current is not None:
        spans.append((current, start, len(tags) - 1))

    result = []
    for entity_type, first, last in spans:
        surface = " ".join(surfaces[first:last + 1]) if surfaces is not None else ""
        result.append(EntitySpan(entity_type, first, last, surface))
    return result


def decode_entities(sentence):
    return spans_from_tags(sentence.tags, sentence.surfaces)


def encode_entities(spans, length):
    tags = [OUTSIDE] * length
    for span in spans:
        tags[span.start] = "B-" + span.entity_type.value
        for position in range(span.start + 1, span.end + 1):
            tags[position] = "I-" + span.entity_type.value
    return tags


def repair_tags(tags):
    return encode_entities(spans_from_tags(tags), len(tags))


def merge_splits(*splits):
    """Concatenates document lists of one language, rejecting repeated ids."""
    merged = []
    seen = set()
    languages = set()
    for split in splits:
        for document in split or ():
            if document.id in seen:
                raise DuplicateDocumentError(document.id)
            seen.add(document.id)
            languages.add(document.language)
            merged.append(document)
    if len(languages) > 1:
        raise HarnessError("cannot merge documents of several languages: {0}".format(", ".join(sorted(languages))))
    return merged


def period_for_year(year):
    if year < FIRST_YEAR:
        raise PeriodError("year {0} is before {1}".format(year, FIRST_YEAR))
    start = FIRST_YEAR + PERIOD_YEARS * ((year - FIRST_YEAR) // PERIOD_YEARS)
    return PeriodBin(start, start + PERIOD_YEARS)


def assign_period(document):
    return period_for_year(document.year)


def table_periods():
    return [PeriodBin(start, start + PERIOD_YEARS) for start in range(FIRST_YEAR, TABLE_END_YEAR, PERIOD_YEARS)]


def entity_token_count(document):
    return sum(span.length for sentence in document.sentences for span in decode_entities(sentence))


def _percent(part, whole):
    if whole == 0:
        return None
    return round(100.0 * part / whole, 1)


def languages_in(corpus):
    present = {document.language for document in corpus}
    return [language for language in LANGUAGES if language in present]


def corpus_stats(corpus):
    """
    Documents, tokens and entity-token percentage per (period, language).

    Documents dated 1950 or later are left out of every row. Each language
    gets a Total row; an `all` Total row is added when several languages
    are present.
    """
    cells = defaultdict(lambda: [0, 0, 0])
    skipped = 0
    for document in corpus:
        period = assign_period(document)
        if not period.in_table:
            skipped += 1
            continue
        cell = cells[(period.start_year, document.language)]
        cell[0] += 1
        cell[1] += document.n_tokens
        cell[2] += entity_token_count(document)
    if skipped:
        logger.warning("{0} document(s) dated {1} or later left out of the statistics", skipped, TABLE_END_YEAR)

    languages = languages_in(corpus)
    rows = []
    for period in table_periods():
        for language in languages:
            n_documents, n_tokens, n_entity = cells.get((period.start_year, language), (0, 0, 0))
            rows.append(StatsRow(period.label, language, n_documents, n_tokens, n_entity, _percent(n_entity, n_tokens)))

    grand = [0, 0, 0]
    for language in languages:
        totals = [0, 0, 0]
        for row in rows:
            if row.language == language:
                totals[0] += row.n_documents
                totals[1] += row.n_tokens
                totals[2] += row.n_entity_tokens
        rows.append(StatsRow("Total", language, totals[0], totals[1], totals[2], _percent(totals[2], totals[1])))
        grand = [grand[i] + totals[i] for i in range(3)]
    if len(languages) > 1:
        rows.append(StatsRow("Total", "all", grand[0], grand[1], grand[2], _percent(grand[2], grand[1])))
    return rows


def format_stats_csv(rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(STATS_HEADER)
    for row in rows:
        percent = "-" if row.ne_token_percent is None else "{0:.1f}".format(row.ne_token_percent)
        writer.writerow((row.period, row.language, row.n_documents, row.n_tokens, percent))
    return buffer.getvalue()


def write_stats_csv(rows, path):
    return write_text_atomic(path, format_stats_csv(rows))


def serialize_documents(documents):
    """Writes documents back in a minimal HIPE layout that parse_hipe_tsv reads unchanged."""
    lines = ["\t".join((TOKEN_COLUMN, TAG_COLUMN, MISC_COLUMN))]
    for document in documents:
        lines.append("# date = {0}".format(document.date))
        lines.append("# document_id = {0}".format(document.id))
        for sentence in document.sentences:
            last = len(sentence.tokens) - 1
            for token in sentence.tokens:
                misc = END_OF_SENTENCE if token.index == last else "_"
                lines.append("\t".join((token.surface, token.coarse_lit_tag, misc)))
    return "\n".join(lines) + "\n"


def load_corpus(paths, splits=("train", "dev")):
    """
    Reads and merges corpus files.

    paths maps (language, split) to a file path. Missing splits are skipped,
    since English ships without a training set.
    """
    corpus = []
    for language in LANGUAGES:
        parts = []
        for split in splits:
            path = paths.get((language, split))
            if path is None:
                continue
            documents = read_hipe_file(Path(path), language)
            logger.info("{0} {1}: {2} document(s) from {3}", language, split, len(documents), path)
            parts.append(documents)
        if parts:
            corpus.extend(merge_splits(*parts))
    return corpus
