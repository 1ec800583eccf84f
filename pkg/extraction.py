"""
The extraction pipeline.

1. Every sentence is sent with the generation prompt of every entity type.
2. Answers are split into items and matched against runs of sentence
   tokens; overlapping matches of one type collapse to the longest span.
3. Token ranges claimed by several types go through pairwise
   disambiguation prompts in fixed type order.

Each step is kept in the PredictionStore and written to one JSONL file.
"""
import json
from dataclasses import dataclass, field
from typing import Optional

from loguru import logger

from backend import DEFAULT_MAX_NEW_TOKENS, STAGE_DISAMBIGUATION, STAGE_GENERATION, GenerationRequest
from corpus import ENTITY_ORDER, EntityType
from errors import BackendError, HarnessError
from fileio import write_text_atomic
from metrics import best_window, within
from prompting import TYPE_NOUNS, render_disambiguation, render_generation

DEFAULT_MATCH_THRESHOLD = 0.4

ECHO_WORDS = {
    entity_type: {noun} | set(noun.split(" or "))
    for entity_type, noun in TYPE_NOUNS.items()
}

TYPE_KEYWORDS = {
    EntityType.PERS: ("person",),
    EntityType.LOC: ("location",),
    EntityType.ORG: ("organization", "organisation"),
    EntityType.TIME: ("date",),
    EntityType.PROD: ("media", "doctrine"),
}


@dataclass(frozen=True)
class RawAnswer:
    document_id: str
    sentence_id: int
    entity_type: EntityType
    text: str
    request_id: str = ""


@dataclass(frozen=True)
class AnswerItem:
    text: str
    position: int


@dataclass(frozen=True)
class CandidatePrediction:
    entity_type: Optional[EntityType]
    item: AnswerItem
    start: Optional[int] = None
    end: Optional[int] = None
    distance: Optional[float] = None
    echoes_entity_name: bool = False

    def __post_init__(self):
        if (self.start is None) != (self.distance is None):
            raise ValueError("a match needs both a token range and a distance")

    @property
    def matched(self):
        return self.start is not None

    @property
    def length(self):
        return self.end - self.start + 1

    def overlaps(self, other):
        return self.start <= other.end and other.start <= self.end


@dataclass(frozen=True)
class DisambiguationTask:
    document_id: str
    sentence_id: int
    start: int
    end: int
    surface: str
    types: tuple

    def __post_init__(self):
        if len(self.types) < 2 or len(set(self.types)) != len(self.types):
            raise ValueError("a disambiguation task needs at least two distinct types")


@dataclass(frozen=True)
class DisambiguationOutcome:
    task: DisambiguationTask
    answers: tuple
    winner: Optional[EntityType]


@dataclass(frozen=True)
class FinalLabel:
    entity_type: EntityType
    start: int
    end: int
    surface: str
    item: str
    distance: float


@dataclass
class PipelineConfig:
    threshold: float = DEFAULT_MATCH_THRESHOLD
    entity_types: tuple = ENTITY_ORDER
    templates: Optional[dict] = None
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("matching threshold must lie in [0, 1]")


@dataclass
class PredictionStore:
    """Results of every pipeline step, keyed by (document_id, sentence_id, entity_type)."""

    threshold: float = DEFAULT_MATCH_THRESHOLD
    entity_types: tuple = ENTITY_ORDER
    answers: dict = field(default_factory=dict)
    items: dict = field(default_factory=dict)
    matches: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    outcomes: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.errors

    def records(self):
        yield {"document_id": None, "sentence_id": None, "entity_type": None, "stage": "meta",
               "threshold": self.threshold, "entity_types": [entity_type.value for entity_type in self.entity_types]}
        for key, answer in self.answers.items():
            document_id, sentence_id, entity_type = key
            head = {"document_id": document_id, "sentence_id": sentence_id, "entity_type": entity_type.value}
            yield dict(head, stage="generation", request_id=answer.request_id, answer=answer.text)
            yield dict(head, stage="parsed", items=[item.text for item in self.items.get(key, [])])
            yield dict(head, stage="matched", predictions=[_prediction_record(p) for p in self.matches.get(key, [])])
            yield dict(head, stage="final", labels=[_label_record(label) for label in self.labels.get(key, [])])
        for outcome in self.outcomes:
            task = outcome.task
            yield {
                "document_id": task.document_id,
                "sentence_id": task.sentence_id,
                "entity_type": outcome.winner.value if outcome.winner else None,
                "stage": "disambiguation",
                "start": task.start,
                "end": task.end,
                "surface": task.surface,
                "types": [entity_type.value for entity_type in task.types],
                "answers": list(outcome.answers),
            }
        for error in self.errors:
            yield dict(error, stage="error")

    def to_jsonl(self):
        return "".join(json.dumps(record, ensure_ascii=False) + "\n" for record in self.records())

    def save(self, path):
        return write_text_atomic(path, self.to_jsonl())


def _prediction_record(prediction):
    return {
        "item": prediction.item.text,
        "position": prediction.item.position,
        "start": prediction.start,
        "end": prediction.end,
        "distance": prediction.distance,
        "echo": prediction.echoes_entity_name,
    }


def _label_record(label):
    return {"start": label.start, "end": label.end, "surface": label.surface, "item": label.item, "distance": label.distance}


def load_store(path):
    """Reads a store written by PredictionStore.save."""
    store = PredictionStore()
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                _load_record(store, record)
            except (ValueError, KeyError, TypeError) as error:
                raise HarnessError("{0} line {1}: unreadable prediction record ({2})".format(path, line_number, error)) from error
    return store


def _load_record(store, record):
    stage = record["stage"]
    if stage == "meta":
        store.threshold = record["threshold"]
        store.entity_types = tuple(EntityType(value) for value in record["entity_types"])
        return
    if stage == "error":
        store.errors.append({key: value for key, value in record.items() if key != "stage"})
        return
    if stage == "disambiguation":
        task = DisambiguationTask(record["document_id"], record["sentence_id"], record["start"], record["end"],
                                  record["surface"], tuple(EntityType(value) for value in record["types"]))
        winner = EntityType(record["entity_type"]) if record["entity_type"] else None
        store.outcomes.append(DisambiguationOutcome(task, tuple(record["answers"]), winner))
        return

    entity_type = EntityType(record["entity_type"])
    key = (record["document_id"], record["sentence_id"], entity_type)
    if stage == "generation":
        store.answers[key] = RawAnswer(key[0], key[1], entity_type, record["answer"], record.get("request_id", ""))
    elif stage == "parsed":
        store.items[key] = [AnswerItem(text, position) for position, text in enumerate(record["items"])]
    elif stage == "matched":
        store.matches[key] = [
            CandidatePrediction(entity_type, AnswerItem(p["item"], p["position"]), p["start"], p["end"], p["distance"], p["echo"])
            for p in record["predictions"]
        ]
    elif stage == "final":
        store.labels[key] = [
            FinalLabel(entity_type, label["start"], label["end"], label["surface"], label["item"], label["distance"])
            for label in record["labels"]
        ]
    else:
        raise ValueError("unknown stage {0!r}".format(stage))


def parse_answer(raw):
    """Splits an answer on commas, trims whitespace and trailing periods, drops repeats."""
    items = []
    seen = set()
    for segment in raw.split(","):
        text = segment.strip().rstrip(".").strip()
        if not text:
            continue
        folded = text.casefold()
        if folded in seen:
            continue
        seen.add(folded)
        items.append(AnswerItem(text, len(items)))
    return items


def is_echo(text, entity_type):
    return text.strip().rstrip(".").strip().casefold() in ECHO_WORDS[entity_type]


def match_items(items, sentence, threshold, entity_type=None):
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    surfaces = sentence.surfaces if hasattr(sentence, "surfaces") else list(sentence)
    predictions = []
    for item in items:
        echo = entity_type is not None and is_echo(item.text, entity_type)
        window = best_window(item.text, surfaces)
        if window is not None and within(window[2], threshold):
            predictions.append(CandidatePrediction(entity_type, item, window[0], window[1], window[2], echo))
        else:
            predictions.append(CandidatePrediction(entity_type, item, echoes_entity_name=echo))
    return predictions


def resolve_nested(predictions):
    """Keeps the longest of every group of overlapping matches; equal lengths keep the earlier start."""
    matched = [prediction for prediction in predictions if prediction.matched]
    ordered = sorted(matched, key=lambda p: (-p.length, p.start, p.item.position))
    kept = []
    for prediction in ordered:
        if not any(prediction.overlaps(other) for other in kept):
            kept.append(prediction)
    return sorted(kept, key=lambda p: (p.start, p.end))


def detect_conflicts(per_type, sentence, document_id="", sentence_id=None):
    """One task per group of overlapping ranges claimed by two or more types."""
    surfaces = sentence.surfaces if hasattr(sentence, "surfaces") else list(sentence)
    if sentence_id is None:
        sentence_id = getattr(sentence, "id", 0)
    claims = sorted(
        (prediction.start, prediction.end, ENTITY_ORDER.index(entity_type))
        for entity_type, predictions in per_type.items()
        for prediction in predictions
        if prediction.matched
    )
    groups = []
    for start, end, type_index in claims:
        if groups and start <= groups[-1][1]:
            groups[-1][1] = max(groups[-1][1], end)
            groups[-1][2].add(type_index)
        else:
            groups.append([start, end, {type_index}])

    tasks = []
    for start, end, type_indexes in groups:
        if len(type_indexes) < 2:
            continue
        types = tuple(ENTITY_ORDER[index] for index in sorted(type_indexes))
        tasks.append(DisambiguationTask(document_id, sentence_id, start, end, " ".join(surfaces[start:end + 1]), types))
    return tasks


def apply_disambiguation(task, answer, pair=None):
    """
    Maps a free-text answer onto one of the competing types by keyword
    containment. Returns None when no type or more than one type matches.
    """
    candidates = tuple(pair) if pair is not None else task.types
    folded = answer.casefold()
    hits = [entity_type for entity_type in candidates if any(word in folded for word in TYPE_KEYWORDS[entity_type])]
    if len(hits) == 1:
        return hits[0]
    return None


class _Contest:
    def __init__(self, task, sentence_text):
        self.task = task
        self.sentence_text = sentence_text
        self.winner = task.types[0]
        self.remaining = list(task.types[1:])
        self.answers = []
        self.done = False


def _error_record(document_id, sentence_id, entity_type, stage, error):
    return {
        "document_id": document_id,
        "sentence_id": sentence_id,
        "entity_type": entity_type.value if entity_type else None,
        "failed_stage": stage,
        "request_id": error.request_id,
        "message": str(error),
    }


def _disambiguate(contests, generator, config, store):
    round_number = 0
    while True:
        active = [contest for contest in contests if not contest.done]
        if not active:
            return
        round_number += 1
        batch = []
        for contest in active:
            challenger = contest.remaining[0]
            prompt = render_disambiguation(contest.sentence_text, contest.task.surface, contest.winner, challenger,
                                           config.templates, "{0}/{1}".format(contest.task.document_id, contest.task.sentence_id))
            batch.append((contest, challenger, GenerationRequest(prompt.text, config.max_new_tokens, STAGE_DISAMBIGUATION)))
        logger.info("disambiguation round {0}: {1} prompt(s)", round_number, len(batch))
        results = generator.generate_all(request for _, _, request in batch)

        for contest, challenger, request in batch:
            result = results[request.key]
            if isinstance(result, BackendError):
                store.errors.append(_error_record(contest.task.document_id, contest.task.sentence_id, None, STAGE_DISAMBIGUATION, result))
                contest.winner = None
                contest.done = True
                continue
            contest.answers.append(result.text)
            contest.winner = apply_disambiguation(contest.task, result.text, (contest.winner, challenger))
            if contest.winner is None:
                logger.warning("conflict on {0!r} unresolved, answer {1!r}", contest.task.surface, result.text)
                contest.done = True
                continue
            contest.remaining.pop(0)
            contest.done = not contest.remaining


def run_pipeline(corpus, generator, config=None):
    config = config or PipelineConfig()
    store = PredictionStore(config.threshold, tuple(config.entity_types))

    cells = []
    for document in corpus:
        for sentence in document.sentences:
            for entity_type in config.entity_types:
                reference = "{0}/{1}".format(document.id, sentence.id)
                prompt = render_generation(sentence.text, entity_type, config.templates, reference)
                request = GenerationRequest(prompt.text, config.max_new_tokens, STAGE_GENERATION)
                cells.append((document, sentence, entity_type, request))
    logger.info("{0} generation prompt(s) for {1} document(s)", len(cells), len(corpus))
    results = generator.generate_all(request for *_, request in cells)

    sentences = {}
    for document, sentence, entity_type, request in cells:
        key = (document.id, sentence.id, entity_type)
        sentences[(document.id, sentence.id)] = sentence
        result = results[request.key]
        if isinstance(result, BackendError):
            store.errors.append(_error_record(document.id, sentence.id, entity_type, STAGE_GENERATION, result))
            continue
        store.answers[key] = RawAnswer(document.id, sentence.id, entity_type, result.text, request.request_id)
        store.items[key] = parse_answer(result.text)
        store.matches[key] = match_items(store.items[key], sentence, config.threshold, entity_type)

    survivors = {}
    contests = []
    for (document_id, sentence_id), sentence in sentences.items():
        per_type = {}
        for entity_type in config.entity_types:
            key = (document_id, sentence_id, entity_type)
            if key in store.matches:
                per_type[entity_type] = resolve_nested(store.matches[key])
        survivors[(document_id, sentence_id)] = per_type
        for task in detect_conflicts(per_type, sentence, document_id, sentence_id):
            contests.append(_Contest(task, sentence.text))

    _disambiguate(contests, generator, config, store)

    for contest in contests:
        task = contest.task
        store.outcomes.append(DisambiguationOutcome(task, tuple(contest.answers), contest.winner))
        per_type = survivors[(task.document_id, task.sentence_id)]
        for entity_type in task.types:
            if entity_type == contest.winner:
                continue
            per_type[entity_type] = [
                prediction for prediction in per_type.get(entity_type, [])
                if not (prediction.start <= task.end and task.start <= prediction.end)
            ]

    for (document_id, sentence_id), per_type in survivors.items():
        sentence = sentences[(document_id, sentence_id)]
        for entity_type, predictions in per_type.items():
            store.labels[(document_id, sentence_id, entity_type)] = [
                FinalLabel(entity_type, p.start, p.end, " ".join(sentence.surfaces[p.start:p.end + 1]), p.item.text, p.distance)
                for p in predictions
            ]

    if store.errors:
        logger.warning("{0} request(s) failed; results are partial", len(store.errors))
    return store


@dataclass(frozen=True)
class Diagnostics:
    echo_rate: dict
    unmatched_rate: Optional[float]
    empty_answer_count: int
    disambiguation_count: int
    unresolved_conflicts: int


def diagnostics(store):
    answered = {entity_type: 0 for entity_type in store.entity_types}
    echoes = {entity_type: 0 for entity_type in store.entity_types}
    empty = 0
    for answer in store.answers.values():
        answered[answer.entity_type] = answered.get(answer.entity_type, 0) + 1
        if is_echo(answer.text, answer.entity_type):
            echoes[answer.entity_type] = echoes.get(answer.entity_type, 0) + 1
        if not answer.text.strip():
            empty += 1

    echo_rate = {entity_type: (echoes[entity_type] / count if count else None) for entity_type, count in answered.items()}
    predictions = [prediction for matches in store.matches.values() for prediction in matches]
    unmatched = sum(1 for prediction in predictions if not prediction.matched)
    unmatched_rate = unmatched / len(predictions) if predictions else None
    unresolved = sum(1 for outcome in store.outcomes if outcome.winner is None)
    return Diagnostics(echo_rate, unmatched_rate, empty, len(store.outcomes), unresolved)
