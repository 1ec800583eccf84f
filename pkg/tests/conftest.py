from pathlib import Path

import pytest
from loguru import logger

from backend import Generator, MockBackend, ResponseCache
from corpus import Document, PublicationDate, Sentence, Token, load_corpus

DATA_DIR = Path(__file__).parent / "data"

FIXTURE_FILES = {
    ("en", "dev"): DATA_DIR / "hipe_en_dev.tsv",
    ("de", "train"): DATA_DIR / "hipe_de_train.tsv",
    ("de", "dev"): DATA_DIR / "hipe_de_dev.tsv",
    ("fr", "dev"): DATA_DIR / "hipe_fr_dev.tsv",
}


@pytest.fixture
def data_dir():
    return DATA_DIR


@pytest.fixture
def fixture_corpus():
    return load_corpus(FIXTURE_FILES, ("train", "dev"))


@pytest.fixture
def caplog(caplog):
    handler_id = logger.add(caplog.handler, format="{message}", level="DEBUG")
    yield caplog
    logger.remove(handler_id)


@pytest.fixture
def make_sentence():
    def _make(surfaces, tags=None, sentence_id=0):
        if isinstance(surfaces, str):
            surfaces = surfaces.split()
        tags = tags or ["O"] * len(surfaces)
        return Sentence(sentence_id, tuple(Token(surface, index, tag) for index, (surface, tag) in enumerate(zip(surfaces, tags))))

    return _make


@pytest.fixture
def make_document(make_sentence):
    def _make(document_id, language, year, *sentences, month=None, day=None):
        built = tuple(
            make_sentence(surfaces, tags, sentence_id=index)
            for index, (surfaces, tags) in enumerate(sentences)
        )
        return Document(document_id, language, PublicationDate(year, month, day), built)

    return _make


@pytest.fixture
def make_mock():
    """Factory for scripted mock backends."""

    def _make(script=None, strict=True, default=""):
        return MockBackend(script or {}, strict=strict, default=default)

    return _make


@pytest.fixture
def make_generator(make_mock):
    def _make(script=None, strict=True, default="", cache_path=None, parallelism=2):
        backend = make_mock(script, strict, default)
        return Generator(backend, ResponseCache(cache_path), parallelism)

    return _make
