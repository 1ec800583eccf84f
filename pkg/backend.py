import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import requests
from loguru import logger
from requests.adapters import HTTPAdapter, Retry

from errors import BackendError, CacheError, CacheMissError
from fileio import write_text_atomic

DEFAULT_MAX_NEW_TOKENS = 64
DEFAULT_PARALLELISM = 4
GREEDY = {"do_sample": False}
MOCK_TIMESTAMP = "1970-01-01T00:00:00+00:00"

STAGE_GENERATION = "generation"
STAGE_DISAMBIGUATION = "disambiguation"
STAGE_PROBE = "probe"


def utc_now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    stage: str = STAGE_GENERATION
    decoding: dict = field(default_factory=lambda: dict(GREEDY))

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt is empty")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")

    @property
    def parameters(self):
        parameters = {"max_new_tokens": self.max_new_tokens}
        parameters.update(self.decoding)
        return parameters

    @property
    def request_id(self):
        body = json.dumps({"prompt": self.prompt, "parameters": self.parameters}, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(body.encode("utf-8")).hexdigest()[:24]

    @property
    def key(self):
        return (self.request_id, self.stage)


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    backend_name: str
    elapsed: float = 0.0
    created_at: str = ""
    cached: bool = False


@dataclass(frozen=True)
class CacheRecord:
    request_id: str
    stage: str
    prompt: str
    response: str
    backend: str
    parameters: dict
    timestamp: str

    @property
    def key(self):
        return (self.request_id, self.stage)

    def to_json(self):
        return json.dumps(
            {
                "request_id": self.request_id,
                "stage": self.stage,
                "prompt": self.prompt,
                "response": self.response,
                "backend": self.backend,
                "parameters": self.parameters,
                "timestamp": self.timestamp,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line, line_number=None):
        try:
            data = json.loads(line)
            return cls(
                data["request_id"],
                data["stage"],
                data["prompt"],
                data["response"],
                data.get("backend", ""),
                data.get("parameters", {}),
                data.get("timestamp", ""),
            )
        except (ValueError, KeyError, TypeError) as error:
            raise CacheError("unreadable record ({0})".format(error), line_number) from error

    def as_response(self):
        return GenerationResponse(self.response, self.backend, 0.0, self.timestamp, cached=True)


class TextGenerationApi:
    """Client for a text-generation-inference style HTTP endpoint."""

    NAME = "http"
    STATUS_FORCELIST = (500, 502, 503, 504)

    def __init__(self, url, timeout=30, retries=3, backoff=0.5):
        self.url = url
        self.timeout = timeout
        retry = Retry(
            total=retries,
            backoff_factor=backoff,
            status_forcelist=self.STATUS_FORCELIST,
            allowed_methods=frozenset(["POST"]),
            raise_on_status=False,
        )
        self.session = requests.Session()
        adapter = HTTPAdapter(max_retries=retry)
        self.session.mount("http://", adapter)
        self.session.mount("https://", adapter)

    def generate_body(self, request):
        return {"inputs": request.prompt, "parameters": request.parameters}

    def send_post_request(self, body, request_id):
        try:
            response = self.session.post(self.url, json=body, timeout=self.timeout)
            response.raise_for_status()
            return response.json()
        except requests.exceptions.RequestException as error:
            raise BackendError("request to {0} failed: {1}".format(self.url, error), request_id) from error
        except ValueError as error:
            raise BackendError("backend returned a non-JSON body: {0}".format(error), request_id) from error

    @staticmethod
    def extract_text(data):
        if isinstance(data, list) and data:
            data = data[0]
        if isinstance(data, dict):
            for key in ("generated_text", "text"):
                if isinstance(data.get(key), str):
                    return data[key]
        return None

    def generate(self, request):
        start = time.monotonic()
        data = self.send_post_request(self.generate_body(request), request.request_id)
        text = self.extract_text(data)
        if text is None:
            raise BackendError("response body has no generated text", request.request_id)
        return GenerationResponse(text, self.NAME, time.monotonic() - start, utc_now())


class MockBackend:
    """
    Scripted backend: answers each prompt from a prompt -> response mapping.

    A strict mock raises on prompts it has no answer for; otherwise it
    returns `default`. Responses carry a fixed timestamp so runs are
    reproducible byte for byte.
    """

    NAME = "mock"

    def __init__(self, script=None, strict=True, default=""):
        self.script = dict(script or {})
        self.strict = strict
        self.default = default
        self.call_count = 0
        self.calls = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path, strict=True):
        try:
            with open(path, encoding="utf-8") as handle:
                data = json.load(handle)
            if isinstance(data, list):
                data = {entry["prompt"]: entry["response"] for entry in data}
        except (ValueError, KeyError, TypeError) as error:
            raise BackendError("unreadable mock script {0}: {1}".format(path, error)) from error
        if not isinstance(data, dict):
            raise BackendError("mock script {0} must map prompts to responses".format(path))
        return cls(data, strict=strict)

    def generate(self, request):
        with self._lock:
            self.call_count += 1
            self.calls.append(request.prompt)
        if request.prompt in self.script:
            text = self.script[request.prompt]
        elif self.strict:
            raise BackendError("no scripted response", request.request_id)
        else:
            text = self.default
        return GenerationResponse(text, self.NAME, 0.0, MOCK_TIMESTAMP)


class ResponseCache:
    """
    Append-only JSONL store of backend answers, one record per
    (request_id, stage). Without a path the cache lives in memory only.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = {}
        self._lock = threading.Lock()
        self._handle = None
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8") as handle:
            for line_number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                record = CacheRecord.from_json(line, line_number)
                self.records.setdefault(record.key, record)
        logger.debug("loaded {0} cached response(s) from {1}", len(self.records), self.path)

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def get(self, request_id, stage):
        return self.records.get((request_id, stage))

    def find(self, request_id, stage=None):
        if stage is not None:
            return self.get(request_id, stage)
        for record in self.records.values():
            if record.request_id == request_id:
                return record
        return None

    def append(self, record):
        with self._lock:
            if record.key in self.records:
                return False
            self.records[record.key] = record
            if self.path is not None:
                if self._handle is None:
                    self.path.parent.mkdir(parents=True, exist_ok=True)
                    self._handle = open(self.path, "a", encoding="utf-8")
                self._handle.write(record.to_json() + "\n")
                self._handle.flush()
        return True

    def close(self):
        with self._lock:
            if self._handle is not None:
                self._handle.close()
                self._handle = None

    def compact(self):
        """Rewrites the file sorted by (stage, request_id)."""
        self.close()
        if self.path is None:
            return
        with self._lock:
            ordered = sorted(self.records.values(), key=lambda record: (record.stage, record.request_id))
            write_text_atomic(self.path, "".join(record.to_json() + "\n" for record in ordered))


def replay(cache, request_id, stage=None):
    record = cache.find(request_id, stage)
    if record is None:
        raise CacheMissError("no cached response for request {0}".format(request_id))
    return record.as_response()


class Generator:
    """Serves requests from the cache first and sends misses to the backend."""

    def __init__(self, backend, cache=None, parallelism=DEFAULT_PARALLELISM):
        if parallelism < 1:
            raise ValueError("parallelism must be at least 1")
        self.backend = backend
        self.cache = cache if cache is not None else ResponseCache()
        self.parallelism = parallelism

    @property
    def name(self):
        return getattr(self.backend, "NAME", type(self.backend).__name__)

    def generate(self, request):
        record = self.cache.get(request.request_id, request.stage)
        if record is not None:
            return record.as_response()
        response = self.backend.generate(request)
        self.cache.append(
            CacheRecord(
                request.request_id,
                request.stage,
                request.prompt,
                response.text,
                response.backend_name,
                request.parameters,
                response.created_at,
            )
        )
        return response

    def _generate_or_error(self, request):
        try:
            return self.generate(request)
        except BackendError as error:
            if error.request_id is None:
                error.request_id = request.request_id
            logger.error("{0} request {1} failed: {2}", request.stage, request.request_id, error)
            return error

    def generate_all(self, requests_):
        """
        Runs requests on a bounded thread pool. Returns a dict keyed by
        (request_id, stage) holding a GenerationResponse or the BackendError.
        """
        unique = {}
        for request in requests_:
            unique.setdefault(request.key, request)
        results = {}
        if not unique:
            return results

        pool = ThreadPoolExecutor(max_workers=self.parallelism)
        try:
            futures = {pool.submit(self._generate_or_error, request): key for key, request in unique.items()}
            for future in as_completed(futures):
                results[futures[future]] = future.result()
        except BaseException:
            # running workers finish before the caller closes the cache
            pool.shutdown(wait=True, cancel_futures=True)
            raise
        pool.shutdown()
        return results
