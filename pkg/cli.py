"""
Command line entry point.

    python cli.py --config settings.ini stats
    python cli.py --config settings.ini --mock-script script.json run
    python cli.py --config settings.ini eval

Values come from the [settings] section of the INI file; flags win over the
file. The backend URL is read from --backend-url or GENERATION_BACKEND_URL.
"""
import json
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import typer
from decouple import Config, Csv, RepositoryIni, config as env_config
from loguru import logger
from tabulate import tabulate

from backend import Generator, MockBackend, ResponseCache, TextGenerationApi
from corpus import LANGUAGES, SPLITS, corpus_stats, load_corpus, parse_entity_types, write_stats_csv
from errors import ConfigError, HarnessError
from extraction import PipelineConfig, diagnostics, load_store, run_pipeline
from fileio import write_text_atomic
from metrics import CHART_AXES, CHART_METRICS, baseline_table, format_csv, format_json, micro_average, render_svg, rows_from_csv, sweep
from probing import (
    REFERENCE_DATE_ERRORS,
    REFERENCE_LANGUAGE_ACCURACY,
    date_errors,
    language_accuracy,
    run_date_probe,
    run_language_probe,
    sample_wili_subset,
    write_date_csv,
    write_language_csv,
)
from prompting import load_templates

BACKEND_URL_VARIABLE = "GENERATION_BACKEND_URL"

DEFAULTS = {
    "splits": "train,dev",
    "threshold": "0.4",
    "thresholds": "0.0,0.1,0.2,0.3,0.4,0.5",
    "period_threshold": "0.4",
    "parallelism": "4",
    "seed": "0",
    "out": "out",
    "cache": "",
    "mock_script": "",
    "templates": "",
    "max_new_tokens": "64",
    "timeout": "30",
    "retries": "3",
    "entity_types": "PERS,LOC,ORG,TIME,PROD",
    "date_probe_tokens": "100",
    "wili_sentences": "",
    "wili_labels": "",
    "wili_per_language": "1000",
}

STATS_FILE = "corpus_stats.csv"
PREDICTIONS_FILE = "predictions.jsonl"
CACHE_FILE = "cache.jsonl"
METRICS_CSV = "metrics.csv"
METRICS_JSON = "metrics.json"
LANGUAGE_PROBE_FILE = "probe_language.csv"
DATE_PROBE_FILE = "probe_date.csv"
REPORT_DIR = "report"

app = typer.Typer(help="Zero-shot prompt NER harness for historical newspaper corpora.", add_completion=False)


@dataclass
class Flags:
    config: Path
    backend_url: Optional[str] = None
    mock_script: Optional[Path] = None
    threshold: Optional[float] = None
    thresholds: Optional[str] = None
    parallelism: Optional[int] = None
    seed: Optional[int] = None
    out: Optional[Path] = None
    splits: Optional[str] = None
    entity_types: Optional[str] = None


@dataclass
class RunConfig:
    corpus_paths: dict
    splits: tuple
    backend_url: str
    mock_script: Optional[Path]
    templates: Optional[Path]
    threshold: float
    thresholds: tuple
    period_threshold: float
    parallelism: int
    cache: Path
    seed: int
    out: Path
    max_new_tokens: int = 64
    timeout: float = 30.0
    retries: int = 3
    entity_types: tuple = ()
    date_probe_tokens: int = 100
    wili_sentences: Optional[Path] = None
    wili_labels: Optional[Path] = None
    wili_per_language: int = 1000
    source: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        for value in (self.threshold, self.period_threshold) + tuple(self.thresholds):
            if not 0.0 <= value <= 1.0:
                raise ConfigError("thresholds must lie in [0, 1], got {0}".format(value))
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")
        if not self.thresholds:
            raise ConfigError("no evaluation thresholds configured")
        if not self.entity_types:
            raise ConfigError("no entity types configured")
        unknown = [split for split in self.splits if split not in SPLITS]
        if unknown:
            raise ConfigError("unknown split(s)", unknown)

    def require_corpus(self):
        wanted = {key: path for key, path in self.corpus_paths.items() if key[1] in self.splits}
        if not wanted:
            raise ConfigError(
                "missing configuration key(s)",
                ["corpus_<language>_{0}".format(split) for split in self.splits],
            )
        missing = [str(path) for path in wanted.values() if not path.is_file()]
        if missing:
            raise ConfigError("corpus file(s) not found", missing)
        return wanted

    def metadata(self):
        return {
            "splits": list(self.splits),
            "threshold": self.threshold,
            "thresholds": list(self.thresholds),
            "period_threshold": self.period_threshold,
            "entity_types": [entity_type.value for entity_type in self.entity_types],
            "seed": self.seed,
        }


def _resolve(base, value):
    if not value:
        return None
    path = Path(value)
    return path if path.is_absolute() else base / path


def load_run_config(flags):
    """Reads the [settings] section of the INI file and applies flag overrides."""
    path = Path(flags.config)
    if not path.is_file():
        raise ConfigError("configuration file not found", [str(path)])
    settings = Config(RepositoryIni(str(path)))
    base = path.resolve().parent

    def setting(key, cast=str, override=None):
        if override is not None:
            return cast(override) if isinstance(override, str) else override
        return settings(key, default=DEFAULTS[key], cast=cast)

    corpus_paths = {}
    for language in LANGUAGES:
        for split in SPLITS:
            value = settings("corpus_{0}_{1}".format(language, split), default="")
            if value:
                corpus_paths[(language, split)] = _resolve(base, value)

    out = flags.out if flags.out is not None else _resolve(base, setting("out"))
    cache = _resolve(base, setting("cache")) or out / CACHE_FILE
    mock_script = flags.mock_script or _resolve(base, setting("mock_script"))
    backend_url = flags.backend_url or ""
    if not backend_url and mock_script is None:
        backend_url = env_config(BACKEND_URL_VARIABLE, default="")

    try:
        return RunConfig(
            corpus_paths=corpus_paths,
            splits=tuple(setting("splits", Csv(), flags.splits)),
            backend_url=backend_url,
            mock_script=mock_script,
            templates=_resolve(base, setting("templates")),
            threshold=setting("threshold", float, flags.threshold),
            thresholds=tuple(setting("thresholds", Csv(cast=float), flags.thresholds)),
            period_threshold=setting("period_threshold", float),
            parallelism=setting("parallelism", int, flags.parallelism),
            cache=cache,
            seed=setting("seed", int, flags.seed),
            out=out,
            max_new_tokens=setting("max_new_tokens", int),
            timeout=setting("timeout", float),
            retries=setting("retries", int),
            entity_types=parse_entity_types(setting("entity_types", Csv(), flags.entity_types)),
            date_probe_tokens=setting("date_probe_tokens", int),
            wili_sentences=_resolve(base, setting("wili_sentences")),
            wili_labels=_resolve(base, setting("wili_labels")),
            wili_per_language=setting("wili_per_language", int),
            source=path,
        )
    except ValueError as error:
        raise ConfigError("invalid value in {0}: {1}".format(path, error)) from error


def configure_logging(verbose):
    logger.remove()
    logger.add(
        sys.stderr,
        level="DEBUG" if verbose else "INFO",
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}",
    )


def _summary(command, status, errors):
    typer.echo(json.dumps({"command": command, "status": status, "errors": errors}, ensure_ascii=False), err=True)


@contextmanager
def _command(name):
    try:
        yield
    except ConfigError as error:
        logger.error(str(error))
        _summary(name, "usage", [{"message": str(error), "missing": error.missing}])
        raise typer.Exit(code=2)
    except HarnessError as error:
        logger.error(str(error))
        _summary(name, "failed", [{"message": str(error)}])
        raise typer.Exit(code=1)
    except KeyboardInterrupt:
        logger.warning("interrupted, cache flushed")
        _summary(name, "interrupted", [])
        raise typer.Exit(code=130)


def _fail_partial(name, errors):
    for error in errors:
        logger.error("request {0} failed: {1}", error.get("request_id"), error.get("message"))
    _summary(name, "failed", errors)
    raise typer.Exit(code=1)


def build_backend(config):
    if config.backend_url:
        logger.info("using backend at {0}", config.backend_url)
        return TextGenerationApi(config.backend_url, config.timeout, config.retries)
    if config.mock_script is not None:
        if not config.mock_script.is_file():
            raise ConfigError("mock script not found", [str(config.mock_script)])
        logger.info("using scripted mock backend from {0}", config.mock_script)
        return MockBackend.from_file(config.mock_script)
    raise ConfigError("no backend configured", ["mock_script", BACKEND_URL_VARIABLE])


@contextmanager
def open_generator(config):
    backend = build_backend(config)
    with ResponseCache(config.cache) as cache:
        yield Generator(backend, cache, config.parallelism)
        cache.compact()


def _templates(config):
    if config.templates is None:
        return None
    if not config.templates.is_file():
        raise ConfigError("template file not found", [str(config.templates)])
    return load_templates(config.templates)


def _corpus(config):
    return load_corpus(config.require_corpus(), config.splits)


def _table(rows, headers):
    typer.echo(tabulate(rows, headers=headers, tablefmt="github", floatfmt=".3f"))


@app.callback()
def main(
    ctx: typer.Context,
    config: Path = typer.Option(Path("settings.ini"), "--config", help="INI file with a [settings] section"),
    backend_url: Optional[str] = typer.Option(None, "--backend-url", help="Text generation endpoint (else " + BACKEND_URL_VARIABLE + ")"),
    mock_script: Optional[Path] = typer.Option(None, "--mock-script", help="JSON prompt -> response script for the mock backend"),
    threshold: Optional[float] = typer.Option(None, "--threshold", help="Matching threshold of the extraction pipeline"),
    thresholds: Optional[str] = typer.Option(None, "--thresholds", help="Comma separated evaluation thresholds"),
    parallelism: Optional[int] = typer.Option(None, "--parallelism", help="Concurrent backend requests"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed of the WiLI sample"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    splits: Optional[str] = typer.Option(None, "--splits", help="Comma separated corpus splits, e.g. train,dev or test"),
    entity_types: Optional[str] = typer.Option(None, "--entity-types", help="Comma separated entity types"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
):
    configure_logging(verbose)
    ctx.obj = Flags(config, backend_url, mock_script, threshold, thresholds, parallelism, seed, out, splits, entity_types)


@app.command("stats")
def cmd_stats(ctx: typer.Context):
    """Documents, tokens and entity-token share per period and language."""
    with _command("stats"):
        config = load_run_config(ctx.obj)
        rows = corpus_stats(_corpus(config))
        path = write_stats_csv(rows, config.out / STATS_FILE)
        _table(
            [(row.period, row.language, row.n_documents, row.n_tokens, "-" if row.ne_token_percent is None else row.ne_token_percent) for row in rows],
            ("period", "language", "documents", "tokens", "NE %"),
        )
        logger.info("wrote {0}", path)


@app.command("run")
def cmd_run(ctx: typer.Context):
    """Queries every sentence with every generation prompt and stores each step."""
    with _command("run"):
        config = load_run_config(ctx.obj)
        corpus = _corpus(config)
        pipeline = PipelineConfig(config.threshold, config.entity_types, _templates(config), config.max_new_tokens)
        with open_generator(config) as generator:
            store = run_pipeline(corpus, generator, pipeline)
        path = store.save(config.out / PREDICTIONS_FILE)
        logger.info("wrote {0}", path)

        counters = diagnostics(store)
        _table(
            [(entity_type.value, rate) for entity_type, rate in counters.echo_rate.items()],
            ("entity", "echo rate"),
        )
        logger.info(
            "unmatched rate {0}, empty answers {1}, disambiguation prompts {2}, unresolved {3}",
            counters.unmatched_rate,
            counters.empty_answer_count,
            counters.disambiguation_count,
            counters.unresolved_conflicts,
        )
        if store.errors:
            _fail_partial("run", store.errors)


@app.command("eval")
def cmd_eval(ctx: typer.Context):
    """Scores stored predictions over the threshold sweep and the period bins."""
    with _command("eval"):
        config = load_run_config(ctx.obj)
        corpus = _corpus(config)
        predictions = config.out / PREDICTIONS_FILE
        if not predictions.is_file():
            raise ConfigError("no prediction store, run the pipeline first", [str(predictions)])
        store = load_store(predictions)
        rows = sweep(store, corpus, config.thresholds, config.period_threshold)
        write_text_atomic(config.out / METRICS_CSV, format_csv(rows))
        write_text_atomic(config.out / METRICS_JSON, format_json(rows, baseline_table(), config.metadata()))
        _print_micro(rows)


def _print_micro(rows):
    baselines = {row.language: row for row in baseline_table()}
    table = []
    for row in micro_average(rows):
        baseline = baselines.get(row.language)
        table.append((row.language, row.threshold, row.precision, row.recall, row.f1, baseline.f1 if baseline else None))
    _table(table, ("language", "threshold", "precision", "recall", "f1", "baseline f1"))


@app.command("probe-lang")
def cmd_probe_language(ctx: typer.Context):
    """Asks for the language of sampled WiLI sentences."""
    with _command("probe-lang"):
        config = load_run_config(ctx.obj)
        missing = [key for key in ("wili_sentences", "wili_labels") if getattr(config, key) is None]
        if missing:
            raise ConfigError("missing configuration key(s)", missing)
        absent = [str(path) for path in (config.wili_sentences, config.wili_labels) if not path.is_file()]
        if absent:
            raise ConfigError("WiLI file(s) not found", absent)
        sentences = sample_wili_subset(config.wili_sentences, config.wili_labels, config.wili_per_language, config.seed)
        with open_generator(config) as generator:
            results, errors = run_language_probe(sentences, generator, _templates(config), config.max_new_tokens)
        accuracies = language_accuracy(results)
        write_language_csv(accuracies, config.out / LANGUAGE_PROBE_FILE)
        _table(
            [(row.language, row.n, row.accuracy, REFERENCE_LANGUAGE_ACCURACY.get(row.language)) for row in accuracies],
            ("language", "n", "accuracy", "reference"),
        )
        if errors:
            _fail_partial("probe-lang", errors)


@app.command("probe-date")
def cmd_probe_date(ctx: typer.Context):
    """Asks for the publication year of every document."""
    with _command("probe-date"):
        config = load_run_config(ctx.obj)
        corpus = _corpus(config)
        with open_generator(config) as generator:
            results, errors = run_date_probe(corpus, generator, _templates(config), config.date_probe_tokens, config.max_new_tokens)
        summaries = date_errors(results)
        write_date_csv(summaries, config.out / DATE_PROBE_FILE)
        _table(
            [
                (row.language, row.n_scored, row.n_unparsed, row.mean_abs_error, row.median_abs_error)
                + REFERENCE_DATE_ERRORS.get(row.language, (None, None))
                for row in summaries
            ],
            ("language", "scored", "unparsed", "mean", "median", "reference mean", "reference median"),
        )
        if errors:
            _fail_partial("probe-date", errors)


@app.command("report")
def cmd_report(ctx: typer.Context):
    """Bundles the metrics as CSV, JSON and SVG charts under <out>/report/."""
    with _command("report"):
        config = load_run_config(ctx.obj)
        metrics = config.out / METRICS_CSV
        if not metrics.is_file():
            raise ConfigError("no metrics to report, run eval first", [str(metrics)])
        with open(metrics, encoding="utf-8") as handle:
            rows = rows_from_csv(handle.read())

        target = config.out / REPORT_DIR
        write_text_atomic(target / METRICS_CSV, format_csv(rows))
        write_text_atomic(target / METRICS_JSON, format_json(rows, baseline_table(), config.metadata()))
        for metric in CHART_METRICS:
            for by in CHART_AXES:
                svg = render_svg(rows, metric, by, config.period_threshold)
                write_text_atomic(target / "{0}_by_{1}.svg".format(metric, by), svg)
        _print_micro(rows)
        logger.info("report written to {0}", target)


if __name__ == "__main__":
    app()
