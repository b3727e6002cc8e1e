from __future__ import annotations
import json, logging, os, sys
from logging.handlers import RotatingFileHandler
from typing import Any, Optional

# --- OpenTelemetry (local-friendly) ---
from opentelemetry import trace
from opentelemetry.sdk.resources import Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor, ConsoleSpanExporter, SimpleSpanProcessor
try:
    from opentelemetry.exporter.otlp.proto.grpc.trace_exporter import OTLPSpanExporter
except Exception:  # pragma: no cover
    OTLPSpanExporter = None  # optional dep

ROOT_LOGGER = "mpsr"
TEXT_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"

# LogRecord attributes that are not `extra=` fields
_STD_KEYS = frozenset(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {"message", "asctime"}


def extract_extras(record: logging.LogRecord) -> dict:
    """Custom attributes set via `extra=...` (plus run_id/command from the context filter)."""
    return {k: v for k, v in record.__dict__.items() if k not in _STD_KEYS}


def _plain(v: Any) -> Any:
    """numpy / torch scalars -> python numbers; everything else untouched."""
    item = getattr(v, "item", None)
    if callable(item) and getattr(v, "ndim", 1) == 0:
        try:
            return item()
        except (TypeError, ValueError, RuntimeError):
            return v
    return v


def _kv(v: Any) -> str:
    v = _plain(v)
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _json_safe(v: Any) -> Any:
    v = _plain(v)
    try:
        json.dumps(v)
        return v
    except (TypeError, ValueError):
        return str(v)


# ---- formatters --------------------------------------------------------------
class DynamicJsonFormatter(logging.Formatter):
    """One JSON object per record; `extra` fields are merged in at top level."""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": self.formatTime(record, "%Y-%m-%dT%H:%M:%S"),
            "level": record.levelname,
            "logger": record.name,
            "msg": record.getMessage(),
        }
        payload.update({k: _json_safe(v) for k, v in extract_extras(record).items()})
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False)


class SafeKVFormatter(logging.Formatter):
    """Text line followed by ` | k=v ...` for the extras, sorted by key."""

    def format(self, record: logging.LogRecord) -> str:
        base = super().format(record)
        extras = extract_extras(record)
        if not extras:
            return base
        return base + " | " + " ".join(f"{k}={_kv(extras[k])}" for k in sorted(extras))


# ---- setup -------------------------------------------------------------------
def setup_logging(
    level: Optional[str] = None,
    json_mode: Optional[bool] = None,
    log_file: Optional[str] = None,
) -> logging.Logger:
    """
    (Re)configure the 'mpsr' logger tree. Arguments left as None come from env:
      MPSR_LOG_LEVEL=DEBUG|INFO|...   (default INFO)
      MPSR_LOG_JSON=0|1               JSON lines instead of key=value text
      MPSR_LOG_FILE=/path/to/file.log adds a rotating file handler
    Console output goes to stderr so command output on stdout stays clean.
    """
    lvl = (level or os.getenv("MPSR_LOG_LEVEL", "INFO")).upper()
    if json_mode is None:
        json_mode = os.getenv("MPSR_LOG_JSON", "0") == "1"
    log_file = log_file or os.getenv("MPSR_LOG_FILE", "").strip() or None

    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(lvl)
    logger.propagate = False
    logger.handlers.clear()

    fmt = DynamicJsonFormatter() if json_mode else SafeKVFormatter(TEXT_FORMAT)
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        os.makedirs(os.path.dirname(log_file) or ".", exist_ok=True)
        handlers.append(RotatingFileHandler(log_file, maxBytes=2_000_000, backupCount=3))
    for h in handlers:
        h.setLevel(lvl)
        h.setFormatter(fmt)
        logger.addHandler(h)
    return logger


def setup_tracing(service_name: str = ROOT_LOGGER, exporter: str = "console"):
    """
    Install a tracer provider. exporter: 'console' or 'otlp' (needs the OTLP
    exporter package and a collector; falls back to console without it).
    OTLP honours OTEL_EXPORTER_OTLP_ENDPOINT and the other OTEL_* variables.
    """
    from .. import __version__

    resource = Resource.create({"service.name": service_name, "service.version": __version__})
    provider = TracerProvider(resource=resource)
    if exporter == "otlp" and OTLPSpanExporter is not None:
        provider.add_span_processor(BatchSpanProcessor(OTLPSpanExporter()))
    else:
        # commands are short-lived; print spans as they end
        provider.add_span_processor(SimpleSpanProcessor(ConsoleSpanExporter(out=sys.stderr)))
    trace.set_tracer_provider(provider)
    return trace.get_tracer(service_name)
