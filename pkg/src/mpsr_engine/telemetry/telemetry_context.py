from __future__ import annotations

import logging
import uuid
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Iterator, Optional

from .telemetry import ROOT_LOGGER

# ---------------------------------------------------------------------------
# Correlation IDs carried via ContextVars
# ---------------------------------------------------------------------------
run_id_var: ContextVar[Optional[str]] = ContextVar("mpsr_run_id", default=None)
command_var: ContextVar[Optional[str]] = ContextVar("mpsr_command", default=None)


class RunIdFilter(logging.Filter):
    """
    Injects run_id/command from ContextVars into every log record so formatters
    can render them. Attached by `run_logging_session`.
    """
    def filter(self, record: logging.LogRecord) -> bool:
        rid = run_id_var.get()
        cmd = command_var.get()
        if rid:
            setattr(record, "run_id", rid)
        if cmd:
            setattr(record, "command", cmd)
        return True


_FILTER = RunIdFilter()


@contextmanager
def run_logging_session(command: str, run_id: Optional[str] = None) -> Iterator[str]:
    """
    Tag every 'mpsr.*' record emitted inside the block with a run_id and the
    command name. Safe to nest: the inner block keeps the outer run_id unless
    one is passed explicitly.

    Yields:
        run_id (str): the id in effect for the block.
    """
    root = logging.getLogger(ROOT_LOGGER)
    # logger-level filters skip records propagated from child loggers,
    # so the filter goes on the root's handlers
    attached: list[logging.Handler] = []
    for h in root.handlers:
        if not any(isinstance(f, RunIdFilter) for f in h.filters):
            h.addFilter(_FILTER)
            attached.append(h)

    existing = run_id_var.get()
    rid = run_id or existing or uuid.uuid4().hex[:8]
    run_token = run_id_var.set(rid)
    cmd_token = command_var.set(command)
    try:
        yield rid
    finally:
        command_var.reset(cmd_token)
        run_id_var.reset(run_token)
        for h in attached:
            h.removeFilter(_FILTER)
