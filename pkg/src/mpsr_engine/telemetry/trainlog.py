import os, hashlib, json, logging
from pathlib import Path
from typing import Any, Optional

logger = logging.getLogger("mpsr.telemetry.trainlog")

LOG_EVERY = int(os.getenv("MPSR_LOG_EVERY", "20"))


def fingerprint(obj: Any) -> str:
    """Short stable hash of a JSON-able object (config snapshots, dataset manifests)."""
    try:
        raw = obj if isinstance(obj, (bytes, str)) else json.dumps(obj, sort_keys=True, default=str)
        if isinstance(raw, str):
            raw = raw.encode("utf-8", "ignore")
        return hashlib.sha256(raw).hexdigest()[:12]
    except (TypeError, ValueError):
        return "na"


class TrainLog:
    """
    Appends one JSON line per training iteration and logs a summary every
    `log_every` iterations. Lines look like
    {"stage", "iteration", "lr", "losses": {...}, "counts": {...}, "lambda"}.
    """

    def __init__(self, path: Optional[str | Path], *, stage: str, log_every: int = LOG_EVERY):
        self.path = Path(path) if path else None
        self.stage = stage
        self.log_every = max(1, log_every)
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, iteration: int, lr: float, breakdown, *, extra_counts: Optional[dict] = None, span=None) -> dict:
        counts = breakdown.counts()
        if extra_counts:
            counts.update(extra_counts)
        line = {
            "stage": self.stage,
            "iteration": iteration,
            "lr": lr,
            "losses": breakdown.losses(),
            "counts": counts,
            "lambda": breakdown.lam,
        }
        if self.path:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(line) + "\n")

        if span:  # OpenTelemetry
            span.add_event("train.step", attributes={"iteration": iteration, "loss": breakdown.total})

        if iteration % self.log_every == 0:
            logger.info(
                "train.step",
                extra={"stage": self.stage, "iteration": iteration, "lr": lr, "loss": breakdown.total, **counts},
            )
        return line


def read_train_log(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        return []
    return [json.loads(l) for l in p.read_text(encoding="utf-8").splitlines() if l.strip()]
