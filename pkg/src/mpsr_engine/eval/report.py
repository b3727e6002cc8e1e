from __future__ import annotations
import csv, json, logging, time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from opentelemetry import trace
from opentelemetry.trace import Status, StatusCode
from rich.console import Console
from rich.table import Table

from ..datamodel.schemas import ClassSplit, Dataset
from ..detector.checkpoint import Checkpoint, load_model
from ..detector.model import FasterRCNN
from ..telemetry.trainlog import fingerprint
from .metrics import ScoredBox, voc_ap

logger = logging.getLogger("mpsr.eval")
tracer = trace.get_tracer("mpsr.eval")


def _mean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class EvalReport:
    per_class_ap: dict[int, Optional[float]]      # None: class has no GT
    class_names: tuple[str, ...]
    novel_classes: tuple[int, ...]
    base_classes: tuple[int, ...]
    num_detections: dict[int, int]
    num_gt: dict[int, int]
    config_hash: str = ""
    iou_thr: float = 0.5
    images: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def novel_map(self) -> Optional[float]:
        return _mean(self.per_class_ap.get(c) for c in self.novel_classes)

    @property
    def base_map(self) -> Optional[float]:
        return _mean(self.per_class_ap.get(c) for c in self.base_classes)

    @property
    def map(self) -> Optional[float]:
        return _mean(self.per_class_ap.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        d["num_detections"] = {str(k): v for k, v in self.num_detections.items()}
        d["num_gt"] = {str(k): v for k, v in self.num_gt.items()}
        d.update(novel_map=self.novel_map, base_map=self.base_map, map=self.map)
        return d

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    def to_csv(self, path: str | Path) -> None:
        """Rows `class_id,class,group,ap,gt,detections`; empty ap for classes without GT."""
        with Path(path).open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["class_id", "class", "group", "ap", "gt", "detections"])
            for c in sorted(self.per_class_ap):
                ap = self.per_class_ap[c]
                group = "novel" if c in self.novel_classes else "base"
                w.writerow([c, self.class_names[c], group, "" if ap is None else f"{ap:.6f}",
                            self.num_gt.get(c, 0), self.num_detections.get(c, 0)])


def _fmt(x: Optional[float]) -> str:
    return "-" if x is None else f"{100 * x:.1f}"


def print_report(rep: EvalReport) -> None:
    console = Console()

    console.rule(f"[bold]AP@{rep.iou_thr:g}: novel {_fmt(rep.novel_map)} / base {_fmt(rep.base_map)}[/bold]")

    t = Table(title=f"Per-class AP ({rep.images} images, config {rep.config_hash or '-'})")
    t.add_column("Class"); t.add_column("Group"); t.add_column("AP (%)"); t.add_column("GT"); t.add_column("Dets")
    for c in sorted(rep.per_class_ap):
        group = "novel" if c in rep.novel_classes else "base"
        t.add_row(rep.class_names[c], group, _fmt(rep.per_class_ap[c]),
                  str(rep.num_gt.get(c, 0)), str(rep.num_detections.get(c, 0)))
    console.print(t)


def evaluate(
    checkpoint: FasterRCNN | Checkpoint | str | Path,
    dataset: Dataset,
    split: ClassSplit,
    *,
    iou_thr: float = 0.5,
    device: str = "cpu",
) -> EvalReport:
    """
    Run the detector over every image and report per-class AP, with means
    over the novel and base groups of `split`.
    """
    split.validate_for(dataset.num_classes)
    t0 = time.perf_counter()
    with tracer.start_as_current_span("eval.evaluate", attributes={"eval.images": len(dataset.images)}) as span:
        try:
            if isinstance(checkpoint, FasterRCNN):
                model = checkpoint
            elif isinstance(checkpoint, Checkpoint):
                model = FasterRCNN(checkpoint.detector)
                model.load_state_dict(checkpoint.weights, strict=True)
                model = model.to(device)
            else:
                model = load_model(checkpoint, device)
            model.eval()
            config_hash = fingerprint(model.cfg.to_dict())

            dets: dict[int, list[ScoredBox]] = defaultdict(list)
            gts: dict[int, dict[str, list]] = defaultdict(lambda: defaultdict(list))
            for im in dataset.images:
                for a in im.annotations:
                    gts[a.class_id][im.image_id].append(a.box.as_array())
                for d in model.predict(im):
                    dets[d.class_id].append(ScoredBox(im.image_id, d.box.as_array(), d.score))

            per_class: dict[int, Optional[float]] = {}
            for c in range(dataset.num_classes):
                ap = voc_ap(dets.get(c, []), {k: np.array(v) for k, v in gts[c].items()}, iou_thr)
                if ap is None:
                    logger.warning("eval.class_without_gt", extra={"class_id": c, "class": dataset.class_names[c]})
                per_class[c] = ap

            rep = EvalReport(
                per_class_ap=per_class,
                class_names=tuple(dataset.class_names),
                novel_classes=tuple(sorted(split.novel_classes)),
                base_classes=tuple(sorted(split.base_classes)),
                num_detections={c: len(dets.get(c, [])) for c in range(dataset.num_classes)},
                num_gt={c: sum(len(v) for v in gts[c].values()) for c in range(dataset.num_classes)},
                config_hash=config_hash,
                iou_thr=iou_thr,
                images=len(dataset.images),
            )
            if rep.novel_map is not None:
                span.set_attribute("eval.novel_map", rep.novel_map)
            if rep.base_map is not None:
                span.set_attribute("eval.base_map", rep.base_map)
            logger.info("eval.done", extra={
                "novel_map": rep.novel_map, "base_map": rep.base_map, "images": rep.images,
                "elapsed_ms": int((time.perf_counter() - t0) * 1000),
            })
            return rep
        except Exception as e:
            logger.exception("eval.error")
            span.record_exception(e)
            span.set_status(Status(StatusCode.ERROR, str(e)))
            raise
