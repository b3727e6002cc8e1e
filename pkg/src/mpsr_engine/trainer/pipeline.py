# mpsr_engine/trainer/pipeline.py
from __future__ import annotations
import logging, time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from opentelemetry import trace
from opentelemetry.trace import Status, StatusCode

from mpsr_engine import config
from mpsr_engine.datamodel.schemas import Dataset, ImageRecord
from mpsr_engine.detector.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mpsr_engine.detector.model import FasterRCNN
from mpsr_engine.errors import CheckpointError, ValidationError
from mpsr_engine.eval.metrics import improper_negative_count
from mpsr_engine.geometry import match_anchors
from mpsr_engine.losses import LossBreakdown, RefinementOutputs, RPNSamples, compute_step_losses, mean_breakdown
from mpsr_engine.mpsr.pyramid import ObjectPyramid
from mpsr_engine.mpsr.selection import anchor_match_on_pyramids, refinement_targets, select_roi_refinement
from mpsr_engine.telemetry.trainlog import TrainLog, fingerprint
from mpsr_engine.trainer.sampling import (
    max_size_for,
    sample_anchors,
    sample_pyramid_for_image,
    sample_rois,
    shorter_sides_for_image,
)
from mpsr_engine.trainer.schemas import Stage, TrainConfig

logger = logging.getLogger("mpsr.trainer")
tracer = trace.get_tracer("mpsr.trainer")

CLASSIFIER_PREFIX = "roi_head.cls_score."

# seed offsets of the per-role numpy streams
_STREAMS = {"sampler": 0, "shift": 1}


def build_model(cfg: TrainConfig, class_ids, device: str | torch.device = "cpu") -> FasterRCNN:
    """Fresh detector; weight init draws from the torch stream seeded with cfg.seed."""
    torch.manual_seed(cfg.seed)
    return FasterRCNN(cfg.detector_for(class_ids)).to(device)


def _check_trainable(dataset: Dataset) -> None:
    if not dataset.images or not any(im.annotations for im in dataset.images):
        raise ValidationError("training dataset has no annotated images")


class Trainer:
    """
    SGD over one stage's schedule. Every step draws `batch_size` images from a
    shuffled epoch order, trains each at the sides its multi-scale mode asks
    for and, when refinement is active in this stage, adds one object pyramid
    per image through the shared heads.
    """

    def __init__(
        self,
        model: FasterRCNN,
        dataset: Dataset,
        cfg: TrainConfig,
        stage: Stage,
        *,
        log_path: Optional[str | Path] = None,
    ):
        _check_trainable(dataset)
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        self.stage = stage
        self.refine = cfg.refines_in(stage)
        if self.refine and not model.cfg.use_fpn:
            raise ValidationError("the refinement branch needs the FPN detector (mode=mpsr)")
        self.schedule = cfg.schedule_for(stage)
        self.total_iterations = sum(n for n, _ in self.schedule)
        self.iteration = 0
        self.label_of = {c: j + 1 for j, c in enumerate(model.cfg.class_ids)}
        missing = sorted(set(dataset.class_ids()) - set(self.label_of))
        if missing:
            raise ValidationError(f"dataset classes {missing} are not served by the detector {model.cfg.class_ids}")
        self.rng = {name: np.random.default_rng([cfg.seed, off]) for name, off in _STREAMS.items()}
        self._order: list[int] = []
        self._cursor = 0
        self._pixels: dict[str, np.ndarray] = {}
        self.optimizer = torch.optim.SGD(
            model.parameters(),
            lr=self.lr_at(0),
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
        )
        self.log = TrainLog(log_path, stage=stage, log_every=cfg.log_every)
        self.history: list[LossBreakdown] = []

    # ---- schedule / data -------------------------------------------------------
    def lr_at(self, iteration: int) -> float:
        end = 0
        for n, lr in self.schedule:
            end += n
            if iteration < end:
                return lr
        return self.schedule[-1][1] if self.schedule else 0.0

    def _next_images(self) -> list[ImageRecord]:
        out = []
        while len(out) < self.cfg.batch_size:
            if self._cursor >= len(self._order):
                self._order = [int(i) for i in self.rng["sampler"].permutation(len(self.dataset.images))]
                self._cursor = 0
            im = self.dataset.images[self._order[self._cursor]]
            self._cursor += 1
            if im.annotations:
                out.append(im)
        return out

    def pixels(self, image: ImageRecord) -> np.ndarray:
        if image.image_id not in self._pixels:
            self._pixels[image.image_id] = image.load_pixels()
        return self._pixels[image.image_id]

    # ---- refinement branch -----------------------------------------------------
    def refinement_outputs(self, pyramid: ObjectPyramid) -> RefinementOutputs:
        """Head outputs on every crop of `pyramid`, batch norm frozen to running statistics."""
        model, cfg = self.model, self.cfg
        label = self.label_of[pyramid.class_id]
        rpn_logits, rpn_labels, roi_logits = [], [], []
        with model.bn_frozen():
            matches = None
            if cfg.pyramid_selection == "anchor_match":
                grids = [model.anchor_grid((c, c)) for c in pyramid.canvas_sides]
                matches = anchor_match_on_pyramids(
                    pyramid, grids, cfg.detector.rpn_pos_iou, cfg.detector.rpn_neg_iou
                )
            for i, crop in enumerate(pyramid.crops):
                feats = model.forward_backbone(model.prepare_canvas(crop))
                if matches is None:
                    tgt = refinement_targets(pyramid, i)
                    if cfg.refine_rpn:
                        lg, _ = model.rpn_head.forward_level(feats[tgt.rpn_level])
                        idx = torch.as_tensor(tgt.anchor_indices, device=lg.device)
                        rpn_logits.append(lg[0, idx])
                    if cfg.refine_roi:
                        pooled = select_roi_refinement(feats, tgt.roi_level, cfg.detector.roi_output_size, tgt.roi_region)
                        roi_logits.append(model.roi_head(pooled)[0])
                else:
                    if cfg.refine_rpn:
                        match = matches[i]
                        sampled = sample_anchors(match, self.rng["sampler"], cfg.rpn_batch, cfg.rpn_pos_fraction)
                        lg, _ = model.rpn_forward(feats)
                        samples = RPNSamples.from_match(match, sampled, dtype=lg.dtype, device=lg.device)
                        rpn_logits.append(lg[samples.indices])
                        rpn_labels.append(samples.labels)
                    if cfg.refine_roi:
                        box = torch.as_tensor(pyramid.object_boxes[i].as_array()[None], dtype=model.dtype, device=model.device)
                        roi_logits.append(model.roi_forward(feats, box)[0])
        out = RefinementOutputs()
        if rpn_logits:
            out.rpn_logits = torch.cat(rpn_logits)
            out.rpn_labels = torch.cat(rpn_labels) if rpn_labels else None
        if roi_logits:
            out.roi_logits = torch.cat(roi_logits)
            out.roi_labels = torch.full((out.roi_logits.shape[0],), label, dtype=torch.long, device=out.roi_logits.device)
        return out

    # ---- main branch -----------------------------------------------------------
    def image_pass(
        self,
        image: ImageRecord,
        shorter_side: Optional[int],
        refinement: Optional[RefinementOutputs],
    ) -> tuple[torch.Tensor, LossBreakdown, int]:
        """Loss of one image at one input side, plus its improper-negative count."""
        model, cfg = self.model, self.cfg
        x, f = model.resize_image(self.pixels(image), shorter_side, max_size_for(cfg, shorter_side))
        image_hw = (int(x.shape[-2]), int(x.shape[-1]))
        canvas = model.prepare_canvas(x)
        feats = model.forward_backbone(canvas)
        grid = model.anchor_grid(tuple(canvas.shape[-2:]))
        logits, deltas = model.rpn_forward(feats)

        gt = np.stack([a.box.as_array() for a in image.annotations]) * f
        gt[:, 0::2] = np.clip(gt[:, 0::2], 0, image_hw[1])
        gt[:, 1::2] = np.clip(gt[:, 1::2], 0, image_hw[0])
        gt_labels = np.array([self.label_of[a.class_id] for a in image.annotations], dtype=np.int64)

        match = match_anchors(grid, gt, cfg.detector.rpn_pos_iou, cfg.detector.rpn_neg_iou, model.coder)
        sampled = sample_anchors(match, self.rng["sampler"], cfg.rpn_batch, cfg.rpn_pos_fraction)
        rpn_samples = RPNSamples.from_match(match, sampled, dtype=logits.dtype, device=logits.device)

        proposals = model.propose(logits, deltas, grid, image_hw).cpu().double().numpy()
        rois = sample_rois(
            proposals, gt, gt_labels, self.rng["sampler"],
            batch=cfg.roi_batch, fg_fraction=cfg.roi_fg_fraction, fg_iou=cfg.roi_fg_iou, coder=model.coder,
        )
        as_t = lambda a, dt=model.dtype: torch.as_tensor(a, dtype=dt, device=model.device)
        cls_logits, roi_deltas = model.roi_forward(feats, as_t(rois.boxes))
        loss, bd = compute_step_losses(
            logits, deltas, rpn_samples,
            cls_logits, roi_deltas, as_t(rois.labels, torch.long), as_t(rois.targets),
            refinement=refinement, lam=cfg.lam,
        )
        return loss, bd, improper_negative_count(grid, match, gt)

    def step(self) -> LossBreakdown:
        cfg = self.cfg
        lr = self.lr_at(self.iteration)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)

        images = self._next_images()
        parts: list[LossBreakdown] = []
        improper = 0
        for image in images:
            refinement = None
            if self.refine:
                pyramid = sample_pyramid_for_image(
                    image, self.rng["shift"], shift_frac=cfg.shift_frac, pixels=self.pixels(image)
                )
                if pyramid is not None:
                    refinement = self.refinement_outputs(pyramid)
            sides = shorter_sides_for_image(cfg, self.rng["sampler"])
            image_loss = 0.0
            for side in sides:
                loss, bd, n_improper = self.image_pass(image, side, refinement)
                image_loss = image_loss + loss / len(sides)
                parts.append(bd)
                improper += n_improper
            (image_loss / len(images)).backward()
        self.optimizer.step()

        bd = mean_breakdown(parts)
        self.history.append(bd)
        self.log.write(self.iteration, lr, bd, extra_counts={"improper_negatives": improper},
                       span=trace.get_current_span())
        self.iteration += 1
        return bd

    def run(self, iterations: Optional[int] = None) -> list[LossBreakdown]:
        """Train until the schedule ends, or for `iterations` more steps."""
        stop = self.total_iterations if iterations is None else min(self.total_iterations, self.iteration + iterations)
        out = []
        while self.iteration < stop:
            out.append(self.step())
        return out

    # ---- checkpointing ---------------------------------------------------------
    def rng_state(self) -> dict:
        return {
            **{name: g.bit_generator.state for name, g in self.rng.items()},
            "order": list(self._order),
            "cursor": self._cursor,
        }

    def checkpoint(self) -> Checkpoint:
        optim: dict[str, torch.Tensor] = {}
        for name, p in self.model.named_parameters():
            buf = self.optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                optim[name] = buf.detach().clone()
        weights = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        return Checkpoint(
            detector=self.model.cfg,
            weights=weights,
            stage=self.stage,
            iteration=self.iteration,
            train=self.cfg.to_dict(),
            rng=self.rng_state(),
            optimizer=optim,
            torch_rng=torch.get_rng_state(),
        )

    @classmethod
    def resume(
        cls,
        ckpt: Checkpoint,
        dataset: Dataset,
        *,
        device: str | torch.device = "cpu",
        log_path: Optional[str | Path] = None,
    ) -> "Trainer":
        """Continue a stage from a checkpoint written by `checkpoint()`."""
        try:
            cfg = TrainConfig.from_dict(ckpt.train)
        except (TypeError, ValueError) as e:
            raise CheckpointError(f"checkpoint has no usable training config: {e}") from e
        model = FasterRCNN(ckpt.detector).to(device)
        try:
            model.load_state_dict(ckpt.weights, strict=True)
        except RuntimeError as e:
            raise CheckpointError(f"weights do not fit the detector config: {e}") from e
        trainer = cls(model, dataset, cfg, ckpt.stage, log_path=log_path)  # type: ignore[arg-type]
        trainer.iteration = ckpt.iteration
        params = dict(model.named_parameters())
        for name, buf in ckpt.optimizer.items():
            if name not in params:
                raise CheckpointError(f"optimizer state for unknown parameter {name}")
            trainer.optimizer.state[params[name]]["momentum_buffer"] = buf.to(device).clone()
        for name, g in trainer.rng.items():
            if name in ckpt.rng:
                g.bit_generator.state = ckpt.rng[name]
        trainer._order = [int(i) for i in ckpt.rng.get("order", [])]
        trainer._cursor = int(ckpt.rng.get("cursor", 0))
        if ckpt.torch_rng is not None:
            torch.set_rng_state(ckpt.torch_rng)
        return trainer


def _run_stage(trainer: Trainer, span_name: str, out_dir: Optional[Path]) -> Checkpoint:
    cfg = trainer.cfg
    t0 = time.perf_counter()
    with tracer.start_as_current_span(
        span_name,
        attributes={"train.mode": cfg.mode, "train.seed": cfg.seed, "train.iterations": trainer.total_iterations,
                    "train.refine": trainer.refine},
    ) as span:
        span.set_attribute("train.config_hash", fingerprint(cfg.to_dict()))
        logger.info(f"{span_name}.start", extra={
            "mode": cfg.mode, "refine": trainer.refine, "images": len(trainer.dataset.images),
            "iterations": trainer.total_iterations, "classes": len(trainer.model.cfg.class_ids),
        })
        try:
            trainer.run()
            ckpt = trainer.checkpoint()
            if out_dir is not None:
                ckpt.path = save_checkpoint(ckpt, out_dir)
            last = trainer.history[-1].total if trainer.history else float("nan")
            span.set_attribute("train.final_loss", last)
            logger.info(f"{span_name}.done", extra={
                "iteration": trainer.iteration, "loss": last,
                "elapsed_ms": int((time.perf_counter() - t0) * 1000),
            })
            return ckpt
        except Exception as e:
            logger.exception(f"{span_name}.error")
            span.record_exception(e)
            span.set_status(Status(StatusCode.ERROR, str(e)))
            raise


def train_base(
    dataset: Dataset,
    cfg: TrainConfig,
    *,
    out_dir: Optional[str | Path] = None,
    device: Optional[str] = None,
    log_path: Optional[str | Path] = None,
) -> Checkpoint:
    """Base training on a dataset holding only base-class annotations."""
    _check_trainable(dataset)
    model = build_model(cfg, sorted(dataset.class_ids()), device or config.DEVICE)
    trainer = Trainer(model, dataset, cfg, "base", log_path=log_path)
    return _run_stage(trainer, "train.base", Path(out_dir) if out_dir else None)


def finetune_model(
    ckpt: Checkpoint,
    class_ids,
    cfg: TrainConfig,
    device: str | torch.device = "cpu",
) -> FasterRCNN:
    """
    Detector for `class_ids` carrying every checkpoint weight except the
    classifier, which is replaced by a fresh N(0, 0.01) layer. Nothing is frozen.
    """
    det = replace(ckpt.detector, class_ids=tuple(int(c) for c in class_ids))
    torch.manual_seed(cfg.seed)
    model = FasterRCNN(det)
    state = {k: v for k, v in ckpt.weights.items() if not k.startswith(CLASSIFIER_PREFIX)}
    result = model.load_state_dict(state, strict=False)
    missing = [k for k in result.missing_keys if not k.startswith(CLASSIFIER_PREFIX)]
    if missing or result.unexpected_keys:
        raise CheckpointError(
            f"checkpoint does not fit the detector (missing {missing[:3]}, unexpected {result.unexpected_keys[:3]})"
        )
    gen = torch.Generator().manual_seed(cfg.seed)
    model.roi_head.replace_classifier(len(det.class_ids), generator=gen)
    for p in model.parameters():
        p.requires_grad_(True)
    return model.to(device)


def finetune(
    checkpoint: Checkpoint | str | Path,
    dataset: Dataset,
    cfg: TrainConfig,
    *,
    out_dir: Optional[str | Path] = None,
    device: Optional[str] = None,
    log_path: Optional[str | Path] = None,
) -> Checkpoint:
    """Few-shot fine-tuning of a base checkpoint on a k-shot set covering base and novel classes."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    _check_trainable(dataset)
    class_ids = tuple(range(dataset.num_classes))
    model = finetune_model(ckpt, class_ids, cfg, device or config.DEVICE)
    trainer = Trainer(model, dataset, cfg, "finetune", log_path=log_path)
    return _run_stage(trainer, "train.finetune", Path(out_dir) if out_dir else None)
