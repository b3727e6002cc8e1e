"""RPN and RoI losses, with and without refinement samples.

RPN:    (1/(N+M)) * sum BCE over main samples and M refinement positives
        + (1/N) * sum smooth-L1 over main positives
RoI:    (1/N) * sum CE + (lambda/M) * sum CE over refinement RoIs
        + (1/N) * sum smooth-L1 over foreground RoIs (class-agnostic)

With M = 0 (RPN) or lambda = 0 (RoI) these reduce to the plain Faster R-CNN
losses. Refinement samples never enter a regression term.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import LossError
from .geometry import POSITIVE, MatchResult

DEFAULT_LAMBDA = 0.1
SMOOTH_L1_BETA = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    rpn_bcls: float
    rpn_reg: float
    roi_kcls: float
    roi_reg: float
    refine_rpn_bcls: float
    refine_roi_kcls: float
    n_obj: int
    m_obj: int
    n_roi: int
    m_roi: int
    lam: float = DEFAULT_LAMBDA

    @property
    def total(self) -> float:
        return self.rpn_bcls + self.rpn_reg + self.roi_kcls + self.roi_reg + self.refine_rpn_bcls + self.refine_roi_kcls

    def losses(self) -> dict[str, float]:
        d = asdict(self)
        return {k: d[k] for k in ("rpn_bcls", "rpn_reg", "roi_kcls", "roi_reg", "refine_rpn_bcls", "refine_roi_kcls")}

    def counts(self) -> dict[str, int]:
        return {"n_obj": self.n_obj, "m_obj": self.m_obj, "n_roi": self.n_roi, "m_roi": self.m_roi}


@dataclass(frozen=True)
class RPNSamples:
    """Sampled anchors with their objectness labels (0/1) and regression targets."""
    indices: torch.Tensor    # (N,) long
    labels: torch.Tensor     # (N,) float
    targets: torch.Tensor    # (N, 4)

    @classmethod
    def from_match(cls, match: MatchResult, sampled, *, dtype=torch.float32, device=None) -> "RPNSamples":
        idx = np.asarray(sampled, dtype=np.int64).reshape(-1)
        return cls(
            indices=torch.as_tensor(idx, device=device),
            labels=torch.as_tensor((match.labels[idx] == POSITIVE).astype(np.float64), dtype=dtype, device=device),
            targets=torch.as_tensor(match.targets[idx], dtype=dtype, device=device),
        )

    def __len__(self) -> int:
        return int(self.indices.numel())


@dataclass(frozen=True)
class RPNTerms:
    bcls: torch.Tensor          # main-sample part of the classification term
    refine_bcls: torch.Tensor   # refinement part of the classification term
    reg: torch.Tensor
    n_obj: int
    m_obj: int

    @property
    def total(self) -> torch.Tensor:
        return self.bcls + self.refine_bcls + self.reg


@dataclass(frozen=True)
class RoITerms:
    kcls: torch.Tensor
    refine_kcls: torch.Tensor
    reg: torch.Tensor
    n_roi: int
    m_roi: int
    lam: float

    @property
    def total(self) -> torch.Tensor:
        return self.kcls + self.refine_kcls + self.reg


def rpn_terms(
    logits: torch.Tensor,
    deltas: torch.Tensor,
    samples: RPNSamples,
    refine_logits: Optional[torch.Tensor] = None,
    refine_labels: Optional[torch.Tensor] = None,
) -> RPNTerms:
    """refine_labels defaults to all-foreground (manual selection yields positives only)."""
    n = len(samples)
    if n == 0:
        raise LossError("RPN loss needs at least one sampled anchor (N_obj = 0)")
    lg = logits[samples.indices]
    main = F.binary_cross_entropy_with_logits(lg, samples.labels, reduction="sum")
    m = 0 if refine_logits is None else int(refine_logits.numel())
    if m:
        flat = refine_logits.reshape(-1)
        target = torch.ones_like(flat) if refine_labels is None else refine_labels.reshape(-1).to(flat.dtype)
        ref = F.binary_cross_entropy_with_logits(flat, target, reduction="sum")
    else:
        ref = lg.new_zeros(())
    pos = samples.labels > 0.5
    reg = F.smooth_l1_loss(
        deltas[samples.indices][pos], samples.targets[pos], reduction="sum", beta=SMOOTH_L1_BETA
    )
    return RPNTerms(main / (n + m), ref / (n + m), reg / n, n, m)


def roi_terms(
    cls_logits: torch.Tensor,
    deltas: torch.Tensor,
    labels: torch.Tensor,
    targets: torch.Tensor,
    refine_logits: Optional[torch.Tensor] = None,
    refine_labels: Optional[torch.Tensor] = None,
    lam: float = DEFAULT_LAMBDA,
) -> RoITerms:
    n = int(labels.numel())
    if n == 0:
        raise LossError("RoI loss needs at least one sampled RoI (N_RoI = 0)")
    kcls = F.cross_entropy(cls_logits, labels, reduction="sum") / n
    fg = labels > 0
    reg = F.smooth_l1_loss(deltas[fg], targets[fg], reduction="sum", beta=SMOOTH_L1_BETA) / n
    m = 0
    refine = kcls.new_zeros(())
    if refine_logits is not None:
        m = int(refine_logits.shape[0])
        if m == 0:
            raise LossError("RoI refinement is enabled but no refinement sample was given (M_RoI = 0)")
        refine = lam * F.cross_entropy(refine_logits, refine_labels, reduction="sum") / m
    return RoITerms(kcls, refine, reg, n, m, lam)


def rpn_loss_baseline(logits: torch.Tensor, deltas: torch.Tensor, match: MatchResult, sampled) -> torch.Tensor:
    samples = RPNSamples.from_match(match, sampled, dtype=logits.dtype, device=logits.device)
    return rpn_terms(logits, deltas, samples).total


def rpn_loss_mpsr(
    logits: torch.Tensor, deltas: torch.Tensor, match: MatchResult, sampled, refine_logits: torch.Tensor
) -> torch.Tensor:
    samples = RPNSamples.from_match(match, sampled, dtype=logits.dtype, device=logits.device)
    return rpn_terms(logits, deltas, samples, refine_logits).total


def roi_loss_baseline(
    cls_logits: torch.Tensor, deltas: torch.Tensor, labels: torch.Tensor, targets: torch.Tensor
) -> torch.Tensor:
    return roi_terms(cls_logits, deltas, labels, targets).total


def roi_loss_mpsr(
    cls_logits: torch.Tensor,
    deltas: torch.Tensor,
    labels: torch.Tensor,
    targets: torch.Tensor,
    refine_logits: torch.Tensor,
    refine_labels: torch.Tensor,
    lam: float = DEFAULT_LAMBDA,
) -> torch.Tensor:
    return roi_terms(cls_logits, deltas, labels, targets, refine_logits, refine_labels, lam).total


def breakdown(rpn: RPNTerms, roi: RoITerms) -> LossBreakdown:
    return LossBreakdown(
        rpn_bcls=float(rpn.bcls.detach()),
        rpn_reg=float(rpn.reg.detach()),
        roi_kcls=float(roi.kcls.detach()),
        roi_reg=float(roi.reg.detach()),
        refine_rpn_bcls=float(rpn.refine_bcls.detach()),
        refine_roi_kcls=float(roi.refine_kcls.detach()),
        n_obj=rpn.n_obj, m_obj=rpn.m_obj, n_roi=roi.n_roi, m_roi=roi.m_roi, lam=roi.lam,
    )


@dataclass
class RefinementOutputs:
    """Head outputs on object-pyramid crops; classification only."""
    rpn_logits: Optional[torch.Tensor] = None     # (M_obj,)
    rpn_labels: Optional[torch.Tensor] = None     # (M_obj,) 0/1; None = all foreground
    roi_logits: Optional[torch.Tensor] = None     # (M_RoI, K+1)
    roi_labels: Optional[torch.Tensor] = None     # (M_RoI,)


def compute_step_losses(
    rpn_logits: torch.Tensor,
    rpn_deltas: torch.Tensor,
    rpn_samples: RPNSamples,
    roi_logits: torch.Tensor,
    roi_deltas: torch.Tensor,
    roi_labels: torch.Tensor,
    roi_targets: torch.Tensor,
    refinement: Optional[RefinementOutputs] = None,
    lam: float = DEFAULT_LAMBDA,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Total differentiable loss of one image pass and its detached breakdown."""
    ref = refinement or RefinementOutputs()
    rpn = rpn_terms(rpn_logits, rpn_deltas, rpn_samples, ref.rpn_logits, ref.rpn_labels)
    roi = roi_terms(roi_logits, roi_deltas, roi_labels, roi_targets, ref.roi_logits, ref.roi_labels, lam)
    return rpn.total + roi.total, breakdown(rpn, roi)


def mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    """Average of loss terms over image passes; counts are summed."""
    if not parts:
        raise LossError("no loss breakdowns to aggregate")
    n = len(parts)
    losses = {k: sum(p.losses()[k] for p in parts) / n for k in parts[0].losses()}
    counts = {k: sum(p.counts()[k] for p in parts) for k in parts[0].counts()}
    return LossBreakdown(**losses, **counts, lam=parts[0].lam)
