"""Training objectives.

Iterative flow models emit one prediction per refinement iteration; every
loss here supervises the whole sequence with exponentially decayed weights
(weight 1 on the final iteration, decay^k on the k-th-from-last). Masked
losses average over the selected pixels only, so the gradient magnitude
does not shrink as coverage drops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import torch

from .augment import MixingRatio
from .errors import ContractError, DivergenceError
from .flowcore import FlowField, ValidMask


@dataclass(frozen=True)
class LossConfig:
    w_dist_mode: str = "lambda"  # "lambda": weight distraction loss by the mixing ratio
    w_dist_const: float = 1.0  # used only when w_dist_mode == "constant"
    w_self: float = 1.0
    tau: float = 0.95
    gamma1: float = 0.01
    gamma2: float = 0.5
    seq_decay: float = 0.8

    def __post_init__(self):
        if self.w_dist_mode not in ("lambda", "constant"):
            raise ContractError(f"w_dist_mode must be 'lambda' or 'constant', got {self.w_dist_mode!r}")
        if self.w_self < 0:
            raise ContractError("w_self must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ContractError("tau must lie in [0, 1]")
        if self.gamma1 < 0 or self.gamma2 <= 0:
            raise ContractError("gamma1 must be >= 0 and gamma2 > 0")
        if not 0.0 < self.seq_decay <= 1.0:
            raise ContractError("seq_decay must lie in (0, 1]")


class PredictionSequence:
    """Ordered per-iteration flow predictions; the last entry is the final estimate."""

    def __init__(self, fields: Sequence[FlowField]):
        fields = tuple(fields)
        if not fields:
            raise ContractError("prediction sequence must be nonempty")
        first = fields[0]
        for f in fields[1:]:
            if f.shape_hw != first.shape_hw or f.direction != first.direction:
                raise ContractError("all predictions in a sequence must share shape and direction")
        self._fields = fields

    def __len__(self) -> int:
        return len(self._fields)

    def __getitem__(self, i) -> FlowField:
        return self._fields[i]

    def __iter__(self) -> Iterator[FlowField]:
        return iter(self._fields)

    @property
    def final(self) -> FlowField:
        return self._fields[-1]

    @property
    def direction(self) -> str:
        return self._fields[0].direction

    @property
    def shape_hw(self) -> tuple[int, int]:
        return self._fields[0].shape_hw


def _masked_sequence_l1(
    preds: PredictionSequence,
    target: torch.Tensor,
    mask: torch.Tensor,
    seq_decay: float,
) -> torch.Tensor:
    n = len(preds)
    total = None
    for i, pred in enumerate(preds):
        weight = seq_decay ** (n - 1 - i)
        per_pixel = (pred.data - target).abs().sum(dim=-1)
        term = weight * per_pixel[mask].mean()
        total = term if total is None else total + term
    return total


def _check_seq_inputs(preds: PredictionSequence, target: FlowField, valid: ValidMask, seq_decay: float):
    if not 0.0 < seq_decay <= 1.0:
        raise ContractError(f"seq_decay must lie in (0, 1], got {seq_decay}")
    if preds.shape_hw != target.shape_hw or preds.shape_hw != valid.shape_hw:
        raise ContractError(
            f"shape mismatch: preds {preds.shape_hw}, target {target.shape_hw}, valid {valid.shape_hw}"
        )
    if preds.direction != target.direction:
        raise ContractError(
            f"direction mismatch: preds are {preds.direction}, target is {target.direction}"
        )


def sequence_l1(
    preds: PredictionSequence,
    target: FlowField,
    valid: ValidMask,
    seq_decay: float,
) -> torch.Tensor:
    """Decayed sum over iterations of the mean L1 error on valid pixels.

    The returned scalar participates in gradient computation with respect
    to the predictions.
    """
    _check_seq_inputs(preds, target, valid, seq_decay)
    if valid.count() == 0:
        raise ContractError("no valid pixels")
    return _masked_sequence_l1(preds, target.data, valid.data, seq_decay)


def loss_dist(
    preds_on_distracted: PredictionSequence,
    gt: FlowField,
    valid: ValidMask,
    seq_decay: float,
) -> torch.Tensor:
    """Supervision of the distracted pair's predictions by the ORIGINAL
    pair's ground truth. Structurally identical to sequence_l1 with that
    target binding."""
    return sequence_l1(preds_on_distracted, gt, valid, seq_decay)


def distraction_weight(lam: MixingRatio | None, cfg: LossConfig) -> float:
    """Weight applied to the distraction loss: the sample's mixing ratio in
    "lambda" mode (a heavily distracted pair, small lambda, contributes
    little), or a fixed constant."""
    if cfg.w_dist_mode == "constant":
        return cfg.w_dist_const
    if lam is None:
        raise ContractError("w_dist_mode 'lambda' requires the pair's mixing ratio")
    return lam.value


def loss_sup(
    base_preds: PredictionSequence,
    dist_preds: PredictionSequence,
    gt: FlowField,
    valid: ValidMask,
    lam: MixingRatio | None,
    cfg: LossConfig,
) -> torch.Tensor:
    """Supervised total: base sequence loss plus the weighted distraction loss."""
    w = distraction_weight(lam, cfg)
    base = sequence_l1(base_preds, gt, valid, cfg.seq_decay)
    dist = loss_dist(dist_preds, gt, valid, cfg.seq_decay)
    return base + w * dist


def loss_self(
    preds_on_distracted: PredictionSequence,
    pseudo: FlowField,
    conf_mask: ValidMask,
    seq_decay: float,
) -> torch.Tensor:
    """Confidence-gated consistency loss against a pseudo label.

    The pseudo label is always detached: it is a training target, never a
    gradient path. An all-false mask is a silent no-op returning exact zero
    with no gradient contribution.
    """
    _check_seq_inputs(preds_on_distracted, pseudo, conf_mask, seq_decay)
    if conf_mask.count() == 0:
        return torch.zeros((), dtype=preds_on_distracted.final.data.dtype)
    return _masked_sequence_l1(preds_on_distracted, pseudo.data.detach(), conf_mask.data, seq_decay)


def loss_total(sup: torch.Tensor, self_loss: torch.Tensor, w_self: float) -> torch.Tensor:
    """Combined objective: supervised loss plus weighted self-supervised loss."""
    if w_self < 0:
        raise ContractError("w_self must be >= 0")
    sup_t = sup if isinstance(sup, torch.Tensor) else torch.tensor(float(sup))
    self_t = self_loss if isinstance(self_loss, torch.Tensor) else torch.tensor(float(self_loss))
    if not (torch.isfinite(sup_t).all() and torch.isfinite(self_t).all()):
        raise DivergenceError(
            f"non-finite loss component: sup={float(sup_t)}, self={float(self_t)}"
        )
    return sup_t + w_self * self_t
