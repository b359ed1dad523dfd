"""Dense flow-field numerics: sampling, forward-backward consistency,
confidence maps, and evaluation metrics.

Conventions used throughout the package:
  * images are (H, W, 3) float grids with values in [0, 1]
  * flow fields are (H, W, 2) displacement grids in pixels, channel 0 = u
    (horizontal, +x is rightward column shift), channel 1 = v (vertical,
    +y is downward row shift)
  * absolute pixel coordinates are (x, y) pairs, so the identity position
    of grid cell (row, col) is (col, row)

All operations are pure functions on immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .errors import ContractError

FORWARD = "forward"
BACKWARD = "backward"

MIN_IMAGE_SIZE = 8

# Default consistency-denominator constants: relative slack on the squared
# flow magnitudes and an absolute floor that keeps the ratio bounded.
DEFAULT_GAMMA1 = 0.01
DEFAULT_GAMMA2 = 0.5


def as_tensor(data, dtype=None) -> torch.Tensor:
    """Coerce numpy arrays / nested lists to a torch tensor, pass tensors through."""
    if isinstance(data, torch.Tensor):
        t = data
    elif isinstance(data, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(data))
    else:
        t = torch.tensor(data)
    if dtype is not None:
        t = t.to(dtype)
    return t


@dataclass(frozen=True)
class Image:
    """An (H, W, 3) intensity grid with values in [0, 1]."""

    data: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "data", as_tensor(self.data))
        d = self.data
        if d.ndim != 3 or d.shape[2] != 3:
            raise ContractError(f"image data must be (H, W, 3), got {tuple(d.shape)}")
        if d.shape[0] < MIN_IMAGE_SIZE or d.shape[1] < MIN_IMAGE_SIZE:
            raise ContractError(
                f"image must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {tuple(d.shape[:2])}"
            )
        if not torch.isfinite(d).all():
            raise ContractError("image contains non-finite values")
        if d.min() < 0 or d.max() > 1:
            raise ContractError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape_hw(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class FlowField:
    """An (H, W, 2) pixel-displacement grid tagged with its direction."""

    data: torch.Tensor
    direction: str = FORWARD

    def __post_init__(self):
        object.__setattr__(self, "data", as_tensor(self.data))
        d = self.data
        if d.ndim != 3 or d.shape[2] != 2:
            raise ContractError(f"flow data must be (H, W, 2), got {tuple(d.shape)}")
        if self.direction not in (FORWARD, BACKWARD):
            raise ContractError(f"direction must be '{FORWARD}' or '{BACKWARD}', got {self.direction!r}")
        if not torch.isfinite(d).all():
            raise ContractError("flow contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape_hw(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class ValidMask:
    """An (H, W) boolean grid marking pixels that participate in a computation."""

    data: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "data", as_tensor(self.data))
        d = self.data
        if d.ndim != 2:
            raise ContractError(f"mask data must be (H, W), got {tuple(d.shape)}")
        if d.dtype != torch.bool:
            object.__setattr__(self, "data", d.to(torch.bool))

    @classmethod
    def all_true(cls, height: int, width: int) -> "ValidMask":
        return cls(torch.ones(height, width, dtype=torch.bool))

    @property
    def shape_hw(self) -> tuple[int, int]:
        return (self.data.shape[0], self.data.shape[1])

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class ConfidenceMap:
    """An (H, W) per-pixel reliability grid with values in (0, 1]."""

    data: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "data", as_tensor(self.data))
        d = self.data
        if d.ndim != 2:
            raise ContractError(f"confidence data must be (H, W), got {tuple(d.shape)}")
        if not torch.isfinite(d).all():
            raise ContractError("confidence contains non-finite values")
        if d.min() <= 0 or d.max() > 1:
            raise ContractError("confidence values must lie in (0, 1]")

    @property
    def shape_hw(self) -> tuple[int, int]:
        return (self.data.shape[0], self.data.shape[1])


def pixel_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Identity coordinate grid of shape (H, W, 2) holding (x, y) = (col, row)."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1)


def bilinear_sample(field: FlowField, coords) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample a flow field at absolute pixel positions with border clamping.

    `coords` is an (H, W, 2) grid of (x, y) positions matching the field's
    shape. Positions outside [0, W-1] x [0, H-1] are clamped to the border
    before interpolation. Returns the sampled (H, W, 2) grid and an (H, W)
    boolean grid marking positions that were out of bounds before clamping.
    """
    data = field.data
    coords = as_tensor(coords, dtype=data.dtype)
    h, w = data.shape[0], data.shape[1]
    if coords.shape != (h, w, 2):
        raise ContractError(
            f"coords shape {tuple(coords.shape)} does not match field shape ({h}, {w}, 2)"
        )
    if not torch.isfinite(coords).all():
        raise ContractError("coords contain non-finite values")

    x = coords[..., 0]
    y = coords[..., 1]
    oob = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)
    x = x.clamp(0, w - 1)
    y = y.clamp(0, h - 1)

    x0 = x.floor()
    y0 = y.floor()
    wx = (x - x0).unsqueeze(-1)
    wy = (y - y0).unsqueeze(-1)
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=w - 1)
    y1i = (y0i + 1).clamp(max=h - 1)

    v00 = data[y0i, x0i]
    v01 = data[y0i, x1i]
    v10 = data[y1i, x0i]
    v11 = data[y1i, x1i]
    sampled = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)
    return sampled, oob


def _backward_at_forward_target(vf: FlowField, vb: FlowField) -> tuple[torch.Tensor, torch.Tensor]:
    """Backward flow resampled at each pixel's forward-displaced position."""
    if vf.direction != FORWARD or vb.direction != BACKWARD:
        raise ContractError(
            f"expected (forward, backward) flow pair, got ({vf.direction}, {vb.direction})"
        )
    if vf.shape_hw != vb.shape_hw:
        raise ContractError(f"flow shapes differ: {vf.shape_hw} vs {vb.shape_hw}")
    grid = pixel_grid(vf.height, vf.width, dtype=vf.data.dtype, device=vf.data.device)
    coords = grid + vf.data
    return bilinear_sample(vb, coords)


def fb_residual(vf: FlowField, vb: FlowField) -> torch.Tensor:
    """Per-pixel squared magnitude of the forward flow plus the backward flow
    sampled at the forward-displaced position. Zero where the two fields are
    exact inverses of each other."""
    vb_at, _ = _backward_at_forward_target(vf, vb)
    return ((vf.data + vb_at) ** 2).sum(dim=-1)


def confidence_map(
    vf: FlowField,
    vb: FlowField,
    gamma1: float = DEFAULT_GAMMA1,
    gamma2: float = DEFAULT_GAMMA2,
) -> ConfidenceMap:
    """Per-pixel reliability of a forward/backward prediction pair.

    Computes exp(-r / (gamma1 * (|vf|^2 + |vb_sampled|^2) + gamma2)) where r
    is the forward-backward residual. gamma1 scales tolerance with flow
    magnitude; gamma2 > 0 keeps the denominator away from zero, so the
    output is always in (0, 1].
    """
    if gamma1 < 0:
        raise ContractError(f"gamma1 must be >= 0, got {gamma1}")
    if gamma2 <= 0:
        raise ContractError(f"gamma2 must be > 0, got {gamma2}")
    vb_at, _ = _backward_at_forward_target(vf, vb)
    fwd = vf.data.to(torch.float64)
    bwd = vb_at.to(torch.float64)
    residual = ((fwd + bwd) ** 2).sum(dim=-1)
    denom = gamma1 * ((fwd**2).sum(dim=-1) + (bwd**2).sum(dim=-1)) + gamma2
    conf = torch.exp(-residual / denom)
    # With gamma1 > 0 the exponent is bounded by 2/gamma1 and exp never
    # underflows in float64; with gamma1 = 0 it is unbounded, so floor the
    # result at a tiny positive value to keep the (0, 1] contract.
    return ConfidenceMap(conf.clamp(min=1e-300))


def consistency_mask(conf: ConfidenceMap, tau: float) -> ValidMask:
    """Boolean gate selecting pixels whose confidence is at least tau."""
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")
    return ValidMask(conf.data >= tau)


def _check_metric_inputs(pred: FlowField, gt: FlowField, valid: ValidMask) -> None:
    if pred.shape_hw != gt.shape_hw or pred.shape_hw != valid.shape_hw:
        raise ContractError(
            f"shape mismatch: pred {pred.shape_hw}, gt {gt.shape_hw}, valid {valid.shape_hw}"
        )
    if pred.direction != gt.direction:
        raise ContractError(
            f"direction mismatch: pred is {pred.direction}, gt is {gt.direction}"
        )
    if valid.count() == 0:
        raise ContractError("no valid pixels")


def epe(pred: FlowField, gt: FlowField, valid: ValidMask) -> float:
    """Mean end-point error: Euclidean norm of (pred - gt) over valid pixels."""
    _check_metric_inputs(pred, gt, valid)
    err = torch.linalg.vector_norm(pred.data - gt.data, dim=-1)
    return float(err[valid.data].mean())


def fl_all(pred: FlowField, gt: FlowField, valid: ValidMask, convention: str = "and") -> float:
    """Outlier percentage over valid pixels.

    The default "and" convention flags a pixel when its end-point error
    exceeds 3 px and also exceeds 5% of the ground-truth magnitude (the
    benchmark definition). "or" flags when either bound is exceeded.
    """
    if convention not in ("and", "or"):
        raise ContractError(f"convention must be 'and' or 'or', got {convention!r}")
    _check_metric_inputs(pred, gt, valid)
    err = torch.linalg.vector_norm(pred.data - gt.data, dim=-1)
    mag = torch.linalg.vector_norm(gt.data, dim=-1)
    if convention == "and":
        outlier = (err > 3.0) & (err > 0.05 * mag)
    else:
        outlier = (err > 3.0) | (err > 0.05 * mag)
    return 100.0 * float(outlier[valid.data].float().mean())


class CalibrationPoint(NamedTuple):
    tau: float
    epe: float | None  # None when no pixel clears the threshold
    coverage: float


def calibration_curve(
    pred_f: FlowField,
    pred_b: FlowField,
    gt: FlowField,
    valid: ValidMask,
    thresholds: Sequence[float],
    gamma1: float = DEFAULT_GAMMA1,
    gamma2: float = DEFAULT_GAMMA2,
) -> list[CalibrationPoint]:
    """EPE restricted to confidence-selected pixels, per threshold.

    For each tau, pixels with confidence >= tau (intersected with `valid`)
    are selected; coverage is the selected fraction of valid pixels. An
    entry whose selection is empty reports coverage 0 and EPE None.
    """
    thresholds = list(thresholds)
    if any(not 0.0 <= t <= 1.0 for t in thresholds):
        raise ContractError("thresholds must lie in [0, 1]")
    if thresholds != sorted(thresholds):
        raise ContractError("thresholds must be sorted ascending")
    _check_metric_inputs(pred_f, gt, valid)

    conf = confidence_map(pred_f, pred_b, gamma1, gamma2)
    n_valid = valid.count()
    points = []
    for tau in thresholds:
        sel = consistency_mask(conf, tau).data & valid.data
        n_sel = int(sel.sum())
        coverage = n_sel / n_valid
        if n_sel == 0:
            points.append(CalibrationPoint(tau, None, 0.0))
        else:
            points.append(CalibrationPoint(tau, epe(pred_f, gt, ValidMask(sel)), coverage))
    return points
