"""Construction of distracted frame pairs and baseline perturbations.

A "distracted" frame is a convex combination of the original frame and a
distractor image drawn from the same dataset, so the perturbation carries
realistic scene content instead of synthetic noise. All randomness flows
through an explicit numpy Generator, so augmentation is deterministic per
seed and never touches ground-truth flow.
"""

from __future__ import annotations

import math
from dataclasses import InitVar, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError
from .flowcore import Image

VARIANTS = (
    "distract_second",
    "distract_first",
    "distract_both_same",
    "distract_both_diff",
    "gaussian_noise",
    "random_shapes",
    "none",
)

# Numerical guard for sampled mixing ratios: keeps the distraction weight
# nonzero and the gradient through the mixed frame meaningful.
LAMBDA_EPS = 1e-4


@dataclass(frozen=True)
class MixingRatio:
    """Convex-combination weight for original vs. distractor content."""

    value: float
    allow_endpoints: InitVar[bool] = False

    def __post_init__(self, allow_endpoints: bool):
        v = float(self.value)
        object.__setattr__(self, "value", v)
        if allow_endpoints:
            ok = 0.0 <= v <= 1.0
        else:
            ok = 0.0 < v < 1.0
        if not ok:
            raise ContractError(f"mixing ratio {v} outside the permitted interval")


@dataclass(frozen=True)
class AugmentConfig:
    variant: str = "distract_second"
    alpha1: float = 1.0
    alpha2: float = 1.0
    noise_sigma: float = 0.1
    shape_count_range: tuple[int, int] = (5, 10)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ContractError("alpha values must be positive")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")
        lo, hi = self.shape_count_range
        if lo < 1 or hi < lo:
            raise ContractError(f"bad shape_count_range {self.shape_count_range}")
        object.__setattr__(self, "shape_count_range", (int(lo), int(hi)))


@dataclass(frozen=True)
class DistractedPair:
    """A frame pair after augmentation, with mixing provenance.

    Mixing ratios are present exactly for the frames the variant mixed with
    a distractor; baseline perturbations (gaussian noise) carry none.
    """

    frame1: Image
    frame2: Image
    lambda1: MixingRatio | None
    lambda2: MixingRatio | None
    variant: str
    distractor_ids: tuple[str, ...] = field(default_factory=tuple)

    def effective_lambda(self) -> MixingRatio | None:
        """The mixing ratio that weights this pair's supervision.

        With a single mixed frame this is that frame's ratio. When both
        frames are mixed, the more corrupted frame (smaller ratio) bounds
        how trustworthy the pair is, so the minimum is used.
        """
        present = [r for r in (self.lambda1, self.lambda2) if r is not None]
        if not present:
            return None
        return min(present, key=lambda r: r.value)


def sample_lambda(alpha: float, rng: np.random.Generator) -> MixingRatio:
    """Draw a mixing ratio from Beta(alpha, alpha).

    alpha = 1 is the uniform distribution; alpha < 1 concentrates near the
    endpoints. Draws that land exactly on an endpoint are redrawn once and
    then clamped to [LAMBDA_EPS, 1 - LAMBDA_EPS].
    """
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    lam = rng.beta(alpha, alpha)
    if not 0.0 < lam < 1.0:
        lam = rng.beta(alpha, alpha)
    lam = min(max(lam, LAMBDA_EPS), 1.0 - LAMBDA_EPS)
    return MixingRatio(lam)


def mix(base: Image, distractor: Image, lam: MixingRatio) -> Image:
    """Per-pixel convex combination: lam * base + (1 - lam) * distractor."""
    if base.shape_hw != distractor.shape_hw:
        raise ContractError(f"shape mismatch: {base.shape_hw} vs {distractor.shape_hw}")
    out = lam.value * base.data + (1.0 - lam.value) * distractor.data
    return Image(out.clamp(0.0, 1.0))


def _random_resized_crop(img: Image, target_hw: tuple[int, int], rng: np.random.Generator) -> Image:
    """Crop a random sub-window (area 50-100%, aspect jittered) and resize."""
    src = img.data
    h, w = img.shape_hw
    th, tw = target_hw
    area_scale = rng.uniform(0.5, 1.0)
    log_ratio = rng.uniform(math.log(3 / 4), math.log(4 / 3))
    aspect = math.exp(log_ratio)
    crop_area = area_scale * h * w
    cw = min(w, max(8, int(round(math.sqrt(crop_area * aspect)))))
    ch = min(h, max(8, int(round(math.sqrt(crop_area / aspect)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = src[top : top + ch, left : left + cw]
    if (ch, cw) != (th, tw):
        crop = F.interpolate(
            crop.permute(2, 0, 1).unsqueeze(0), size=(th, tw), mode="bilinear", align_corners=False
        )[0].permute(1, 2, 0)
    return Image(crop.clamp(0.0, 1.0))


def sample_distractor(
    pool: Sequence,
    exclude,
    rng: np.random.Generator,
    target_hw: tuple[int, int] | None = None,
) -> tuple[Image, str]:
    """Draw a random frame from the pool, never from the excluded sample(s).

    Pool entries expose `.id`, `.frame1` and `.frame2`; one of the two
    frames is picked at random and random-resized-cropped to `target_hw`
    when given. Returns the frame and the source sample's id.
    """
    excluded = {exclude} if isinstance(exclude, str) or exclude is None else set(exclude)
    eligible = [s for s in pool if s.id not in excluded]
    if not eligible:
        raise ContractError("distractor pool is empty after exclusion")
    sample = eligible[int(rng.integers(0, len(eligible)))]
    frame = sample.frame1 if rng.integers(0, 2) == 0 else sample.frame2
    if target_hw is not None:
        frame = _random_resized_crop(frame, target_hw, rng)
    return frame, sample.id


def gaussian_perturb(img: Image, sigma: float, rng: np.random.Generator) -> Image:
    """Add zero-mean Gaussian noise of std sigma, clipped back to [0, 1]."""
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    noise = rng.normal(0.0, sigma, size=tuple(img.data.shape))
    out = img.data + torch.from_numpy(noise).to(img.data.dtype)
    return Image(out.clamp(0.0, 1.0))


def random_shapes_image(
    height: int,
    width: int,
    rng: np.random.Generator,
    count_range: tuple[int, int] = (5, 10),
) -> tuple[Image, int]:
    """A random solid background with 5-10 filled shapes of random colors.

    Returns the image and the number of shapes drawn.
    """
    canvas = np.ones((height, width, 3), dtype=np.float32) * rng.uniform(0.0, 1.0, 3).astype(np.float32)
    ys, xs = np.mgrid[0:height, 0:width]
    n_shapes = int(rng.integers(count_range[0], count_range[1] + 1))
    scale = min(height, width)
    for _ in range(n_shapes):
        kind = ("circle", "triangle", "rectangle")[int(rng.integers(0, 3))]
        color = rng.uniform(0.0, 1.0, 3).astype(np.float32)
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        if kind == "circle":
            r = rng.uniform(0.05, 0.25) * scale
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r**2
        elif kind == "rectangle":
            hw = rng.uniform(0.05, 0.3) * scale
            hh = rng.uniform(0.05, 0.3) * scale
            mask = (np.abs(xs - cx) <= hw) & (np.abs(ys - cy) <= hh)
        else:
            r = rng.uniform(0.1, 0.35) * scale
            angles = rng.uniform(0, 2 * np.pi, 3)
            vx = cx + r * np.cos(angles)
            vy = cy + r * np.sin(angles)
            signs = []
            for i in range(3):
                x1, y1 = vx[i], vy[i]
                x2, y2 = vx[(i + 1) % 3], vy[(i + 1) % 3]
                signs.append((x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1))
            mask = ((signs[0] >= 0) & (signs[1] >= 0) & (signs[2] >= 0)) | (
                (signs[0] <= 0) & (signs[1] <= 0) & (signs[2] <= 0)
            )
        canvas[mask] = color
    return Image(np.clip(canvas, 0.0, 1.0)), n_shapes


def random_shapes_perturb(
    img: Image,
    lam: MixingRatio,
    rng: np.random.Generator,
    count_range: tuple[int, int] = (5, 10),
) -> Image:
    """Mix a synthesized shapes image into the frame with ratio lam.

    Mixing (rather than opaque pasting) keeps the perturbation dosage
    comparable with realistic distraction, isolating content realism.
    """
    shapes, _ = random_shapes_image(img.height, img.width, rng, count_range)
    return mix(img, shapes, lam)


def make_distracted_pair(
    frame1: Image,
    frame2: Image,
    config: AugmentConfig,
    pool: Sequence,
    rng: np.random.Generator,
    exclude_id: str | None = None,
) -> DistractedPair:
    """Apply the configured perturbation variant to a frame pair."""
    if frame1.shape_hw != frame2.shape_hw:
        raise ContractError(f"frame shapes differ: {frame1.shape_hw} vs {frame2.shape_hw}")
    hw = frame1.shape_hw
    variant = config.variant

    if variant == "none":
        return DistractedPair(frame1, frame2, None, None, variant)

    if variant == "gaussian_noise":
        out2 = gaussian_perturb(frame2, config.noise_sigma, rng)
        return DistractedPair(frame1, out2, None, None, variant)

    if variant == "random_shapes":
        lam2 = sample_lambda(config.alpha2, rng)
        out2 = random_shapes_perturb(frame2, lam2, rng, config.shape_count_range)
        return DistractedPair(frame1, out2, None, lam2, variant)

    if variant == "distract_second":
        d, did = sample_distractor(pool, exclude_id, rng, hw)
        lam2 = sample_lambda(config.alpha2, rng)
        return DistractedPair(frame1, mix(frame2, d, lam2), None, lam2, variant, (did,))

    if variant == "distract_first":
        d, did = sample_distractor(pool, exclude_id, rng, hw)
        lam1 = sample_lambda(config.alpha1, rng)
        return DistractedPair(mix(frame1, d, lam1), frame2, lam1, None, variant, (did,))

    if variant == "distract_both_same":
        d, did = sample_distractor(pool, exclude_id, rng, hw)
        lam1 = sample_lambda(config.alpha1, rng)
        lam2 = sample_lambda(config.alpha2, rng)
        return DistractedPair(mix(frame1, d, lam1), mix(frame2, d, lam2), lam1, lam2, variant, (did,))

    # distract_both_diff: two independent distractor images
    d1, did1 = sample_distractor(pool, exclude_id, rng, hw)
    exclude2 = {exclude_id, did1} if exclude_id is not None else {did1}
    d2, did2 = sample_distractor(pool, exclude2, rng, hw)
    lam1 = sample_lambda(config.alpha1, rng)
    lam2 = sample_lambda(config.alpha2, rng)
    return DistractedPair(mix(frame1, d1, lam1), mix(frame2, d2, lam2), lam1, lam2, variant, (did1, did2))
