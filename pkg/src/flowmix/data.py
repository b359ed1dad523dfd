"""Synthetic labeled data with analytic ground truth, flow-file codecs, and
labeled/unlabeled batch plumbing.

Scenes are built from continuous multi-octave value-noise textures: a
translating background plus a few rigidly moving textured sprites. Both
frames sample the same continuous texture functions at analytically related
points, so the ground-truth flow is exact by construction, with standard
occlusion layering (the front sprite's flow wins).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np
import torch
from PIL import Image as PILImage

from .errors import CodecError, ConfigError, ContractError
from .flowcore import FORWARD, FlowField, Image, ValidMask
from .model import ToyFlowModel

FLO_MAGIC = b"PIEH"  # float32 202021.25, little-endian
UNKNOWN_FLOW_THRESHOLD = 1e9
UNKNOWN_FLOW_SENTINEL = 1e10

MANIFEST_FORMATS = ("synth", "flo", "kitti_png")


@dataclass(frozen=True)
class LabeledSample:
    frame1: Image
    frame2: Image
    gt_flow: FlowField
    valid: ValidMask
    id: str

    def __post_init__(self):
        hw = self.frame1.shape_hw
        if self.frame2.shape_hw != hw or self.gt_flow.shape_hw != hw or self.valid.shape_hw != hw:
            raise ContractError(f"inconsistent shapes in sample {self.id!r}")


@dataclass(frozen=True)
class UnlabeledSample:
    frame1: Image
    frame2: Image
    id: str

    def __post_init__(self):
        if self.frame1.shape_hw != self.frame2.shape_hw:
            raise ContractError(f"inconsistent shapes in sample {self.id!r}")


@dataclass(frozen=True)
class SynthConfig:
    resolution: tuple[int, int] = (64, 64)
    sprite_count_range: tuple[int, int] = (1, 4)
    max_translation: float = 6.0
    max_rotation: float = 5.0  # degrees
    noise_octaves: int = 3
    seed: int = 0
    # When set, frame2 is mixed with an independently rendered scene at this
    # ratio (appearance-only corruption; ground truth is untouched). Used to
    # build "challenging conditions" evaluation sets.
    distract_lambda: float | None = None

    def __post_init__(self):
        res = self.resolution
        if isinstance(res, int):
            res = (res, res)
        res = (int(res[0]), int(res[1]))
        object.__setattr__(self, "resolution", res)
        if res[0] < 8 or res[1] < 8:
            raise ConfigError(f"resolution must be at least 8x8, got {res}")
        lo, hi = self.sprite_count_range
        if lo < 0 or hi < lo or hi > 8:
            raise ConfigError(f"bad sprite_count_range {self.sprite_count_range}")
        object.__setattr__(self, "sprite_count_range", (int(lo), int(hi)))
        if not 0 <= self.max_translation <= ToyFlowModel.DISPLACEMENT_RANGE:
            raise ConfigError(
                f"max_translation must lie in [0, {ToyFlowModel.DISPLACEMENT_RANGE}] "
                f"(the reference model's displacement range), got {self.max_translation}"
            )
        if self.max_rotation < 0:
            raise ConfigError("max_rotation must be >= 0")
        if self.noise_octaves < 1:
            raise ConfigError("noise_octaves must be >= 1")
        if self.distract_lambda is not None and not 0.0 < self.distract_lambda <= 1.0:
            raise ConfigError("distract_lambda must lie in (0, 1] when set")


class _NoiseTexture:
    """Continuous multi-octave value noise: bilinear interpolation of random
    lattices with wraparound, evaluable at arbitrary float coordinates."""

    def __init__(self, rng: np.random.Generator, octaves: int, period: float):
        self.layers = []
        total = 0.0
        for o in range(octaves):
            n = 4 * (2**o)
            amp = 0.5**o
            self.layers.append((rng.random((n, n)), n / period, amp))
            total += amp
        self.total_amp = total

    def sample(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros(np.broadcast(x, y).shape, dtype=np.float64)
        for lattice, freq, amp in self.layers:
            n = lattice.shape[0]
            u = x * freq
            v = y * freq
            i0 = np.floor(u).astype(np.int64)
            j0 = np.floor(v).astype(np.int64)
            fu = u - i0
            fv = v - j0
            i0m = i0 % n
            i1m = (i0 + 1) % n
            j0m = j0 % n
            j1m = (j0 + 1) % n
            v00 = lattice[j0m, i0m]
            v01 = lattice[j0m, i1m]
            v10 = lattice[j1m, i0m]
            v11 = lattice[j1m, i1m]
            out += amp * ((1 - fv) * ((1 - fu) * v00 + fu * v01) + fv * ((1 - fu) * v10 + fu * v11))
        return out / self.total_amp


def _colorize(noise: np.ndarray, tint: np.ndarray) -> np.ndarray:
    return tint[None, None, :] * (0.25 + 0.75 * noise[..., None])


@dataclass
class _Sprite:
    kind: str  # "disk" or "square"
    cx: float
    cy: float
    radius: float
    tx: float
    ty: float
    theta: float  # radians
    texture: _NoiseTexture
    tint: np.ndarray

    def support(self, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
        if self.kind == "disk":
            return lx**2 + ly**2 <= self.radius**2
        return np.maximum(np.abs(lx), np.abs(ly)) <= self.radius


@dataclass(frozen=True)
class SceneSample:
    """A labeled sample plus generator-side truth useful for verification."""

    sample: LabeledSample
    non_occluded: np.ndarray  # (H, W) bool: forward target visible in frame2


def _render_scene(cfg: SynthConfig, rng: np.random.Generator):
    height, width = cfg.resolution
    period = float(max(height, width))
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))

    bg_tex = _NoiseTexture(rng, cfg.noise_octaves, period)
    bg_tint = rng.uniform(0.25, 1.0, 3)
    tbg = rng.uniform(-cfg.max_translation, cfg.max_translation, 2)

    count = int(rng.integers(cfg.sprite_count_range[0], cfg.sprite_count_range[1] + 1))
    sprites = []
    scale = min(height, width)
    for _ in range(count):
        sprites.append(
            _Sprite(
                kind="disk" if rng.integers(0, 2) == 0 else "square",
                cx=float(rng.uniform(0.15, 0.85) * width),
                cy=float(rng.uniform(0.15, 0.85) * height),
                radius=float(rng.uniform(0.12, 0.28) * scale),
                tx=float(rng.uniform(-cfg.max_translation, cfg.max_translation)),
                ty=float(rng.uniform(-cfg.max_translation, cfg.max_translation)),
                theta=math.radians(float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))),
                texture=_NoiseTexture(rng, cfg.noise_octaves, period),
                tint=rng.uniform(0.25, 1.0, 3),
            )
        )

    frame1 = _colorize(bg_tex.sample(xs, ys), bg_tint)
    owner1 = np.full((height, width), -1, dtype=np.int64)
    for i, s in enumerate(sprites):
        lx = xs - s.cx
        ly = ys - s.cy
        m = s.support(lx, ly)
        frame1[m] = _colorize(s.texture.sample(lx, ly), s.tint)[m]
        owner1[m] = i

    frame2 = _colorize(bg_tex.sample(xs - tbg[0], ys - tbg[1]), bg_tint)
    for i, s in enumerate(sprites):
        dx = xs - s.cx - s.tx
        dy = ys - s.cy - s.ty
        c, sn = math.cos(s.theta), math.sin(s.theta)
        ux = c * dx + sn * dy
        uy = -sn * dx + c * dy
        m = s.support(ux, uy)
        frame2[m] = _colorize(s.texture.sample(ux, uy), s.tint)[m]

    flow = np.empty((height, width, 2), dtype=np.float64)
    flow[..., 0] = tbg[0]
    flow[..., 1] = tbg[1]
    for i, s in enumerate(sprites):
        m = owner1 == i
        lx = xs - s.cx
        ly = ys - s.cy
        c, sn = math.cos(s.theta), math.sin(s.theta)
        rx = c * lx - sn * ly
        ry = sn * lx + c * ly
        flow[..., 0][m] = (rx + s.cx + s.tx - xs)[m]
        flow[..., 1][m] = (ry + s.cy + s.ty - ys)[m]

    target_x = xs + flow[..., 0]
    target_y = ys + flow[..., 1]
    valid = (target_x >= 0) & (target_x <= width - 1) & (target_y >= 0) & (target_y <= height - 1)

    occluded = np.zeros((height, width), dtype=bool)
    for j, s in enumerate(sprites):
        dx = target_x - s.cx - s.tx
        dy = target_y - s.cy - s.ty
        c, sn = math.cos(s.theta), math.sin(s.theta)
        ux = c * dx + sn * dy
        uy = -sn * dx + c * dy
        occluded |= s.support(ux, uy) & (owner1 < j)
    non_occluded = valid & ~occluded

    return frame1, frame2, flow, valid, non_occluded


def generate_scene(cfg: SynthConfig, rng: np.random.Generator, id: str = "sample") -> SceneSample:
    """Render one labeled sample; also reports which pixels stay visible."""
    frame1, frame2, flow, valid, non_occ = _render_scene(cfg, rng)
    if cfg.distract_lambda is not None and cfg.distract_lambda < 1.0:
        clean = replace(cfg, distract_lambda=None)
        d_frame1, _, _, _, _ = _render_scene(clean, rng)
        lam = cfg.distract_lambda
        frame2 = np.clip(lam * frame2 + (1.0 - lam) * d_frame1, 0.0, 1.0)
    sample = LabeledSample(
        frame1=Image(torch.from_numpy(np.clip(frame1, 0.0, 1.0)).float()),
        frame2=Image(torch.from_numpy(np.clip(frame2, 0.0, 1.0)).float()),
        gt_flow=FlowField(torch.from_numpy(flow).float(), FORWARD),
        valid=ValidMask(torch.from_numpy(valid)),
        id=id,
    )
    return SceneSample(sample=sample, non_occluded=non_occ)


def generate_sample(cfg: SynthConfig, rng: np.random.Generator, id: str = "sample") -> LabeledSample:
    """Deterministic synthetic labeled sample (see module docstring)."""
    return generate_scene(cfg, rng, id).sample


def sample_seed(base_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([base_seed, index])


def build_labeled_dataset(
    cfg: SynthConfig, count: int, id_prefix: str = "sample", base_seed: int | None = None
) -> list[LabeledSample]:
    base = cfg.seed if base_seed is None else base_seed
    return [
        generate_sample(cfg, sample_seed(base, i), id=f"{id_prefix}-{i:04d}") for i in range(count)
    ]


def build_unlabeled_dataset(
    cfg: SynthConfig, count: int, id_prefix: str = "unlabeled", base_seed: int | None = None
) -> list[UnlabeledSample]:
    labeled = build_labeled_dataset(cfg, count, id_prefix, base_seed)
    return [UnlabeledSample(s.frame1, s.frame2, s.id) for s in labeled]


# ---------------------------------------------------------------------------
# batching

def batch_stream(samples: Sequence, batch_size: int, rng: np.random.Generator) -> Iterator[list]:
    """Infinite stream of batches; reshuffles every pass, drops remainders."""
    if not samples:
        raise ConfigError("empty sample stream")
    if batch_size < 1 or batch_size > len(samples):
        raise ConfigError(f"batch_size {batch_size} incompatible with {len(samples)} samples")
    samples = list(samples)
    while True:
        order = rng.permutation(len(samples))
        for start in range(0, len(samples) - batch_size + 1, batch_size):
            yield [samples[i] for i in order[start : start + batch_size]]


def interleave_batches(
    labeled: Sequence[LabeledSample],
    unlabeled: Sequence[UnlabeledSample],
    batch_size: int,
    rng: np.random.Generator,
) -> Iterator[tuple[list[LabeledSample], list[UnlabeledSample]]]:
    """Paired labeled/unlabeled batches of equal size, one pair per step.

    An epoch is one shuffled pass over the labeled stream; the unlabeled
    stream reshuffles and cycles independently whenever it runs out.
    """
    if not labeled:
        raise ConfigError("empty labeled stream")
    if not unlabeled:
        raise ConfigError("empty unlabeled stream")
    lab = batch_stream(labeled, batch_size, rng)
    unl_batch_size = min(batch_size, len(unlabeled))
    unl = batch_stream(unlabeled, unl_batch_size, rng)
    while True:
        lab_batch = next(lab)
        unl_batch = next(unl)
        while len(unl_batch) < batch_size:  # small pools cycle within a step
            unl_batch = unl_batch + next(unl)
        yield lab_batch, unl_batch[:batch_size]


# ---------------------------------------------------------------------------
# flow-file codecs

def write_flo(fld: FlowField, path, valid: ValidMask | None = None) -> None:
    """Middlebury-style .flo: magic, little-endian int32 width/height, then
    row-major interleaved (u, v) float32. Invalid pixels are written as the
    conventional huge sentinel."""
    data = fld.data.detach().cpu().numpy().astype("<f4")
    if valid is not None:
        if valid.shape_hw != fld.shape_hw:
            raise ContractError("valid mask shape does not match field")
        data = data.copy()
        data[~valid.data.numpy()] = UNKNOWN_FLOW_SENTINEL
    h, w = fld.shape_hw
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", w, h))
        f.write(np.ascontiguousarray(data).tobytes())


def read_flo(path) -> tuple[FlowField, ValidMask]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise CodecError(f"{path}: truncated header, {len(raw)} bytes before offset 4")
    if raw[:4] != FLO_MAGIC:
        raise CodecError(f"{path}: bad magic {raw[:4]!r} at offset 0, expected {FLO_MAGIC!r}")
    if len(raw) < 12:
        raise CodecError(f"{path}: truncated header, {len(raw)} bytes before offset 12")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0 or w > 10**6 or h > 10**6:
        raise CodecError(f"{path}: implausible dimensions {w}x{h} at offset 4")
    expected = 12 + 8 * w * h
    if len(raw) < expected:
        raise CodecError(
            f"{path}: truncated payload at offset {len(raw)}, expected {expected} bytes"
        )
    arr = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    arr = arr.astype(np.float32)
    finite = np.isfinite(arr).all(axis=-1)
    known = (np.abs(arr) < UNKNOWN_FLOW_THRESHOLD).all(axis=-1) & finite
    arr = np.where(known[..., None], arr, 0.0).astype(np.float32)
    return FlowField(torch.from_numpy(arr), FORWARD), ValidMask(torch.from_numpy(known))


def write_kitti_png(fld: FlowField, valid: ValidMask, path) -> None:
    """KITTI-style 16-bit 3-channel PNG: channels (u, v, valid) in RGB order
    with u, v stored as value * 64 + 2^15."""
    if valid.shape_hw != fld.shape_hw:
        raise ContractError("valid mask shape does not match field")
    data = fld.data.detach().cpu().numpy().astype(np.float64)
    enc = np.rint(data * 64.0) + 32768.0
    if enc.min() < 0 or enc.max() > 65535:
        raise CodecError(
            f"flow magnitude out of the +/-512 px encodable range (encoded extreme "
            f"{enc.min():.0f}..{enc.max():.0f})"
        )
    png = np.zeros((fld.height, fld.width, 3), dtype=np.uint16)
    png[..., 0] = enc[..., 0].astype(np.uint16)
    png[..., 1] = enc[..., 1].astype(np.uint16)
    png[..., 2] = valid.data.numpy().astype(np.uint16)
    if not cv2.imwrite(str(path), png[..., ::-1]):  # cv2 writes BGR order
        raise CodecError(f"cannot write {path}")


def read_kitti_png(path) -> tuple[FlowField, ValidMask]:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise CodecError(f"cannot read {path}")
    if img.dtype != np.uint16 or img.ndim != 3 or img.shape[2] != 3:
        raise CodecError(
            f"{path}: expected a 16-bit 3-channel image, got dtype {img.dtype} shape {img.shape}"
        )
    rgb = img[..., ::-1]
    u = (rgb[..., 0].astype(np.int32) - 32768).astype(np.float32) / 64.0
    v = (rgb[..., 1].astype(np.int32) - 32768).astype(np.float32) / 64.0
    valid = rgb[..., 2] > 0
    flow = np.stack([u, v], axis=-1)
    return FlowField(torch.from_numpy(flow), FORWARD), ValidMask(torch.from_numpy(valid.copy()))


# ---------------------------------------------------------------------------
# image files and dataset manifests

def save_image_png(img: Image, path) -> None:
    arr = (img.data.detach().cpu().numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(str(path))


def load_image_png(path) -> Image:
    arr = np.asarray(PILImage.open(str(path)).convert("RGB"), dtype=np.float32) / 255.0
    return Image(torch.from_numpy(arr))


def write_manifest(path, entries: Sequence[Sequence[str]]) -> None:
    with open(path, "w") as f:
        for entry in entries:
            f.write("\t".join(str(e) for e in entry) + "\n")


def read_manifest(path) -> list[list[str]]:
    lines = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            lines.append(line.split("\t"))
    return lines


def export_dataset(samples: Sequence[LabeledSample], out_dir, fmt: str = "flo") -> Path:
    """Write frames as PNG and flow in the requested codec; returns the
    manifest path."""
    if fmt not in ("flo", "kitti_png"):
        raise ConfigError(f"export format must be 'flo' or 'kitti_png', got {fmt!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "flo" if fmt == "flo" else "png"
    entries = []
    for s in samples:
        f1 = f"{s.id}_frame1.png"
        f2 = f"{s.id}_frame2.png"
        fl = f"{s.id}_flow.{ext}"
        save_image_png(s.frame1, out_dir / f1)
        save_image_png(s.frame2, out_dir / f2)
        if fmt == "flo":
            write_flo(s.gt_flow, out_dir / fl, s.valid)
        else:
            write_kitti_png(s.gt_flow, s.valid, out_dir / fl)
        entries.append((s.id, f1, f2, fl))
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest


def load_dataset(manifest_path, fmt: str, synth_cfg: SynthConfig | None = None) -> list[LabeledSample]:
    """Materialize a labeled dataset from a manifest.

    "flo"/"kitti_png" manifests list id + frame and flow paths (relative to
    the manifest); "synth" manifests list id + generator seed and require a
    SynthConfig.
    """
    if fmt not in MANIFEST_FORMATS:
        raise ConfigError(f"format must be one of {MANIFEST_FORMATS}, got {fmt!r}")
    rows = read_manifest(manifest_path)
    if not rows:
        raise ConfigError(f"empty manifest {manifest_path}")
    root = Path(manifest_path).parent
    samples = []
    if fmt == "synth":
        if synth_cfg is None:
            raise ConfigError("synth manifests require a SynthConfig")
        for row in rows:
            if len(row) != 2:
                raise ConfigError(f"synth manifest rows must be 'id<TAB>seed', got {row}")
            sid, seed = row[0], int(row[1])
            samples.append(generate_sample(synth_cfg, np.random.default_rng(seed), id=sid))
        return samples
    reader = read_flo if fmt == "flo" else read_kitti_png
    for row in rows:
        if len(row) != 4:
            raise ConfigError(f"manifest rows must be 'id f1 f2 flow', got {row}")
        sid, f1, f2, fl = row
        flow, valid = reader(root / fl)
        samples.append(
            LabeledSample(load_image_png(root / f1), load_image_png(root / f2), flow, valid, sid)
        )
    return samples
