"""Flow-model contract and a small reference estimator.

The reference model follows the now-standard recipe for iterative flow
networks: a convolutional encoder at 1/4 resolution, an all-pairs
correlation volume with a two-level pyramid, and a ConvGRU that refines
the flow over a fixed number of iterations. It is sized to train on a CPU
in minutes at 64x64, not to compete with full-scale architectures.
"""

from __future__ import annotations

from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ContractError
from .flowcore import BACKWARD, FORWARD, FlowField, Image
from .losses import PredictionSequence

CHECKPOINT_MAGIC = "flowmix-checkpoint"
CHECKPOINT_VERSION = 1


@runtime_checkable
class FlowModelContract(Protocol):
    """Anything that predicts a per-iteration sequence of forward flows."""

    def predict(self, frame1: Image, frame2: Image, iterations: int) -> PredictionSequence: ...


def stack_images(images: Sequence[Image]) -> torch.Tensor:
    """Stack (H, W, 3) images into a (B, 3, H, W) float batch."""
    return torch.stack([img.data.permute(2, 0, 1) for img in images]).float()


def batch_to_sequences(flows: Sequence[torch.Tensor], direction: str = FORWARD) -> list[PredictionSequence]:
    """Split per-iteration (B, 2, H, W) flow batches into per-sample sequences."""
    batch = flows[0].shape[0]
    seqs = []
    for b in range(batch):
        fields = [FlowField(f[b].permute(1, 2, 0), direction) for f in flows]
        seqs.append(PredictionSequence(fields))
    return seqs


class _Encoder(nn.Module):
    """Three-conv encoder to 1/4 resolution."""

    def __init__(self, out_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 24, 7, stride=2, padding=3)
        self.conv2 = nn.Conv2d(24, 32, 3, padding=1)
        self.conv3 = nn.Conv2d(32, out_dim, 3, stride=2, padding=1)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return self.conv3(x)


class _ConvGRU(nn.Module):
    def __init__(self, hidden_dim: int, input_dim: int):
        super().__init__()
        self.convz = nn.Conv2d(hidden_dim + input_dim, hidden_dim, 3, padding=1)
        self.convr = nn.Conv2d(hidden_dim + input_dim, hidden_dim, 3, padding=1)
        self.convq = nn.Conv2d(hidden_dim + input_dim, hidden_dim, 3, padding=1)

    def forward(self, h, x):
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * q


def _all_pairs_correlation(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    b, c, h, w = f1.shape
    a = f1.reshape(b, c, h * w)
    bb = f2.reshape(b, c, h * w)
    corr = torch.einsum("bcn,bcm->bnm", a, bb) / c**0.5
    return corr.reshape(b * h * w, 1, h, w)


class ToyFlowModel(nn.Module):
    """Reference iterative flow estimator (see module docstring).

    Accepts frames whose height and width are multiples of 4 and at least
    16 px; nominal displacement range is +/-12 px at full resolution.
    """

    DEFAULT_ITERATIONS = 4
    MIN_SIZE = 16
    DISPLACEMENT_RANGE = 12.0

    def __init__(self, feat_dim: int = 48, hidden_dim: int = 48, context_dim: int = 24, radius: int = 3):
        super().__init__()
        self.hparams = {
            "feat_dim": feat_dim,
            "hidden_dim": hidden_dim,
            "context_dim": context_dim,
            "radius": radius,
        }
        self.radius = radius
        self.hidden_dim = hidden_dim
        self.context_dim = context_dim
        self.fnet = _Encoder(feat_dim)
        self.cnet = _Encoder(hidden_dim + context_dim)
        lookup_ch = 2 * (2 * radius + 1) ** 2  # two pyramid levels
        self.corr_proj = nn.Conv2d(lookup_ch, 48, 1)
        self.gru = _ConvGRU(hidden_dim, 48 + 2 + context_dim)
        self.flow_head = nn.Sequential(
            nn.Conv2d(hidden_dim, 32, 3, padding=1), nn.ReLU(), nn.Conv2d(32, 2, 3, padding=1)
        )

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _lookup(self, pyramid, coords, batch, h, w):
        r = self.radius
        dev = coords.device
        offs = torch.arange(-r, r + 1, dtype=coords.dtype, device=dev)
        delta = torch.stack(torch.meshgrid(offs, offs, indexing="xy"), dim=-1)
        delta = delta.reshape(1, 2 * r + 1, 2 * r + 1, 2)
        out = []
        for lvl, corr in enumerate(pyramid):
            centers = coords.permute(0, 2, 3, 1).reshape(batch * h * w, 1, 1, 2) / 2**lvl
            pts = centers + delta
            _, _, ch, cw = corr.shape
            gx = 2 * pts[..., 0] / (cw - 1) - 1
            gy = 2 * pts[..., 1] / (ch - 1) - 1
            grid = torch.stack([gx, gy], dim=-1)
            sampled = F.grid_sample(corr, grid, align_corners=True, padding_mode="zeros")
            out.append(sampled.reshape(batch, h, w, -1).permute(0, 3, 1, 2))
        return torch.cat(out, dim=1)

    def forward(self, frames1: torch.Tensor, frames2: torch.Tensor, iterations: int | None = None):
        """Per-iteration full-resolution flow batches, each (B, 2, H, W)."""
        iterations = self.DEFAULT_ITERATIONS if iterations is None else int(iterations)
        if iterations < 1:
            raise ContractError(f"iterations must be >= 1, got {iterations}")
        if frames1.shape != frames2.shape:
            raise ContractError(f"frame batch shapes differ: {frames1.shape} vs {frames2.shape}")
        _, _, height, width = frames1.shape
        if height % 4 or width % 4 or height < self.MIN_SIZE or width < self.MIN_SIZE:
            raise ContractError(
                f"frames must be multiples of 4 and at least {self.MIN_SIZE} px, got {height}x{width}"
            )

        fmap1 = self.fnet(frames1)
        fmap2 = self.fnet(frames2)
        ctx = self.cnet(frames1)
        hidden = torch.tanh(ctx[:, : self.hidden_dim])
        context = F.relu(ctx[:, self.hidden_dim :])

        batch, _, h, w = fmap1.shape
        corr0 = _all_pairs_correlation(fmap1, fmap2)
        pyramid = [corr0, F.avg_pool2d(corr0, 2)]

        ys, xs = torch.meshgrid(
            torch.arange(h, dtype=frames1.dtype, device=frames1.device),
            torch.arange(w, dtype=frames1.dtype, device=frames1.device),
            indexing="ij",
        )
        base = torch.stack([xs, ys]).unsqueeze(0).expand(batch, -1, -1, -1)

        flow = torch.zeros(batch, 2, h, w, dtype=frames1.dtype, device=frames1.device)
        outputs = []
        for _ in range(iterations):
            corr_feat = F.relu(self.corr_proj(self._lookup(pyramid, base + flow, batch, h, w)))
            hidden = self.gru(hidden, torch.cat([corr_feat, flow, context], dim=1))
            flow = flow + self.flow_head(hidden)
            up = F.interpolate(flow * 4.0, scale_factor=4, mode="bilinear", align_corners=False)
            outputs.append(up)
        return outputs

    def predict(self, frame1: Image, frame2: Image, iterations: int = DEFAULT_ITERATIONS) -> PredictionSequence:
        """Forward-flow prediction sequence for a single frame pair."""
        if frame1.shape_hw != frame2.shape_hw:
            raise ContractError(f"frame shapes differ: {frame1.shape_hw} vs {frame2.shape_hw}")
        flows = self.forward(stack_images([frame1]), stack_images([frame2]), iterations)
        return batch_to_sequences(flows, FORWARD)[0]


def predict_bidirectional(
    model: FlowModelContract, frame1: Image, frame2: Image, iterations: int
) -> tuple[PredictionSequence, PredictionSequence]:
    """Forward and backward prediction sequences, obtained by input swap."""
    forward = model.predict(frame1, frame2, iterations)
    swapped = model.predict(frame2, frame1, iterations)
    backward = PredictionSequence([FlowField(f.data, BACKWARD) for f in swapped])
    return forward, backward


def save_checkpoint(model: ToyFlowModel, path) -> None:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "model_kwargs": dict(model.hparams),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, str(path))


def load_checkpoint(path) -> ToyFlowModel:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_MAGIC} file")
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has format version {version}; this build reads version {CHECKPOINT_VERSION}"
        )
    model = ToyFlowModel(**payload["model_kwargs"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
