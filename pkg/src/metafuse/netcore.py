"""Shared-encoder generator with channel-attention fusion, decoder and discriminator.

The generator encodes every available modality with one set of encoder
weights, then fuses each pyramid level (and the bottleneck) by pooling every
modality's channels, zero-filling the slots of missing modalities, mapping
the concatenated channel statistics to one weight per modality and summing
the weighted features of the modalities that are present.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .masks import as_mask, mask_str, present

CHECKPOINT_VERSION = 1
NUM_REGIONS = 3

FeaturePyramid = list  # [level_1, ..., level_L, bottleneck], each (N, C, D, H, W)
FusedPyramid = list


@dataclass
class NetConfig:
    num_modalities: int = 4
    channels: tuple[int, ...] = (8, 16, 16)
    bottleneck_channels: int = 16
    kernel_size: int = 3
    bias: bool = True
    disc_hidden_mult: int = 4
    use_discriminator: bool = True

    @property
    def levels(self) -> int:
        return len(self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def gap(feature: torch.Tensor) -> torch.Tensor:
    """Global average pooling over the trailing three spatial axes."""
    if feature.dim() < 4 or min(feature.shape[-3:]) == 0:
        raise ValueError(f"gap expects (..., C, D, H, W) with nonempty spatial dims, got {tuple(feature.shape)}")
    return feature.mean(dim=(-3, -2, -1))


def fusion_mlp(num_modalities: int, channels: int, bias: bool = True) -> nn.Sequential:
    width = num_modalities * channels
    return nn.Sequential(nn.Linear(width, width, bias=bias), nn.SiLU(), nn.Linear(width, num_modalities, bias=bias))


def fuse_level(features: Sequence[Optional[torch.Tensor]], mask, mlp, return_weights: bool = False):
    """Fuse one pyramid level.

    ``features`` holds one (N, C, D, H, W) tensor per modality slot, ``None``
    where the modality is missing. Returns the fused tensor, and with
    ``return_weights`` also the zero-imputed channel vector (N, M*C) and the
    per-modality weights (N, M).
    """
    mask = as_mask(mask)
    if len(features) != len(mask):
        raise ValueError(f"{len(features)} feature slots for a {len(mask)}-modality mask")
    avail = present(mask)
    if not avail:
        raise ValueError("cannot fuse an empty modality set")
    for j, (f, bit) in enumerate(zip(features, mask)):
        if (f is not None) != bool(bit):
            raise ValueError(f"feature slot {j} does not match mask {mask_str(mask)}")
    ref = features[avail[0]]
    for j in avail:
        if features[j].shape != ref.shape:
            raise ValueError(f"feature {j} shape {tuple(features[j].shape)} != {tuple(ref.shape)}")

    n, c = ref.shape[:2]
    zeros = ref.new_zeros(n, c)
    gamma = torch.cat([gap(features[j]) if bit else zeros for j, bit in enumerate(mask)], dim=1)
    weights = torch.sigmoid(mlp(gamma))
    fused = sum(weights[:, j].view(n, 1, 1, 1, 1) * features[j] for j in avail)
    if return_weights:
        return fused, gamma, weights
    return fused


def _conv(c_in, c_out, k, bias):
    return nn.Conv3d(c_in, c_out, k, padding=k // 2, bias=bias)


class Generator(nn.Module):
    """Shared per-modality encoder plus per-level fusion modules."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        k, b = cfg.kernel_size, cfg.bias
        c_prev = 1
        self.encoder = nn.ModuleList()
        for c in cfg.channels:
            self.encoder.append(_conv(c_prev, c, k, b))
            c_prev = c
        self.bottleneck = _conv(c_prev, cfg.bottleneck_channels, k, b)
        widths = list(cfg.channels) + [cfg.bottleneck_channels]
        self.fusion = nn.ModuleList(fusion_mlp(cfg.num_modalities, c, b) for c in widths)

    def encode(self, x: torch.Tensor) -> FeaturePyramid:
        stride = 2 ** (self.cfg.levels - 1)
        if any(s % stride for s in x.shape[-3:]):
            raise ValueError(f"spatial dims {tuple(x.shape[-3:])} not divisible by {stride}")
        feats = []
        for i, conv in enumerate(self.encoder):
            if i > 0:
                x = F.max_pool3d(x, 2)
            x = F.silu(conv(x))
            feats.append(x)
        feats.append(F.silu(self.bottleneck(x)))
        return feats

    def forward(self, volumes: Sequence[Optional[torch.Tensor]], mask) -> FusedPyramid:
        mask = as_mask(mask)
        avail = present(mask)
        if not avail:
            raise ValueError("forward_generator needs at least one available modality")
        n = volumes[avail[0]].shape[0]
        # one encoder pass over all present modalities stacked on the batch axis
        stacked = torch.cat([volumes[j] for j in avail], dim=0)
        pyramid = self.encode(stacked)
        fused = []
        for level, mlp in zip(pyramid, self.fusion):
            chunks = level.split(n, dim=0)
            slots: list[Optional[torch.Tensor]] = [None] * len(mask)
            for j, chunk in zip(avail, chunks):
                slots[j] = chunk
            fused.append(fuse_level(slots, mask, mlp))
        return fused


class Decoder(nn.Module):
    """U-Net style decoder over fused levels; three sigmoid region maps."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        k, b = cfg.kernel_size, cfg.bias
        chans = list(cfg.channels)
        blocks = []
        c_below = cfg.bottleneck_channels
        for c in reversed(chans):
            blocks.append(_conv(c_below + c, c, k, b))
            c_below = c
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv3d(chans[0], NUM_REGIONS, 1, bias=b)

    def forward(self, fused: FusedPyramid) -> torch.Tensor:
        if len(fused) != self.cfg.levels + 1:
            raise ValueError(f"decoder expects {self.cfg.levels + 1} fused arrays, got {len(fused)}")
        x = fused[-1]
        for block, skip in zip(self.blocks, reversed(fused[:-1])):
            if x.shape[-3:] != skip.shape[-3:]:
                x = F.interpolate(x, size=skip.shape[-3:], mode="trilinear", align_corners=False)
            x = F.silu(block(torch.cat([x, skip], dim=1)))
        return torch.sigmoid(self.head(x))


class Discriminator(nn.Module):
    """Predicts per-modality presence from the fused bottleneck."""

    calls = 0  # class-wide instrumentation counter

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.bottleneck_channels
        hidden = cfg.disc_hidden_mult * c
        self.cfg = cfg
        self.mlp = nn.Sequential(nn.Linear(c, hidden, bias=cfg.bias), nn.SiLU(), nn.Linear(hidden, cfg.num_modalities, bias=cfg.bias))

    def forward(self, bottleneck: torch.Tensor) -> torch.Tensor:
        if bottleneck.dim() != 5 or bottleneck.shape[1] != self.cfg.bottleneck_channels:
            raise ValueError(
                f"bottleneck must be (N, {self.cfg.bottleneck_channels}, D, H, W), got {tuple(bottleneck.shape)}"
            )
        Discriminator.calls += 1
        return torch.sigmoid(self.mlp(gap(bottleneck)))


class HeteroSegNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.generator = Generator(cfg)
        self.decoder = Decoder(cfg)
        self.discriminator = Discriminator(cfg) if cfg.use_discriminator else None

    def forward(self, volumes, mask) -> torch.Tensor:
        """Inference path: generator then decoder; the discriminator is never touched."""
        return self.decoder(self.generator(volumes, mask))

    def param_groups(self) -> dict[str, dict[str, torch.Tensor]]:
        groups = {
            "generator": dict(self.generator.named_parameters()),
            "decoder": dict(self.decoder.named_parameters()),
        }
        if self.discriminator is not None:
            groups["discriminator"] = dict(self.discriminator.named_parameters())
        return groups


# --- functional helpers used by the meta-learning engine --------------------


def encode_modality(volume: torch.Tensor, generator: Generator) -> FeaturePyramid:
    """Encode one modality volume, (D, H, W) or (N, 1, D, H, W), with the shared encoder."""
    if volume.dim() == 3:
        volume = volume[None, None]
    return generator.encode(volume)


def forward_generator(generator: Generator, volumes, mask, params=None) -> FusedPyramid:
    if params is None:
        return generator(volumes, mask)
    return functional_call(generator, params, (volumes, mask))


def decode(decoder: Decoder, fused: FusedPyramid, params=None) -> torch.Tensor:
    if params is None:
        return decoder(fused)
    return functional_call(decoder, params, (fused,))


def discriminate(discriminator: Discriminator, bottleneck: torch.Tensor, params=None) -> torch.Tensor:
    if params is None:
        return discriminator(bottleneck)
    return functional_call(discriminator, params, (bottleneck,))


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(
    path,
    model: HeteroSegNet,
    *,
    log_alpha: Optional[torch.Tensor],
    step: int,
    config_text: str,
    config_hash: str,
    variant: str,
    optimizer_state: Optional[dict] = None,
) -> None:
    """Write a zip archive: ``manifest.txt``, ``config.ini``, ``params/<name>.npy``."""
    alpha = float(torch.exp(log_alpha).item()) if log_alpha is not None else None
    manifest = (
        f"format_version:{CHECKPOINT_VERSION}\n"
        f"config_hash:{config_hash}\n"
        f"net_config:{json.dumps(model.cfg.to_dict(), sort_keys=True)}\n"
        f"alpha:{'' if alpha is None else repr(alpha)}\n"
        f"step:{step}\n"
        f"variant:{variant}\n"
    )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.txt", manifest)
        zf.writestr("config.ini", config_text)
        tensors = dict(model.state_dict())
        if log_alpha is not None:
            tensors["meta.log_alpha"] = log_alpha.detach()
        for name, t in sorted(tensors.items()):
            buf = io.BytesIO()
            np.save(buf, t.detach().cpu().numpy())
            zf.writestr(f"params/{name}.npy", buf.getvalue())
        if optimizer_state is not None:
            buf = io.BytesIO()
            torch.save(optimizer_state, buf)
            zf.writestr("optimizer.pt", buf.getvalue())
    tmp.replace(path)


@dataclass
class Checkpoint:
    manifest: dict
    config_text: str
    tensors: dict = field(default_factory=dict)
    optimizer_state: Optional[dict] = None

    @property
    def net_config(self) -> NetConfig:
        return NetConfig.from_dict(json.loads(self.manifest["net_config"]))

    @property
    def step(self) -> int:
        return int(self.manifest["step"])

    @property
    def alpha(self) -> Optional[float]:
        v = self.manifest.get("alpha", "")
        return float(v) if v else None

    def build_model(self, dtype=torch.float32) -> HeteroSegNet:
        model = HeteroSegNet(self.net_config).to(dtype)
        state = {k: torch.from_numpy(v).to(dtype) for k, v in self.tensors.items() if not k.startswith("meta.")}
        model.load_state_dict(state)
        return model

    def log_alpha(self, dtype=torch.float32) -> Optional[torch.Tensor]:
        v = self.tensors.get("meta.log_alpha")
        return None if v is None else torch.from_numpy(v).to(dtype)


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        manifest = {}
        for line in zf.read("manifest.txt").decode().splitlines():
            key, _, value = line.partition(":")
            manifest[key] = value
        if int(manifest.get("format_version", -1)) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
        tensors = {}
        for name in zf.namelist():
            if name.startswith("params/"):
                tensors[name[len("params/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(name)))
        opt = None
        if "optimizer.pt" in zf.namelist():
            opt = torch.load(io.BytesIO(zf.read("optimizer.pt")), weights_only=False)
        return Checkpoint(manifest, zf.read("config.ini").decode(), tensors, opt)
