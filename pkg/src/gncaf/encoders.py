"""Initial node features: a small trainable patch CNN or a frozen feature archive."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

__all__ = [
    "PatchEncoderConfig",
    "PatchEncoder",
    "patches_to_tensor",
    "encode_patches",
    "ArchiveError",
    "NotAFeatureArchive",
    "UnsupportedArchiveVersion",
    "TruncatedArchive",
    "write_feature_archive",
    "load_feature_archive",
]

ENCODER_MODES = ("trainable_cnn", "frozen_archive")


@dataclass
class PatchEncoderConfig:
    mode: str = "trainable_cnn"
    feature_dim: int = 64
    trainable: bool = True

    def __post_init__(self):
        if self.mode not in ENCODER_MODES:
            raise ValueError(f"unknown encoder mode {self.mode!r}")
        if self.mode == "frozen_archive" and self.trainable:
            raise ValueError("frozen_archive features cannot be trainable")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")


class PatchEncoder(nn.Module):
    """Three stride-2 conv stages, global average pool, linear head.

    ReLU keeps the map zero at zero parameters.
    """

    def __init__(self, feature_dim: int = 64, channels=(16, 32, 32)):
        super().__init__()
        layers = []
        c_in = 3
        for c_out in channels:
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.ReLU()]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, feature_dim)
        self.feature_dim = feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return self.head(h.mean(dim=(2, 3)))

    @torch.no_grad()
    def calibrate_(self, x: torch.Tensor, eps: float = 1e-6) -> "PatchEncoder":
        """Data-dependent init: standardize every conv stage, then the head, on ``x``.

        Freshly initialized conv stacks give nearly constant pooled features;
        without this the graph layers see inter-tile differences ~1e-3.
        """
        h = x
        for layer in self.features:
            if isinstance(layer, nn.Conv2d):
                pre = layer(h)
                mean, std = pre.mean(dim=(0, 2, 3)), _scale(pre.std(dim=(0, 2, 3), correction=0), eps)
                layer.weight.div_(std[:, None, None, None])
                layer.bias.sub_(mean).div_(std)
            h = layer(h)
        out = self.head(h.mean(dim=(2, 3)))
        if len(out) < 2:
            return self
        mean, std = out.mean(0), _scale(out.std(0), eps)
        self.head.weight.div_(std[:, None])
        self.head.bias.sub_(mean).div_(std)
        return self


def _scale(std: torch.Tensor, eps: float) -> torch.Tensor:
    # constant channels keep their scale rather than being blown up by 1/eps
    return torch.where(std > eps, std, torch.ones_like(std))


def patches_to_tensor(patches, dtype=torch.float32) -> torch.Tensor:
    """Map uint8 ``(N, P, P, 3)`` rasters to centered ``(N, 3, P, P)`` floats."""
    if isinstance(patches, torch.Tensor):
        if patches.dtype == torch.uint8:
            return (patches.permute(0, 3, 1, 2).to(dtype) / 255.0) - 0.5
        return patches.to(dtype)
    if isinstance(patches, (list, tuple)):
        shapes = {np.shape(p) for p in patches}
        if len(shapes) > 1:
            raise ValueError(f"patch size mismatch: {sorted(shapes)}")
    arr = np.asarray(patches)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"patches must be (N, P, P, 3), got {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr))
    return (t.permute(0, 3, 1, 2).to(dtype) / 255.0) - 0.5


def encode_patches(patches, config: PatchEncoderConfig, encoder: PatchEncoder, chunk: int = 256) -> torch.Tensor:
    if config.mode != "trainable_cnn":
        raise ValueError("frozen_archive features are loaded, not encoded")
    dtype = next(encoder.parameters()).dtype
    x = patches_to_tensor(patches, dtype)
    if len(x) == 0:
        return torch.zeros(0, config.feature_dim, dtype=dtype)
    grad = torch.enable_grad() if config.trainable and torch.is_grad_enabled() else torch.no_grad()
    with grad:
        return torch.cat([encoder(x[i : i + chunk]) for i in range(0, len(x), chunk)])


# ---------------------------------------------------------------------------
# feature archive: "GNCF", u32 version, N, D, rows, cols, N x (row, col),
# N*D float32; little-endian, row-major

MAGIC = b"GNCF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class ArchiveError(ValueError):
    code = "archive_error"


class NotAFeatureArchive(ArchiveError):
    code = "bad_magic"


class UnsupportedArchiveVersion(ArchiveError):
    code = "bad_version"


class TruncatedArchive(ArchiveError):
    code = "truncated"


def write_feature_archive(path, features, coords, grid_shape=(0, 0)) -> None:
    feats = np.asarray(features.detach().cpu() if isinstance(features, torch.Tensor) else features)
    if feats.ndim != 2:
        raise ValueError("features must be an N x D matrix")
    if not np.all(np.isfinite(feats)):
        raise ValueError("features contain non-finite values")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(coords) != len(feats):
        raise ValueError(f"{len(coords)} coords for {len(feats)} feature rows")
    n, d = feats.shape
    rows, cols = grid_shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d, rows, cols))
        fh.write(coords.astype("<u4").tobytes())
        fh.write(feats.astype("<f4").tobytes())


def load_feature_archive(path) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Return ``(features, coords, (rows, cols))`` from an archive file."""
    raw = Path(path).read_bytes()
    if not MAGIC.startswith(raw[:4]) or not raw:
        raise NotAFeatureArchive(f"{path}: not a feature archive")
    if len(raw) < _HEADER.size:
        raise TruncatedArchive(f"{path}: truncated archive")
    _, version, n, d, rows, cols = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise UnsupportedArchiveVersion(f"{path}: unsupported archive version {version}")
    need = _HEADER.size + 8 * n + 4 * n * d
    if len(raw) < need:
        raise TruncatedArchive(f"{path}: truncated archive")
    off = _HEADER.size
    coords = np.frombuffer(raw, dtype="<u4", count=2 * n, offset=off).reshape(n, 2).astype(np.int64)
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off + 8 * n).reshape(n, d).astype(np.float32)
    return feats, coords, (rows, cols)
