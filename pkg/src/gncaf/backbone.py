"""Segmentation backbone adapter and the assembled context-aware model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .context_agg import (
    GCN,
    ContextMLP,
    PropagationGraph,
    VariantAggregator,
    aggregate_context,
    aggregate_context_variant,
    context_vector,
)
from .encoders import PatchEncoder, PatchEncoderConfig, patches_to_tensor
from .fusion import FusionBlock, select_local_tokens
from .graph import EgoSubgraph

__all__ = [
    "BackboneAdapter",
    "MiniBackbone",
    "ModelConfig",
    "GncafModel",
    "gncaf_forward",
    "predict_class_mask",
]


class BackboneAdapter(nn.Module):
    """Encoder/decoder pair around a token grid of stride ``token_stride``.

    ``encode`` maps ``(B, 3, H, W)`` to ``(B, b*b, L)`` tokens with
    ``b = H / token_stride``; ``decode`` maps tokens back to ``(B, c, H, W)``
    logits.
    """

    token_stride: int
    token_dim: int
    n_classes: int

    def encode(self, patches: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, tokens: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def n_tokens(self, patch_size: int) -> int:
        return (patch_size // self.token_stride) ** 2


class MiniBackbone(BackboneAdapter):
    """Strided conv stem to tokens; per-token linear + pixel shuffle + residual conv to logits."""

    def __init__(self, token_stride: int = 8, token_dim: int = 64, n_classes: int = 4, width: int = 32):
        super().__init__()
        stages = int(round(math.log2(token_stride)))
        if token_stride < 1 or 2**stages != token_stride:
            raise ValueError("token_stride must be a power of two")
        self.token_stride, self.token_dim, self.n_classes = token_stride, token_dim, n_classes
        layers: list[nn.Module] = []
        c_in = 3
        for s in range(stages):
            c_out = token_dim if s == stages - 1 else width
            layers.append(nn.Conv2d(c_in, c_out, 3, stride=2, padding=1))
            if s < stages - 1:
                layers.append(nn.ReLU())
            c_in = c_out
        if stages == 0:
            layers.append(nn.Conv2d(3, token_dim, 1))
        self.stem = nn.Sequential(*layers)
        self.head = nn.Linear(token_dim, token_stride * token_stride * n_classes)
        self.refine = nn.Conv2d(n_classes, n_classes, 3, padding=1, bias=False)

    def encode(self, patches: torch.Tensor) -> torch.Tensor:
        h, w = patches.shape[-2:]
        if h % self.token_stride or w % self.token_stride:
            raise ValueError(f"patch {h}x{w} not divisible by token stride {self.token_stride}")
        return self.stem(patches).flatten(2).transpose(1, 2)

    def decode(self, tokens: torch.Tensor) -> torch.Tensor:
        bsz, t, _ = tokens.shape
        side = math.isqrt(t)
        if side * side != t:
            raise ValueError(f"{t} tokens do not form a square grid")
        y = self.head(tokens).transpose(1, 2).reshape(bsz, -1, side, side)
        y = F.pixel_shuffle(y, self.token_stride)
        return y + self.refine(y)


@dataclass
class ModelConfig:
    patch_size: int = 64
    n_classes: int = 4
    hops: int = 3
    encoder_mode: str = "trainable_cnn"
    encoder_trainable: bool = False
    feature_dim: int = 64
    normalize_features: bool = False
    aggregator: str = "gcn"
    gcn_hidden: int = 128
    gcn_activation: str = "relu"
    aggregator_heads: int = 8
    mlp_hidden: int = 128
    token_stride: int = 8
    token_dim: int = 64
    fusion: str = "msa"
    fusion_layers: int = 1
    fusion_heads: int = 8
    fusion_ffn: bool = False

    def __post_init__(self):
        if self.hops < 0:
            raise ValueError("hops must be non-negative")
        if self.aggregator not in ("gcn", "add", "mean", "msa"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        PatchEncoderConfig(self.encoder_mode, self.feature_dim, self.encoder_trainable)

    def to_dict(self) -> dict:
        return asdict(self)


class GncafModel(nn.Module):
    """Patch encoder -> multi-hop context -> context token fused into backbone tokens -> mask logits."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.encoder = None
        if cfg.encoder_mode == "trainable_cnn":
            self.encoder = PatchEncoder(cfg.feature_dim)
            self.encoder.requires_grad_(cfg.encoder_trainable)
        if cfg.aggregator == "gcn":
            self.gcn = GCN(cfg.feature_dim, [cfg.gcn_hidden] * cfg.hops, cfg.gcn_activation)
            mlp_in = cfg.feature_dim + cfg.gcn_hidden * cfg.hops
        else:
            self.variant = VariantAggregator(cfg.feature_dim, cfg.aggregator, cfg.aggregator_heads)
            mlp_in = 2 * cfg.feature_dim
        self.mlp = ContextMLP(mlp_in, cfg.mlp_hidden, cfg.token_dim)
        self.backbone = MiniBackbone(cfg.token_stride, cfg.token_dim, cfg.n_classes)
        self.fusion = FusionBlock(
            self.backbone.n_tokens(cfg.patch_size),
            cfg.token_dim,
            cfg.fusion,
            cfg.fusion_layers,
            cfg.fusion_heads,
            cfg.fusion_ffn,
        )

    @property
    def hops(self) -> int:
        return self.config.hops

    @property
    def dtype(self) -> torch.dtype:
        return self.mlp.fc1.weight.dtype

    def node_features(self, node_inputs: torch.Tensor) -> torch.Tensor:
        """``X(0)``: encoded patches ``(N, 3, P, P)``, or archive features ``(N, D)`` as given."""
        if self.encoder is None:
            x0 = node_inputs.to(self.dtype)
            if x0.dim() != 2 or x0.shape[1] != self.config.feature_dim:
                raise ValueError(f"expected (N, {self.config.feature_dim}) features, got {tuple(x0.shape)}")
        elif self.config.encoder_trainable:
            x0 = self.encoder(node_inputs)
        else:
            with torch.no_grad():
                x0 = self.encoder(node_inputs)
        if self.config.normalize_features:
            x0 = F.normalize(x0, dim=1)
        return x0

    def context(self, graph: PropagationGraph, x0: torch.Tensor) -> torch.Tensor:
        """Context tokens ``(len(graph.centers), L)``."""
        if graph.radius is not None and graph.radius < self.hops:
            raise ValueError("insufficient context radius")
        if self.config.aggregator == "gcn":
            stack = aggregate_context(graph, x0, self.gcn)
            return context_vector(stack, graph.centers, self.mlp)
        pooled = aggregate_context_variant(graph, x0, self.hops, self.variant)
        return self.mlp(torch.cat([x0[graph.centers], pooled], dim=-1))

    def segment(self, target_patches: torch.Tensor, z_context: torch.Tensor) -> torch.Tensor:
        fused = self.fusion(self.backbone.encode(target_patches), z_context)
        tokens = select_local_tokens(fused) if fused.layout == "fused" else fused.tokens
        return self.backbone.decode(tokens)

    def forward(self, target_patches: torch.Tensor, graph: PropagationGraph, node_inputs: torch.Tensor) -> torch.Tensor:
        z_context = self.context(graph, self.node_features(node_inputs))
        return self.segment(target_patches, z_context)


def _as_batch(x, dtype) -> torch.Tensor:
    if isinstance(x, np.ndarray) and x.dtype == np.uint8:
        return patches_to_tensor(x, dtype)
    return torch.as_tensor(x).to(dtype)


def gncaf_forward(model: GncafModel, target_node: int, ego: EgoSubgraph, node_inputs, target_patch) -> torch.Tensor:
    """Logits ``(c, H, W)`` for one target tile given its ego subgraph.

    ``node_inputs`` holds one row per ego node (local order): uint8 patches
    ``(n, P, P, 3)``, float patches ``(n, 3, P, P)`` or features ``(n, D)``.
    ``target_patch`` is ``(P, P, 3)`` uint8 or ``(3, P, P)`` float.
    """
    if ego.radius < model.hops:
        raise ValueError("insufficient context radius")
    if int(ego.local_to_global[ego.center_local_id]) != int(target_node):
        raise ValueError(f"ego subgraph is not centered at node {target_node}")
    dtype = model.dtype
    pair_hops = model.hops if model.config.aggregator != "gcn" else None
    graph = PropagationGraph.from_egos([ego], pair_hops=pair_hops)
    nodes = _as_batch(node_inputs, dtype)
    if isinstance(target_patch, np.ndarray) and target_patch.dtype == np.uint8:
        target = patches_to_tensor(target_patch[None], dtype)
    else:
        target = torch.as_tensor(target_patch).to(dtype).unsqueeze(0)
    return model(target, graph, nodes)[0]


def predict_class_mask(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    arr = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite logits")
    return np.argmax(arr, axis=-3).astype(np.uint8)
