"""Training, evaluation, metrics and checkpoints."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import GncafModel, ModelConfig, predict_class_mask
from .context_agg import PropagationGraph
from .encoders import patches_to_tensor
from .graph import ContextGraph, EgoSubgraph, build_context_graph, ego_subgraph
from .tiling import SlideImage, TileGrid, compute_foreground_mask, stitch_masks, tile_mask, tile_slide

__all__ = [
    "TrainConfig",
    "SlideRecord",
    "prepare_slide",
    "split_slides",
    "cross_entropy_loss",
    "confusion_matrix",
    "MetricsReport",
    "compute_metrics",
    "mean_reports",
    "predict_record",
    "evaluate",
    "train",
    "DivergenceError",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gncaf-checkpoint"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 5e-5
    epochs: int = 10
    seed: int = 0
    class_weights: list | None = None
    split_ratios: tuple = (0.6, 0.2, 0.2)
    background_ratio: float = 1.0
    metric_scope: str = "all"
    metric_pooling: str = "pooled"
    eval_chunk: int = 64
    calibrate_encoder: bool = True
    encoder_lr_scale: float = 0.01

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must be three values summing to 1")
        if self.metric_scope not in ("all", "tls"):
            raise ValueError(f"unknown metric scope {self.metric_scope!r}")
        if self.metric_pooling not in ("pooled", "per_patch"):
            raise ValueError(f"unknown metric pooling {self.metric_pooling!r}")


# ---------------------------------------------------------------------------
# data


@dataclass
class SlideRecord:
    """One tiled slide: grid, graph, patches and (optionally) labels and features."""

    slide_id: str
    grid: TileGrid
    graph: ContextGraph
    patches: np.ndarray
    labels: np.ndarray | None = None
    tile_masks: np.ndarray | None = None
    features: np.ndarray | None = None
    _egos: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.grid.n_nodes

    def ego(self, node: int, radius: int) -> EgoSubgraph:
        key = (node, radius)
        if key not in self._egos:
            self._egos[key] = ego_subgraph(self.graph, node, radius)
        return self._egos[key]

    def positive_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.tile_masks.reshape(self.n_nodes, -1).any(axis=1))


def prepare_slide(
    slide: SlideImage,
    labels: np.ndarray | None = None,
    patch_size: int = 64,
    threshold_mode: str = "otsu",
    min_tissue_fraction: float = 0.25,
    fixed_threshold: float = 0.1,
    foreground: np.ndarray | None = None,
) -> SlideRecord:
    if foreground is None:
        foreground = compute_foreground_mask(slide, patch_size, threshold_mode, min_tissue_fraction, fixed_threshold)
    grid, patches = tile_slide(slide, foreground, patch_size)
    graph = build_context_graph(grid)
    tile_masks = tile_mask(labels, grid) if labels is not None else None
    return SlideRecord(slide.slide_id, grid, graph, patches, labels, tile_masks)


def split_slides(slide_ids, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[list, list, list]:
    """Seeded slide-level split; every split with a positive ratio gets at least one slide."""
    ids = list(slide_ids)
    n = len(ids)
    if n < 3:
        raise ValueError(f"need at least 3 slides to split, got {n}")
    ratios = np.asarray(ratios, dtype=np.float64)
    exact = ratios * n
    sizes = np.floor(exact).astype(int)
    for k in np.argsort(-(exact - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[k] += 1
    for k in range(3):
        if ratios[k] > 0 and sizes[k] == 0:
            sizes[k] += 1
            sizes[int(np.argmax(sizes))] -= 1
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


# ---------------------------------------------------------------------------
# loss and metrics


def cross_entropy_loss(logits: torch.Tensor, target, class_weights=None) -> torch.Tensor:
    """Mean per-pixel ``-log softmax(logits)[target]``.

    Accepts ``(c, H, W)`` or ``(B, c, H, W)`` logits. With class weights the
    mean is weighted by the target pixel's class weight.
    """
    target = torch.as_tensor(target, dtype=torch.int64)
    if logits.dim() == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    c = logits.shape[1]
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"target shape {tuple(target.shape)} does not match logits {tuple(logits.shape)}")
    if target.numel() and (target.min() < 0 or target.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    weight = None if class_weights is None else torch.as_tensor(class_weights, dtype=logits.dtype)
    return F.cross_entropy(logits, target, weight=weight)


def confusion_matrix(truth, pred, n_classes: int) -> np.ndarray:
    """``cm[g, p]`` = number of pixels with ground truth ``g`` predicted as ``p``."""
    t = np.asarray(truth, dtype=np.int64).ravel()
    p = np.asarray(pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError("truth and prediction sizes differ")
    if t.size and (t.max() >= n_classes or p.max() >= n_classes or min(t.min(), p.min()) < 0):
        raise ValueError(f"label out of range for {n_classes} classes")
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


@dataclass
class MetricsReport:
    precision: list
    recall: list
    f1: list
    iou: list
    mP: float
    mR: float
    mF1: float
    mIoU: float
    scope: str = "all"

    def to_json(self) -> dict:
        """Percentages, as reported in result tables."""
        pct = lambda v: [100.0 * x for x in v]  # noqa: E731
        return {
            "scope": self.scope,
            "mF1": 100.0 * self.mF1,
            "mIoU": 100.0 * self.mIoU,
            "mP": 100.0 * self.mP,
            "mR": 100.0 * self.mR,
            "per_class": {"precision": pct(self.precision), "recall": pct(self.recall), "f1": pct(self.f1), "iou": pct(self.iou)},
        }


def _safe_div(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def compute_metrics(cm, scope: str = "all") -> MetricsReport:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    p = _safe_div(tp, pred_tot)
    r = _safe_div(tp, true_tot)
    f1 = _safe_div(2 * p * r, p + r)
    iou = _safe_div(tp, pred_tot + true_tot - tp)
    if scope == "all":
        sel = slice(None)
    elif scope == "tls":
        sel = slice(1, None)
    else:
        raise ValueError(f"unknown metric scope {scope!r}")
    return MetricsReport(
        p.tolist(), r.tolist(), f1.tolist(), iou.tolist(),
        float(p[sel].mean()), float(r[sel].mean()), float(f1[sel].mean()), float(iou[sel].mean()),
        scope,
    )


def mean_reports(reports: list[MetricsReport], scope: str) -> MetricsReport:
    stack = lambda name: np.mean([getattr(r, name) for r in reports], axis=0)  # noqa: E731
    return MetricsReport(
        stack("precision").tolist(), stack("recall").tolist(), stack("f1").tolist(), stack("iou").tolist(),
        float(stack("mP")), float(stack("mR")), float(stack("mF1")), float(stack("mIoU")), scope,
    )


# ---------------------------------------------------------------------------
# forward over records


def _node_inputs(model: GncafModel, record: SlideRecord, nodes) -> torch.Tensor:
    if model.encoder is None:
        if record.features is None:
            raise ValueError(f"{record.slide_id}: model expects precomputed features")
        return torch.from_numpy(record.features[nodes])
    return patches_to_tensor(record.patches[nodes], model.dtype)


def make_batch(model: GncafModel, records, samples):
    """Collate ``(record index, node)`` samples into one disjoint union of ego subgraphs."""
    egos, inputs, targets, masks = [], [], [], []
    for ri, node in samples:
        rec = records[ri]
        ego = rec.ego(int(node), model.hops)
        egos.append(ego)
        inputs.append(_node_inputs(model, rec, ego.local_to_global))
        targets.append(rec.patches[node])
        masks.append(rec.tile_masks[node])
    pair_hops = model.hops if model.config.aggregator != "gcn" else None
    graph = PropagationGraph.from_egos(egos, pair_hops=pair_hops)
    target = patches_to_tensor(np.stack(targets), model.dtype)
    return target, graph, torch.cat(inputs), torch.from_numpy(np.stack(masks).astype(np.int64))


@torch.no_grad()
def predict_record(model: GncafModel, record: SlideRecord, chunk: int = 64, return_logits: bool = False):
    """Per-tile label masks ``(N, P, P)`` using full-graph propagation."""
    was_training = model.training
    model.eval()
    n = record.n_nodes
    x0 = torch.cat([model.node_features(_node_inputs(model, record, np.arange(i, min(i + chunk, n)))) for i in range(0, n, chunk)])
    pair_hops = model.hops if model.config.aggregator != "gcn" else None
    graph = PropagationGraph.from_graph(record.graph, pair_hops=pair_hops)
    z = model.context(graph, x0)
    masks, logits = [], []
    for i in range(0, n, chunk):
        target = patches_to_tensor(record.patches[i : i + chunk], model.dtype)
        out = model.segment(target, z[i : i + chunk])
        masks.append(predict_class_mask(out))
        if return_logits:
            logits.append(out)
    model.train(was_training)
    tile_pred = np.concatenate(masks) if masks else np.zeros((0,) * 3, dtype=np.uint8)
    if return_logits:
        return tile_pred, torch.cat(logits)
    return tile_pred


def predict_slide_mask(model: GncafModel, record: SlideRecord, chunk: int = 64) -> np.ndarray:
    return stitch_masks(predict_record(model, record, chunk), record.grid)


def evaluate(model: GncafModel, records, scope: str = "all", pooling: str = "pooled", chunk: int = 64) -> MetricsReport:
    """Metrics over every pixel of every slide; non-foreground tiles count as predicted background."""
    records = list(records)
    if not records:
        raise ValueError("empty dataset")
    c = model.config.n_classes
    if pooling == "pooled":
        cm = np.zeros((c, c), dtype=np.int64)
        for rec in records:
            if rec.labels is None:
                raise ValueError(f"{rec.slide_id}: no ground truth")
            cm += confusion_matrix(rec.labels, predict_slide_mask(model, rec, chunk), c)
        return compute_metrics(cm, scope)
    if pooling != "per_patch":
        raise ValueError(f"unknown metric pooling {pooling!r}")
    reports = []
    for rec in records:
        pred = predict_record(model, rec, chunk)
        reports += [compute_metrics(confusion_matrix(t, p, c), scope) for t, p in zip(rec.tile_masks, pred)]
    return mean_reports(reports, scope)


# ---------------------------------------------------------------------------
# training


def _epoch_samples(records, background_ratio: float, rng: np.random.Generator) -> list[tuple[int, int]]:
    samples = []
    for ri, rec in enumerate(records):
        pos = rec.positive_nodes()
        neg = np.setdiff1d(np.arange(rec.n_nodes), pos)
        n_neg = len(neg) if len(pos) == 0 else min(len(neg), int(math.ceil(background_ratio * len(pos))))
        picked = rng.choice(neg, size=n_neg, replace=False) if n_neg else neg[:0]
        samples += [(ri, int(i)) for i in np.concatenate([pos, np.sort(picked)])]
    order = rng.permutation(len(samples))
    return [samples[i] for i in order]


def calibrate_encoder(model: GncafModel, records, rng: np.random.Generator, n_patches: int = 1024) -> None:
    pool = [(ri, i) for ri, rec in enumerate(records) for i in range(rec.n_nodes)]
    pick = rng.choice(len(pool), size=min(n_patches, len(pool)), replace=False)
    patches = np.stack([records[pool[k][0]].patches[pool[k][1]] for k in np.sort(pick)])
    model.encoder.calibrate_(patches_to_tensor(patches, model.dtype))


def train(model: GncafModel, train_records, val_records, config: TrainConfig, progress=None):
    """Adam on per-pixel cross-entropy over ego-subgraph samples.

    Keeps the parameters with the best validation mF1 (last epoch when no
    validation slides are given) and returns ``(best_state, history)``.
    """
    train_records = list(train_records)
    val_records = list(val_records or [])
    if not train_records:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    if model.encoder is not None and config.calibrate_encoder:
        calibrate_encoder(model, train_records, rng)
    enc_ids = {id(p) for p in model.encoder.parameters()} if model.encoder is not None else set()
    groups = [
        {"params": [p for p in model.parameters() if p.requires_grad and id(p) not in enc_ids]},
        {
            "params": [p for p in model.parameters() if p.requires_grad and id(p) in enc_ids],
            "lr": config.learning_rate * config.encoder_lr_scale,
        },
    ]
    optimizer = torch.optim.Adam([g for g in groups if g["params"]], lr=config.learning_rate)
    history = []
    best_state, best_score = None, -np.inf
    for epoch in range(config.epochs):
        model.train()
        samples = _epoch_samples(train_records, config.background_ratio, rng)
        total, count = 0.0, 0
        for start in range(0, len(samples), config.batch_size):
            batch = samples[start : start + config.batch_size]
            target, graph, inputs, masks = make_batch(model, train_records, batch)
            logits = model(target, graph, inputs)
            loss = cross_entropy_loss(logits, masks, config.class_weights)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {start // config.batch_size}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
            count += len(batch)
        record = {"epoch": epoch, "train_loss": total / max(count, 1), "val_mF1": None, "val_mIoU": None}
        score = -record["train_loss"]
        if val_records:
            report = evaluate(model, val_records, config.metric_scope, config.metric_pooling, config.eval_chunk)
            record["val_mF1"] = 100.0 * report.mF1
            record["val_mIoU"] = 100.0 * report.mIoU
            score = report.mF1
        history.append(record)
        log.info("epoch %d loss %.4f val mF1 %s", epoch, record["train_loss"], record["val_mF1"])
        if progress is not None:
            progress(record)
        if score > best_score or not val_records:
            best_score = score
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    return best_state, history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: GncafModel, run_config: dict | None = None, history=None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "run_config": dict(run_config or {}),
        "history": list(history or []),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[GncafModel, dict]:
    """Rebuild the model; returns ``(model, payload)``."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: incompatible checkpoint version {payload.get('version')}")
    model = GncafModel(ModelConfig(**payload["model_config"]))
    sd = payload["state_dict"]
    dtype = next(iter(sd.values())).dtype if sd else torch.float32
    model.to(dtype)
    model.load_state_dict(sd)
    model.eval()
    return model, payload
