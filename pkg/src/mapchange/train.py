"""SGD training, map-substituted inference, the post-classification baseline,
and the fusion ablation harness."""

from __future__ import annotations

import dataclasses
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from . import metrics
from ._fields import format_value, from_items
from .losses import LossBreakdown, combined_loss, cross_entropy_map
from .net import FusionOp, ModelConfig, SegmentationNetwork, TripletNetwork
from .nn import Module
from .scenegen import Dataset, one_hot_encode
from .tensor import Tensor, load_tensor, no_grad, save_tensor

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"


@dataclass
class OptimConfig:
    base_lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    total_iters: int = 1500
    poly_power: float = 0.9
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only
    change_threshold: float = 0.5

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.total_iters <= 0 or self.batch_size <= 0:
            raise ValueError("total_iters and batch_size must be positive")


class NonFiniteLoss(RuntimeError):
    def __init__(self, iteration: int, breakdown: LossBreakdown):
        super().__init__(f"non-finite loss at iteration {iteration}: {breakdown.as_record()}")
        self.iteration = iteration
        self.breakdown = breakdown


def poly_lr(iteration: int, cfg: OptimConfig) -> float:
    if not 0 <= iteration <= cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters}]")
    return cfg.base_lr * (1.0 - iteration / cfg.total_iters) ** cfg.poly_power


@dataclass
class TrainState:
    model: Module
    iteration: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    last: LossBreakdown | None = None

    def __post_init__(self):
        for name, p in self.model.named_parameters().items():
            self.velocity.setdefault(name, np.zeros(p.shape))


def sgd_step(state: TrainState, lr: float, cfg: OptimConfig) -> None:
    """Classical momentum with coupled weight decay, in place:
    g' = g + wd*w; v = mu*v + g'; w = w - lr*v."""
    for name, p in state.model.named_parameters().items():
        v = state.velocity[name]
        if p.grad.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"{name}: gradient {p.grad.shape} / buffer {v.shape} vs parameter {p.shape}")
        g = p.grad + cfg.weight_decay * p.data
        v = cfg.momentum * v + g
        state.velocity[name] = v
        p.data = p.data - lr * v


@lru_cache(maxsize=64)
def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(n: int, batch: int, seed: int, iteration: int) -> np.ndarray:
    """Indices of one batch: consecutive slots of per-epoch seeded permutations."""
    slots = range(iteration * batch, (iteration + 1) * batch)
    return np.array([_epoch_order(n, seed, s // n)[s % n] for s in slots])


# ---------------------------------------------------------------- losses per model kind


def mapchange_batch_loss(model: TripletNetwork, data: Dataset, idx: np.ndarray) -> LossBreakdown:
    k = model.config.num_classes
    out = model(Tensor(data.image_t1[idx]), Tensor(data.image_t2[idx]), Tensor(one_hot_encode(data.map_t1[idx], k)))
    return combined_loss(out, data.gt_t1[idx], data.gt_t2[idx], data.change[idx])


def pcc_batch_loss(model: SegmentationNetwork, data: Dataset, idx: np.ndarray) -> LossBreakdown:
    # pooled pairs: index i < n is (image_t1[i], gt_t1[i]), i >= n is epoch 2
    n = len(data)
    images = np.where((idx < n)[:, None, None, None], data.image_t1[idx % n], data.image_t2[idx % n])
    labels = np.where((idx < n)[:, None, None], data.gt_t1[idx % n], data.gt_t2[idx % n])
    ce = cross_entropy_map(model(Tensor(images)), labels)
    v = ce.item()
    return LossBreakdown(v, 0.0, 0.0, 0.0, 0.0, v, tensor=ce)


# ---------------------------------------------------------------- training loop


def train(
    state: TrainState,
    data: Dataset,
    cfg: OptimConfig,
    log: TextIO | None = None,
    checkpoint_dir: str | Path | None = None,
    stop_at: int | None = None,
) -> TrainState:
    """Run (or resume) training until ``cfg.total_iters`` (or ``stop_at``)."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = state.model
    if isinstance(model, TripletNetwork):
        loss_fn: Callable = mapchange_batch_loss
        pool, batch = len(data), cfg.batch_size
    elif isinstance(model, SegmentationNetwork):
        loss_fn = pcc_batch_loss
        pool, batch = 2 * len(data), 2 * cfg.batch_size  # same images per step as the triplet model
    else:
        raise TypeError(f"cannot train {type(model).__name__}")
    params = model.parameters()
    end = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
    while state.iteration < end:
        it = state.iteration
        lr = poly_lr(it, cfg)
        for p in params:
            p.zero_grad()
        breakdown = loss_fn(model, data, batch_indices(pool, batch, cfg.seed, it))
        if not math.isfinite(breakdown.total):
            raise NonFiniteLoss(it + 1, breakdown)
        breakdown.tensor.backward()
        sgd_step(state, lr, cfg)
        breakdown.tensor = None
        state.iteration = it + 1
        state.last = breakdown
        if log is not None:
            log.write(f"iter={it + 1} lr={lr!r} {breakdown.as_record()}\n")
        if it % 100 == 0:
            logger.info("iter %d lr %.5f total %.4f", it + 1, lr, breakdown.total)
        if checkpoint_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"iter_{state.iteration:06d}", state, cfg)
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "final", state, cfg)
    return state


# ---------------------------------------------------------------- checkpoints


def _model_kind(model: Module) -> str:
    return "pcc" if isinstance(model, SegmentationNetwork) else "mapchange"


def save_checkpoint(path: str | Path, state: TrainState, cfg: OptimConfig | None = None) -> None:
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
    (path / "params").mkdir(parents=True)
    (path / "momentum").mkdir()
    mcfg = state.model.config
    lines = [f"kind={_model_kind(state.model)}", f"iteration={state.iteration}", f"seed={mcfg.seed}"]
    lines += [f"model.{f.name}={format_value(getattr(mcfg, f.name))}" for f in dataclasses.fields(mcfg)]
    if cfg is not None:
        lines += [f"optim.{f.name}={format_value(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    names = []
    for name, p in state.model.named_parameters().items():
        save_tensor(path / "params" / f"{name}.mct", p.data)
        save_tensor(path / "momentum" / f"{name}.mct", state.velocity[name])
        names.append(name)
    lines += [f"param={n}" for n in names]
    (path / MANIFEST).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> dict[str, list[str]]:
    manifest = Path(path) / MANIFEST
    try:
        text = manifest.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"{manifest}: cannot read checkpoint manifest ({exc.strerror})") from None
    out: dict[str, list[str]] = {}
    for line in text.splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out.setdefault(key, []).append(value)
    return out


def load_checkpoint(path: str | Path) -> tuple[TrainState, OptimConfig | None]:
    path = Path(path)
    manifest = read_manifest(path)
    model_fields = {k[6:]: v[0] for k, v in manifest.items() if k.startswith("model.")}
    mcfg = from_items(ModelConfig, model_fields)
    model = SegmentationNetwork(mcfg) if manifest["kind"][0] == "pcc" else TripletNetwork(mcfg)
    optim_fields = {k[6:]: v[0] for k, v in manifest.items() if k.startswith("optim.")}
    ocfg = from_items(OptimConfig, optim_fields) if optim_fields else None
    named = model.named_parameters()
    if sorted(manifest.get("param", [])) != sorted(named):
        raise ValueError(f"{path}: parameter set does not match the model config")
    velocity = {}
    for name, p in named.items():
        value = load_tensor(path / "params" / f"{name}.mct")
        if value.shape != p.shape:
            raise ValueError(f"{path}: {name} has shape {value.shape}, expected {p.shape}")
        p.data = value
        velocity[name] = load_tensor(path / "momentum" / f"{name}.mct")
    state = TrainState(model, int(manifest["iteration"][0]), velocity)
    return state, ocfg


# ---------------------------------------------------------------- inference / evaluation


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


def infer_mapchange(
    model: TripletNetwork,
    image_t1: np.ndarray,
    image_t2: np.ndarray,
    map_t1: np.ndarray,
    threshold: float = 0.5,
    batch_size: int = 8,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (transition category map, change probability, T2 class map).

    Changed pixels (probability strictly above ``threshold``) take their "from"
    class from the historical map and their "to" class from the T2 head; the T1
    head is not used.
    """
    k = model.config.num_classes
    scheme = metrics.TransitionScheme(k)
    probs, classes = [], []
    with no_grad():
        for idx in _batches(len(image_t1), batch_size):
            out = model(Tensor(image_t1[idx]), Tensor(image_t2[idx]), Tensor(one_hot_encode(map_t1[idx], k)))
            probs.append(1.0 / (1.0 + np.exp(-out.change_logits.data[:, 0])))
            classes.append(out.s2_logits.data.argmax(axis=1))
    prob = np.concatenate(probs)
    pred_t2 = np.concatenate(classes)
    return semantic_change_map(scheme, map_t1, pred_t2, prob > threshold), prob, pred_t2


def semantic_change_map(scheme: metrics.TransitionScheme, src, dst, change) -> np.ndarray:
    return np.where(change, scheme.encode(src, dst), metrics.NO_CHANGE)


def pcc_predict(model: SegmentationNetwork, image_t1: np.ndarray, image_t2: np.ndarray, batch_size: int = 8):
    """Independent per-epoch classification; change wherever the two labels differ."""
    out = []
    with no_grad():
        for images in (image_t1, image_t2):
            out.append(
                np.concatenate(
                    [model(Tensor(images[idx])).data.argmax(axis=1) for idx in _batches(len(images), batch_size)]
                )
            )
    pred_t1, pred_t2 = out
    return pred_t1, pred_t2, pred_t1 != pred_t2


def evaluate_maps(data: Dataset, pred_t1, pred_t2, change_pred, num_classes: int, label: str = "") -> metrics.MetricReport:
    """Single metrics path shared by every method."""
    cm = metrics.transitions_from_maps(data.gt_t1, data.gt_t2, pred_t1, pred_t2, change_pred, num_classes)
    rep = metrics.report(cm, label)
    rep.extra["pixels"] = cm.total
    return rep


def evaluate(model: Module, data: Dataset, threshold: float = 0.5, label: str | None = None) -> metrics.MetricReport:
    k = model.config.num_classes
    if data.num_classes_seen > k:
        raise ValueError(f"dataset has class ids >= {k} (model num_classes)")
    if isinstance(model, TripletNetwork):
        _, prob, pred_t2 = infer_mapchange(model, data.image_t1, data.image_t2, data.map_t1, threshold)
        return evaluate_maps(data, data.map_t1, pred_t2, prob > threshold, k, label or "MapChange")
    pred_t1, pred_t2, change = pcc_predict(model, data.image_t1, data.image_t2)
    return evaluate_maps(data, pred_t1, pred_t2, change, k, label or "PCC")


def pcc_baseline(
    train_data: Dataset, test_data: Dataset, model_cfg: ModelConfig, optim: OptimConfig, log: TextIO | None = None
) -> tuple[metrics.MetricReport, TrainState]:
    t0 = time.perf_counter()
    state = train(TrainState(SegmentationNetwork(model_cfg)), train_data, optim, log=log)
    rep = evaluate(state.model, test_data, label="PCC")
    rep.extra["seconds"] = f"{time.perf_counter() - t0:.1f}"
    return rep, state


def train_mapchange(
    train_data: Dataset, test_data: Dataset, model_cfg: ModelConfig, optim: OptimConfig, log: TextIO | None = None
) -> tuple[metrics.MetricReport, TrainState]:
    t0 = time.perf_counter()
    state = train(TrainState(TripletNetwork(model_cfg)), train_data, optim, log=log)
    rep = evaluate(state.model, test_data, optim.change_threshold)
    rep.extra["seconds"] = f"{time.perf_counter() - t0:.1f}"
    return rep, state


ABLATION_ORDER = (FusionOp.TSTADD, FusionOp.ADD, FusionOp.CAT)
ABLATION_LABELS = {FusionOp.TSTADD: "TST-Add", FusionOp.ADD: "Add", FusionOp.CAT: "Cat"}


def ablate_fusion(
    train_data: Dataset, test_data: Dataset, model_cfg: ModelConfig, optim: OptimConfig
) -> list[metrics.MetricReport]:
    """Train and evaluate each fusion variant with the same seed, data and budget."""
    reports = []
    for op in ABLATION_ORDER:
        cfg = dataclasses.replace(model_cfg, fusion_op=op)
        logger.info("ablation: training fusion_op=%s", op.value)
        rep, _ = train_mapchange(train_data, test_data, cfg, optim)
        rep.label = ABLATION_LABELS[op]
        reports.append(rep)
    return reports

