"""Desk-scale benchmark: MapChange vs post-classification comparison, plus the fusion ablation."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import metrics
from .config import RunConfig
from .net import FusionOp
from .rasters import load_split, read_index, write_dataset
from .scenegen import Dataset, generate_dataset
from .train import ABLATION_LABELS, ablate_fusion, pcc_baseline

logger = logging.getLogger(__name__)


@dataclass
class BenchmarkResult:
    mapchange: metrics.MetricReport
    pcc: metrics.MetricReport
    ablation: list[metrics.MetricReport]
    seconds: dict[str, float] = field(default_factory=dict)

    def table(self) -> str:
        return metrics.format_table([self.pcc, self.mapchange], "Model")

    def ablation_table(self) -> str:
        return metrics.format_table(self.ablation, "Method")


def ensure_dataset(cfg: RunConfig, data_dir: str | Path, threads: int = 1) -> Path:
    """Generate the dataset unless an index already exists in ``data_dir``."""
    data_dir = Path(data_dir)
    if not (data_dir / "index.txt").exists():
        write_dataset(data_dir, generate_dataset(cfg.gen, threads), cfg.gen)
    read_index(data_dir)
    return data_dir


def load_splits(data_dir: str | Path) -> tuple[Dataset, Dataset]:
    return Dataset.from_samples(load_split(data_dir, "train")), Dataset.from_samples(load_split(data_dir, "test"))


def run_benchmark(cfg: RunConfig, train_data: Dataset, test_data: Dataset) -> BenchmarkResult:
    """Three fusion variants and the PCC baseline, all with the same seed, data and budget.

    The MapChange row is the ablation run whose fusion op matches ``cfg.model``.
    """
    seconds = {}
    t0 = time.perf_counter()
    ablation = ablate_fusion(train_data, test_data, cfg.model, cfg.optim)
    seconds["ablation"] = time.perf_counter() - t0
    label = ABLATION_LABELS[FusionOp(cfg.model.fusion_op)]
    mapchange = dataclasses.replace(next(r for r in ablation if r.label == label), label="MapChange")

    t0 = time.perf_counter()
    pcc, _ = pcc_baseline(train_data, test_data, cfg.model, cfg.optim)
    seconds["pcc"] = time.perf_counter() - t0
    return BenchmarkResult(mapchange, pcc, ablation, seconds)
