"""Run configuration: INI-style ``key = value`` text with one section per component.

All randomness flows from ``[run] seed``; it is copied into the generator,
model and optimizer configs when the file is resolved.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ._fields import from_items, to_items
from .net import ModelConfig
from .scenegen import GenConfig
from .train import OptimConfig

SECTIONS = {"gen": GenConfig, "model": ModelConfig, "optim": OptimConfig}
SEEDED = ("gen", "model", "optim")


@dataclass
class Paths:
    data_dir: str = "data"
    checkpoint_dir: str = "runs/checkpoints"
    report_dir: str = "runs/reports"


@dataclass
class RunConfig:
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        self.with_seed(self.seed)

    def with_seed(self, seed: int) -> "RunConfig":
        self.seed = seed
        for name in SEEDED:
            getattr(self, name).seed = seed
        return self

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser["run"] = {"seed": str(self.seed)}
        for name in (*SECTIONS, "paths"):
            parser[name] = {k: v for k, v in to_items(getattr(self, name)) if k != "seed"}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser[section].items())
            lines.append("")
        return "\n".join(lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ValueError(f"{source}: {exc}") from None
        unknown = set(parser.sections()) - {"run", "paths", *SECTIONS}
        if unknown:
            raise ValueError(f"{source}: unknown sections {sorted(unknown)}")
        seed = int(parser.get("run", "seed", fallback="0"))
        kwargs = {}
        for name, cls_ in SECTIONS.items():
            values = dict(parser[name]) if parser.has_section(name) else {}
            values.pop("seed", None)
            kwargs[name] = from_items(cls_, values, seed=seed)
        paths = from_items(Paths, dict(parser["paths"])) if parser.has_section("paths") else Paths()
        return cls(seed=seed, paths=paths, **kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ValueError(f"{path}: cannot read config ({exc.strerror})") from None
        return cls.from_text(text, str(path))


def benchmark_config(seed: int = 0) -> RunConfig:
    """Desk-scale benchmark: K=5, 64x64 tiles, 200/20/50 split, 1500 iters at batch 8.

    The encoder width is halved from the model default so a CPU run fits in minutes.
    """
    cfg = RunConfig(seed=seed)
    cfg.model = dataclasses.replace(cfg.model, base_channels=8)
    return cfg.with_seed(seed)
