"""Binary netpbm rasters (P6 images, P5 label maps) and the dataset index."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scenegen import GenConfig, Sample

INDEX_NAME = "index.txt"
INDEX_VERSION = 1
RASTER_KEYS = ("t1", "t2", "map", "gt1", "gt2", "chg")


class DataError(ValueError):
    """Malformed or missing dataset file."""


def _write_netpbm(path: Path, magic: bytes, payload: np.ndarray) -> None:
    h, w = payload.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + payload.astype(np.uint8).tobytes())


def _read_netpbm(path: str | Path, magic: bytes) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from None
    if raw[:2] != magic:
        raise DataError(f"{path}: bad magic {raw[:2]!r}, expected {magic!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated or malformed header")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace before the raster
    w, h, maxval = fields
    if maxval != 255 or w <= 0 or h <= 0:
        raise DataError(f"{path}: unsupported header {w}x{h} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = w * h * channels
    data = raw[pos : pos + expected]
    if len(data) != expected:
        raise DataError(f"{path}: raster has {len(data)} bytes, expected {expected} for {w}x{h}")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """(H, W, 3) float in [0, 1] -> P6 with round(v * 255)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    _write_netpbm(Path(path), b"P6", np.round(np.clip(image, 0.0, 1.0) * 255.0))


def read_ppm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P6").astype(np.float64) / 255.0


def write_pgm(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min() < 0 or labels.max() > 255:
        raise ValueError(f"expected 2-D label raster with ids in [0, 255], got {labels.shape}")
    _write_netpbm(Path(path), b"P5", labels)


def read_pgm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P5").copy()


@dataclass
class IndexEntry:
    id: str
    split: str
    files: dict[str, str]


@dataclass
class DatasetIndex:
    entries: list[IndexEntry]
    config: dict[str, str] = field(default_factory=dict)
    version: int = INDEX_VERSION

    def split(self, name: str) -> list[IndexEntry]:
        return [e for e in self.entries if e.split == name]


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def write_sample(root: Path, sample: Sample) -> IndexEntry:
    files = {key: f"{sample.id}_{key}.{'ppm' if key in ('t1', 't2') else 'pgm'}" for key in RASTER_KEYS}
    write_ppm(root / files["t1"], sample.image_t1)
    write_ppm(root / files["t2"], sample.image_t2)
    write_pgm(root / files["map"], sample.map_t1)
    write_pgm(root / files["gt1"], sample.gt_t1)
    write_pgm(root / files["gt2"], sample.gt_t2)
    write_pgm(root / files["chg"], sample.change_mask)
    return IndexEntry(sample.id, sample.split, files)


def write_dataset(root: str | Path, samples: list[Sample], cfg: GenConfig) -> DatasetIndex:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = [write_sample(root, s) for s in samples]
    config = {f.name: _fmt(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    index = DatasetIndex(entries, config)
    write_index(root / INDEX_NAME, index)
    return index


def write_index(path: Path, index: DatasetIndex) -> None:
    lines = [f"format_version={index.version}"]
    lines += [f"gen.{k}={v}" for k, v in index.config.items()]
    for e in index.entries:
        lines.append(" ".join(["sample", e.id, e.split, *(e.files[k] for k in RASTER_KEYS)]))
    path.write_text("\n".join(lines) + "\n")


def read_index(root: str | Path) -> DatasetIndex:
    path = Path(root) / INDEX_NAME
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read dataset index ({exc.strerror})") from None
    entries: list[IndexEntry] = []
    config: dict[str, str] = {}
    version = None
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("sample "):
            parts = line.split()
            if len(parts) != 3 + len(RASTER_KEYS):
                raise DataError(f"{path}:{lineno}: malformed sample line")
            sid, split = parts[1], parts[2]
            if sid in seen:
                raise DataError(f"{path}:{lineno}: duplicate sample id {sid}")
            seen.add(sid)
            entries.append(IndexEntry(sid, split, dict(zip(RASTER_KEYS, parts[3:]))))
        elif "=" in line:
            key, value = line.split("=", 1)
            if key == "format_version":
                version = int(value)
            elif key.startswith("gen."):
                config[key[4:]] = value
        else:
            raise DataError(f"{path}:{lineno}: unrecognized line")
    if version != INDEX_VERSION:
        raise DataError(f"{path}: unsupported format_version {version}")
    return DatasetIndex(entries, config, version)


def load_sample(root: str | Path, entry: IndexEntry) -> Sample:
    root = Path(root)
    for key, name in entry.files.items():
        if not (root / name).is_file():
            raise DataError(f"sample {entry.id}: missing {key} raster {root / name}")
    return Sample(
        id=entry.id,
        image_t1=read_ppm(root / entry.files["t1"]),
        image_t2=read_ppm(root / entry.files["t2"]),
        map_t1=read_pgm(root / entry.files["map"]),
        gt_t1=read_pgm(root / entry.files["gt1"]),
        gt_t2=read_pgm(root / entry.files["gt2"]),
        change_mask=read_pgm(root / entry.files["chg"]),
        split=entry.split,
    )


def load_split(root: str | Path, split: str) -> list[Sample]:
    index = read_index(root)
    return [load_sample(root, e) for e in index.split(split)]


def dataset_num_classes(root: str | Path) -> int:
    index = read_index(root)
    try:
        return int(index.config["num_classes"])
    except (KeyError, ValueError):
        raise DataError(f"{Path(root) / INDEX_NAME}: missing gen.num_classes") from None
