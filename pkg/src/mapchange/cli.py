"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import colorsys
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .benchmark import ensure_dataset, load_splits, run_benchmark
from .config import RunConfig
from .net import SegmentationNetwork, TripletNetwork
from .rasters import DataError, dataset_num_classes, load_split, read_pgm, read_ppm, write_pgm, write_ppm
from .scenegen import Dataset
from .tensor import save_tensor
from .train import (
    NonFiniteLoss,
    TrainState,
    evaluate,
    infer_mapchange,
    load_checkpoint,
    train,
)

logger = logging.getLogger("mapchange")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def threads() -> int:
    try:
        return max(1, int(os.environ.get("MAPCHANGE_THREADS", "1")))
    except ValueError:
        raise ConfigError("MAPCHANGE_THREADS must be an integer") from None


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.with_seed(args.seed)
    return cfg


def _load_model(path: str):
    try:
        state, _ = load_checkpoint(path)
    except (FileNotFoundError, KeyError) as exc:
        raise DataError(f"{path}: not a readable checkpoint ({exc})") from None
    return state.model


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    if (out / "index.txt").exists():
        raise ConfigError(f"{out}: already contains a dataset")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"{out}: not writable ({exc.strerror})") from None
    ensure_dataset(cfg, out, threads())
    cfg.save(out / "config.ini")
    n = cfg.gen.n_train + cfg.gen.n_val + cfg.gen.n_test
    print(f"wrote {n} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    k = dataset_num_classes(args.data)
    if k != cfg.model.num_classes:
        raise ConfigError(f"model num_classes {cfg.model.num_classes} does not match dataset ({k})")
    data = Dataset.from_samples(load_split(args.data, "train"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    if args.resume:
        state, _ = load_checkpoint(args.resume)
    else:
        model = SegmentationNetwork(cfg.model) if args.mode == "pcc" else TripletNetwork(cfg.model)
        state = TrainState(model)
    with open(out / "train.log", "a" if args.resume else "w") as log:
        train(state, data, cfg.optim, log=log, checkpoint_dir=out / "checkpoints")
    print(f"trained {state.iteration} iterations; checkpoint at {out / 'checkpoints' / 'final'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    kind = "pcc" if isinstance(model, SegmentationNetwork) else "mapchange"
    if kind != args.mode:
        raise ConfigError(f"--mode {args.mode} but {args.checkpoint} holds a {kind} model")
    k = dataset_num_classes(args.data)
    if k != model.config.num_classes:
        raise ConfigError(f"checkpoint has num_classes={model.config.num_classes} but dataset has {k}")
    data = Dataset.from_samples(load_split(args.data, args.split))
    rep = evaluate(model, data, args.threshold)
    text = metrics.format_report([rep], "Model")
    _emit(text, args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    data_dir = ensure_dataset(cfg, args.data, threads()) if args.generate else Path(args.data)
    k = dataset_num_classes(data_dir)
    if k != cfg.model.num_classes:
        raise ConfigError(f"model num_classes {cfg.model.num_classes} does not match dataset ({k})")
    train_data, test_data = load_splits(data_dir)
    result = run_benchmark(cfg, train_data, test_data)
    text = (
        "Fusion ablation\n"
        + metrics.format_table(result.ablation, "Method")
        + "\nMapChange vs PCC\n"
        + result.table()
        + "\n"
        + metrics.format_report(result.ablation + [result.pcc], "Method")
    )
    _emit(text, args.out)
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint)
    if not isinstance(model, TripletNetwork):
        raise ConfigError(f"{args.checkpoint}: predict needs a mapchange checkpoint")
    t1, t2, m = read_ppm(args.t1), read_ppm(args.t2), read_pgm(args.map)
    if not (t1.shape == t2.shape and t1.shape[:2] == m.shape):
        raise DataError(f"inputs are not aligned: {t1.shape}, {t2.shape}, {m.shape}")
    if m.max() >= model.config.num_classes:
        raise DataError(f"{args.map}: class id {m.max()} >= num_classes {model.config.num_classes}")
    d = model.config.downsample
    if t1.shape[0] % d or t1.shape[1] % d:
        raise DataError(f"image size {t1.shape[:2]} not divisible by {d}")
    scm, prob, _ = infer_mapchange(
        model, t1.transpose(2, 0, 1)[None], t2.transpose(2, 0, 1)[None], m[None].astype(np.int64), args.threshold
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "semantic_change.pgm", scm[0])
    write_pgm(out / "change_prob.pgm", np.round(prob[0] * 255).astype(np.uint8))
    save_tensor(out / "change_prob.mct", prob[0])
    print(f"wrote {out / 'semantic_change.pgm'} and {out / 'change_prob.pgm'}")
    return EXIT_OK


NO_CHANGE_GRAY = (128, 128, 128)


def transition_color(num_classes: int, category: int) -> tuple[int, int, int]:
    """Deterministic color of a transition category; gray for no-change."""
    scheme = metrics.TransitionScheme(num_classes)
    scheme.decode(category)  # range check
    if category == metrics.NO_CHANGE:
        return NO_CHANGE_GRAY
    hue = (category - 1) / (scheme.size - 1)
    value = 0.95 if category % 2 else 0.7
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, value)
    return round(r * 255), round(g * 255), round(b * 255)


def render_change_map(pred: np.ndarray, num_classes: int) -> tuple[np.ndarray, list[str]]:
    scheme = metrics.TransitionScheme(num_classes)
    if pred.max() >= scheme.size:
        raise DataError(f"category id {pred.max()} outside the {scheme.size}-category scheme")
    lut = np.array([transition_color(num_classes, c) for c in range(scheme.size)], dtype=np.uint8)
    legend = ["category from to r g b"]
    for c in range(scheme.size):
        pair = scheme.decode(c)
        src, dst = ("-", "-") if pair is None else pair
        legend.append(" ".join(map(str, (c, src, dst, *lut[c]))))
    return lut[pred], legend


def cmd_render(args) -> int:
    pred = read_pgm(args.pred)
    image, legend = render_change_map(pred, args.palette)
    write_ppm(args.out, image / 255.0)
    Path(f"{args.out}.legend.txt").write_text("\n".join(legend) + "\n")
    return EXIT_OK


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mapchange", description="Historical-map assisted semantic change detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a MapChange (or PCC) model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("mapchange", "pcc"), default="mapchange")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("mapchange", "pcc"), default="mapchange")
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="fusion ablation (TST-Add / Add / Cat) and the PCC comparison")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--generate", action="store_true", help="generate the dataset first if missing")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="semantic change map for one image pair + historical map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t1", required=True)
    p.add_argument("--t2", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("render-change-map", help="color a transition-category raster")
    p.add_argument("--pred", required=True)
    p.add_argument("--palette", type=int, required=True, metavar="K", help="number of semantic classes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

if __name__ == "__main__":
    sys.exit(main())
