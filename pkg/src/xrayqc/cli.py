"""Command-line entry point: ``xrayqc <command> [--config FILE] [--key value ...]``.

Settings resolve in increasing precedence: built-in defaults, ``XRAYQC_SEED``
(seed only), the flat ``key=value`` config file, command-line flags.  Every
command writes its outputs plus a ``run-manifest`` into ``--out``; the
manifest is itself a config file, so ``--config OUT/run-manifest`` replays
the run.

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .augment import AugmentConfig
from .convert import ConversionMethod, GlobalBounds, compute_global_bounds, convert
from .errors import ConfigurationError, XrayQCError
from .evaluate import comparison, crossval_lobo, report
from .imageio import image_stats, load_pgm16, save_ppm8, write_stats_csv
from .model import (
    BackboneSpec,
    FeatureExtractor,
    FeatureTable,
    TrainConfig,
    load_features,
    load_params,
    save_params,
    predict_records,
    train,
    write_history,
)
from .synth import ANOMALY_KINDS, DatasetIndex, SampleRecord, Label, SynthConfig, generate_dataset, load_index

log = logging.getLogger("xrayqc")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
MANIFEST = "run-manifest"


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _opt(parse):
    def inner(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return inner


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _key(parse, help: str = ""):
    return dataclasses.field(default=None, metadata={"parse": parse, "help": help})


@dataclass
class RunConfig:
    seed: int = _key(int, "seed for generation, training and augmentation")
    out: str = _key(str, "output directory")
    index: str | None = _key(_opt(str), "dataset index CSV")
    data_root: str | None = _key(_opt(str), "directory image paths resolve against (default: index directory)")
    input: str | None = _key(_opt(str), "single 16-bit PGM input")
    method: int = _key(int, "conversion method 1-4")
    all_methods: bool = _key(_bool, "cross-validate all four methods")
    g_min: int | None = _key(_opt(int), "global lower bound override")
    g_max: int | None = _key(_opt(int), "global upper bound override")
    bounds: str | None = _key(_opt(str), "bounds CSV written by 'bounds' or 'train'")
    train_batches: tuple[int, ...] | None = _key(_opt(_ints), "batches to train on (default: all)")
    epochs: int = _key(int)
    lr0: float = _key(float)
    decay_period: int = _key(int)
    decay_factor: float = _key(float)
    minibatch_size: int = _key(int)
    standardize: bool = _key(_bool, "standardize features while training")
    flip_h_prob: float = _key(float)
    flip_v_prob: float = _key(float)
    target_w: int = _key(int, "resize width")
    target_h: int = _key(int, "resize height")
    backbone_seed: int = _key(int, "seed of the frozen backbone weights")
    params: str | None = _key(_opt(str), "head checkpoint")
    features: str | None = _key(_opt(str), "precomputed feature CSV (replaces the backbone)")
    batches: tuple[int, ...] = _key(_ints, "synthetic batch sizes")
    abnormal_fraction: tuple[float, ...] | None = _key(_opt(_floats), "abnormal fraction, one value or one per batch")
    image_width: int = _key(int)
    image_height: int = _key(int)
    coating_base: float = _key(float)
    batch_offset: float = _key(float)
    coating_spread: float = _key(float)
    severity_threshold: float = _key(float)
    severity_min: float | None = _key(_opt(float), "lowest severity of an abnormal sample's main anomaly")
    anomaly_mix: tuple[float, ...] = _key(_floats, "weights for " + ",".join(k.value for k in ANOMALY_KINDS))
    full_histogram: bool = _key(_bool, "65536-bin histogram in stats")
    jobs: int = _key(int, "worker threads")

    @classmethod
    def defaults(cls) -> "RunConfig":
        t, a, s = TrainConfig(), AugmentConfig(), SynthConfig()
        return cls(
            seed=0, out="out", index=None, data_root=None, input=None, method=2, all_methods=False,
            g_min=None, g_max=None, bounds=None, train_batches=None,
            epochs=t.epochs, lr0=t.lr0, decay_period=t.decay_period, decay_factor=t.decay_factor,
            minibatch_size=t.minibatch_size, standardize=t.standardize,
            flip_h_prob=a.flip_h_prob, flip_v_prob=a.flip_v_prob, target_w=a.target_width, target_h=a.target_height,
            backbone_seed=0, params=None, features=None,
            batches=s.batch_sizes, abnormal_fraction=None, image_width=s.image_width, image_height=s.image_height,
            coating_base=s.coating_base, batch_offset=s.batch_offset, coating_spread=s.coating_spread,
            severity_threshold=s.severity_threshold, severity_min=None, anomaly_mix=s.anomaly_mix,
            full_histogram=False, jobs=1,
        )

    def set(self, key: str, text: str) -> None:
        spec = {f.name: f for f in fields(self)}.get(key)
        if spec is None:
            raise UsageError(f"unknown config key {key!r}")
        try:
            setattr(self, key, spec.metadata["parse"](text))
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None

    def items(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    # builders -------------------------------------------------------------

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr0, self.decay_period, self.decay_factor,
                           self.minibatch_size, self.seed, self.standardize)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.flip_h_prob, self.flip_v_prob, self.target_w, self.target_h, self.seed)

    def synth_config(self) -> SynthConfig:
        frac = self.abnormal_fraction
        if frac is None:
            frac = SynthConfig().abnormal_fraction if self.batches == SynthConfig().batch_sizes else 0.2
        elif len(frac) == 1:
            frac = frac[0]
        sev = None if self.severity_min is None else (self.severity_min, 1.0)
        return SynthConfig(
            seed=self.seed, batch_sizes=self.batches, abnormal_fraction=frac,
            image_width=self.image_width, image_height=self.image_height, coating_base=self.coating_base,
            batch_offset=self.batch_offset, coating_spread=self.coating_spread,
            severity_threshold=self.severity_threshold, abnormal_severity=sev, anomaly_mix=self.anomaly_mix,
        )

    def bounds_override(self) -> GlobalBounds | None:
        if (self.g_min is None) != (self.g_max is None):
            raise UsageError("g_min and g_max must be given together")
        if self.g_min is not None:
            return GlobalBounds(self.g_min, self.g_max)
        if self.bounds is not None:
            return read_bounds(self.bounds)
        return None


def parse_config_file(path: str | os.PathLike) -> list[tuple[str, str]]:
    pairs = []
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        pairs.append((key.strip(), value.strip()))
    return pairs


def write_manifest(command: str, cfg: RunConfig, out: Path) -> None:
    lines = [f"# xrayqc {__version__} run manifest; replay with: xrayqc {command} --config <this file>",
             f"command={command}"]
    lines += [f"{k}={_fmt(v)}" for k, v in cfg.items()]
    (out / MANIFEST).write_text("\n".join(lines) + "\n")


def read_bounds(path: str | os.PathLike) -> GlobalBounds:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or rows[0][:2] != ["g_min", "g_max"]:
        raise UsageError(f"{path}: expected a g_min,g_max CSV")
    return GlobalBounds(int(rows[1][0]), int(rows[1][1]))


def write_bounds(bounds: GlobalBounds, path: Path) -> None:
    path.write_text(f"g_min,g_max\n{bounds.g_min},{bounds.g_max}\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        if getattr(cfg, key) is None:
            raise UsageError(f"missing required setting {key!r}")


def _load_dataset(cfg: RunConfig) -> DatasetIndex:
    _require(cfg, "index")
    return load_index(cfg.index, cfg.data_root)


def _single_index(path: str) -> DatasetIndex:
    p = Path(path).resolve()
    return DatasetIndex([SampleRecord(p.stem, 1, Label.NORMAL, p.name)], p.parent)


def _inputs(cfg: RunConfig) -> DatasetIndex:
    """The dataset named by ``input`` (one image) or ``index``."""
    if cfg.input is not None:
        return _single_index(cfg.input)
    if cfg.index is not None:
        return _load_dataset(cfg)
    raise UsageError("need either 'input' or 'index'")


def _method(cfg: RunConfig, dataset: DatasetIndex | None) -> ConversionMethod:
    if cfg.method not in (1, 2, 3, 4):
        raise UsageError(f"method must be 1-4, got {cfg.method}")
    bounds = None
    if cfg.method in (2, 4):
        bounds = cfg.bounds_override()
        if bounds is None:
            if dataset is None:
                raise UsageError(f"method {cfg.method} needs bounds (g_min/g_max or bounds)")
            bounds = compute_global_bounds(load_pgm16(dataset.image_path(r)) for r in dataset)
    return ConversionMethod.from_number(cfg.method, bounds)


def _extractor(cfg: RunConfig, dataset: DatasetIndex):
    if cfg.features is not None:
        return FeatureTable(load_features(cfg.features, feature_dim=None))
    return FeatureExtractor(dataset, BackboneSpec(cfg.backbone_seed), cfg.augment_config())


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    index = generate_dataset(cfg.synth_config(), out, jobs=cfg.jobs)
    log.info("wrote %d images in %d batches to %s", len(index), len(index.batch_ids), out)
    return EXIT_OK


def cmd_stats(cfg: RunConfig, out: Path) -> int:
    dataset = _inputs(cfg)
    bins = 65536 if cfg.full_histogram else 256
    rows = [(None if cfg.input else r.sample_id, image_stats(load_pgm16(dataset.image_path(r)), bins))
            for r in dataset]
    write_stats_csv(rows, out / "stats.csv")
    return EXIT_OK


def cmd_bounds(cfg: RunConfig, out: Path) -> int:
    dataset = _inputs(cfg)
    recs = dataset.records if cfg.train_batches is None else dataset.select(cfg.train_batches)
    bounds = compute_global_bounds(load_pgm16(dataset.image_path(r)) for r in recs)
    write_bounds(bounds, out / "bounds.csv")
    return EXIT_OK


def cmd_convert(cfg: RunConfig, out: Path) -> int:
    dataset = _inputs(cfg)
    method = _method(cfg, dataset)
    if cfg.input is not None:
        save_ppm8(convert(load_pgm16(cfg.input), method), out / f"{Path(cfg.input).stem}.ppm")
    else:
        (out / "converted").mkdir(exist_ok=True)
        for r in dataset:
            save_ppm8(convert(load_pgm16(dataset.image_path(r)), method), out / "converted" / f"{r.sample_id}.ppm")
    if method.bounds is not None:
        write_bounds(method.bounds, out / "bounds.csv")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    dataset = _load_dataset(cfg)
    batches = cfg.train_batches or dataset.batch_ids
    subset = DatasetIndex(dataset.select(batches), dataset.root)
    method = _method(cfg, subset)
    result = train(dataset, batches, method, cfg.train_config(), cfg.augment_config(),
                   extractor=_extractor(cfg, dataset))
    save_params(result.params, out / "head.ckpt")
    write_history(result.history, out / "history.csv")
    if method.bounds is not None:
        write_bounds(method.bounds, out / "bounds.csv")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, out: Path) -> int:
    _require(cfg, "params")
    params = load_params(cfg.params)
    dataset = _inputs(cfg)
    if cfg.method in (2, 4) and cfg.bounds_override() is None:
        raise UsageError(f"method {cfg.method} needs the training bounds (g_min/g_max or bounds)")
    method = _method(cfg, None)
    preds = predict_records(dataset.records, method, params, _extractor(cfg, dataset))
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "p_normal", "p_abnormal", "label"])
        for r, p in zip(dataset.records, preds):
            w.writerow([r.sample_id, repr(float(p.probs[0])), repr(float(p.probs[1])), p.label.token])
    return EXIT_OK


def cmd_crossval(cfg: RunConfig, out: Path) -> int:
    dataset = _load_dataset(cfg)
    if cfg.method not in (1, 2, 3, 4):
        raise UsageError(f"method must be 1-4, got {cfg.method}")
    methods = (1, 2, 3, 4) if cfg.all_methods else (cfg.method,)
    extractor = _extractor(cfg, dataset)
    reports = []
    for m in methods:
        cv = crossval_lobo(dataset, m, cfg.train_config(), cfg.augment_config(), extractor=extractor, jobs=cfg.jobs)
        report(cv, out / f"report_method{m}.csv")
        with open(out / f"fold_bounds_method{m}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["batch", "g_min", "g_max", "degenerate"])
            for f in cv.folds:
                b = f.bounds
                w.writerow([f.held_out_batch, "" if b is None else b.g_min, "" if b is None else b.g_max,
                            int(f.degenerate)])
        log.info("method %d: combined balanced accuracy %.2f%%", m, 100 * cv.combined_balanced_accuracy)
        reports.append(cv)
    if cfg.all_methods:
        comparison(reports, out / "comparison.csv")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "stats": cmd_stats,
    "bounds": cmd_bounds,
    "convert": cmd_convert,
    "train": cmd_train,
    "predict": cmd_predict,
    "crossval": cmd_crossval,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xrayqc", description="X-ray electrode anomaly detection pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("-v", "--verbose", action="count", default=0)
        for f in fields(RunConfig):
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar="VALUE",
                           help=f.metadata["help"] or None)
    return parser


def resolve_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    cfg = RunConfig.defaults()
    if environ.get("XRAYQC_SEED"):
        cfg.set("seed", environ["XRAYQC_SEED"])
    if args.config:
        try:
            pairs = parse_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        for key, value in pairs:
            if key == "command":
                if value != args.command:
                    raise UsageError(f"config is for command {value!r}, not {args.command!r}")
                continue
            cfg.set(key, value)
    for f in fields(RunConfig):
        value = getattr(args, f.name)
        if value is not None:
            cfg.set(f.name, value)
    for key in ("index", "input", "params", "features", "bounds", "config"):
        path = getattr(cfg, key, None) if key != "config" else args.config
        if path is not None and not Path(path).exists():
            raise UsageError(f"{key} path does not exist: {path}")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        # validate every builder up front, before anything is written
        cfg.train_config()
        cfg.augment_config()
        if args.command == "synth":
            cfg.synth_config()
        if args.command != "synth":
            cfg.bounds_override()
    except UsageError as exc:
        print(f"xrayqc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, ValueError) as exc:
        print(f"xrayqc: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        status = COMMANDS[args.command](cfg, out)
        write_manifest(args.command, cfg, out)
        return status
    except UsageError as exc:
        print(f"xrayqc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (XrayQCError, OSError, KeyError, ValueError) as exc:
        print(f"xrayqc: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
