"""Synthetic 16-bit electrode radiographs with labelled, injected anomalies.

A clean plate is a coated electrode: detector counts around a per-batch
coating mean with mild shading, pixel noise and a couple of hot pixels.
Anomalies are painted on top with a severity in (0, 1]; a sample is abnormal
exactly when one of its anomalies reaches the severity threshold, so normal
plates may still carry minor defects.

Random streams are split per batch and per sample from ``SeedSequence``
entropy ``(seed, batch_id)`` and ``(seed, batch_id, sample_number)``, which
makes every image independent of generation order.
"""

from __future__ import annotations

import csv
import enum
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IndexFormatError
from .imageio import as_raw16, save_pgm16

COATING_RANGE = (1700, 2800)
BACKGROUND_LEVEL = 26000  # uncoated carrier, well above the coating range
HOT_PIXEL_RANGE = (30000, 60000)

# Batch layout: 12 batches, 714 images, 562 normal / 152 abnormal.  Batch 1
# has 17 images with one normal, batch 3 is the largest (152, all normal) and
# batch 8 has 37 normal out of 38; the remaining sizes are made up to match
# the totals.
REFERENCE_BATCH_SIZES = (17, 45, 152, 60, 40, 85, 70, 38, 55, 30, 72, 50)
REFERENCE_ABNORMAL_COUNTS = (16, 10, 0, 20, 8, 25, 22, 1, 10, 6, 16, 18)


class Label(enum.IntEnum):
    NORMAL = 0
    ABNORMAL = 1

    @property
    def token(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, token: str) -> "Label":
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise IndexFormatError(f"unknown label token {token!r}") from None


class AnomalyKind(enum.Enum):
    SCRATCH = "Scratch"
    LINE = "Line"
    EDGE_CUT = "EdgeCut"
    SMUDGE = "Smudge"
    BUBBLE = "Bubble"
    MISSING_INK = "MissingInk"


ANOMALY_KINDS = tuple(AnomalyKind)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    batch_sizes: tuple[int, ...] = REFERENCE_BATCH_SIZES
    # one fraction for every batch, or one per batch
    abnormal_fraction: float | tuple[float, ...] = tuple(
        a / n for a, n in zip(REFERENCE_ABNORMAL_COUNTS, REFERENCE_BATCH_SIZES)
    )
    image_width: int = 128
    image_height: int = 256
    coating_base: float = 2250.0
    batch_offset: float = 120.0  # per-batch means drawn from base +/- this
    coating_means: tuple[float, ...] | None = None  # explicit per-batch means
    coating_spread: float = 60.0  # pixel noise std; shading amplitude is half of it
    severity_threshold: float = 0.5
    abnormal_severity: tuple[float, float] | None = None  # defaults to (threshold, 1)
    normal_minor_prob: float = 0.3
    normal_severity_max: float = 0.6  # minor severities are below this x threshold
    extra_anomaly_prob: float = 0.3
    anomaly_mix: tuple[float, ...] = (1.0,) * len(ANOMALY_KINDS)
    hot_pixels: int = 2

    def __post_init__(self):
        if not self.batch_sizes or any(int(n) < 1 for n in self.batch_sizes):
            raise ConfigurationError("batch_sizes must be non-empty with every size >= 1")
        fracs = self.fractions
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise ConfigurationError("abnormal_fraction must lie in [0, 1]")
        if self.image_width < 1 or self.image_height < 1:
            raise ConfigurationError("image dimensions must be >= 1")
        if not 0.0 < self.severity_threshold <= 1.0:
            raise ConfigurationError("severity_threshold must lie in (0, 1]")
        lo, hi = self.severity_range
        if not self.severity_threshold <= lo <= hi <= 1.0:
            raise ConfigurationError("abnormal_severity must satisfy threshold <= lo <= hi <= 1")
        if not 0.0 < self.normal_severity_max < 1.0:
            raise ConfigurationError("normal_severity_max must lie in (0, 1)")
        if len(self.anomaly_mix) != len(ANOMALY_KINDS) or min(self.anomaly_mix) < 0 or sum(self.anomaly_mix) <= 0:
            raise ConfigurationError(f"anomaly_mix needs {len(ANOMALY_KINDS)} non-negative weights")
        if self.coating_means is not None and len(self.coating_means) != len(self.batch_sizes):
            raise ConfigurationError("coating_means needs one entry per batch")
        if self.coating_spread < 0:
            raise ConfigurationError("coating_spread must be >= 0")
        # 3 sigma of noise plus shading must stay inside the coating range
        sigma = self.coating_spread * math.sqrt(1 + 0.25 / 3)
        lo_c, hi_c = COATING_RANGE
        for mean in self.batch_means:
            if mean - 3 * sigma < lo_c or mean + 3 * sigma > hi_c:
                raise ConfigurationError(
                    f"coating mean {mean:.1f} with spread {self.coating_spread} leaves the range {COATING_RANGE}"
                )

    @classmethod
    def reference_shaped(cls, **overrides) -> "SynthConfig":
        return cls(**overrides)

    @property
    def fractions(self) -> tuple[float, ...]:
        f = self.abnormal_fraction
        if isinstance(f, (int, float)):
            return (float(f),) * len(self.batch_sizes)
        if len(f) != len(self.batch_sizes):
            raise ConfigurationError("abnormal_fraction needs one entry per batch")
        return tuple(float(v) for v in f)

    @property
    def severity_range(self) -> tuple[float, float]:
        if self.abnormal_severity is None:
            return self.severity_threshold, 1.0
        return tuple(float(v) for v in self.abnormal_severity)

    @property
    def batch_means(self) -> tuple[float, ...]:
        if self.coating_means is not None:
            return tuple(float(m) for m in self.coating_means)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0]))
        offsets = rng.uniform(-self.batch_offset, self.batch_offset, len(self.batch_sizes))
        return tuple(float(self.coating_base + o) for o in offsets)

    def abnormal_counts(self) -> tuple[int, ...]:
        # small epsilon so count/size fractions give back the count exactly
        return tuple(int(math.floor(f * n + 1e-9)) for f, n in zip(self.fractions, self.batch_sizes))


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    batch_id: int
    label: Label
    path: str
    injected: tuple[tuple[AnomalyKind, float], ...] = ()

    @property
    def max_severity(self) -> float:
        return max((s for _, s in self.injected), default=0.0)


@dataclass
class DatasetIndex:
    records: list[SampleRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for rec in self.records:
            if rec.sample_id in seen:
                raise IndexFormatError(f"duplicate sample_id {rec.sample_id!r}")
            seen.add(rec.sample_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def batch_ids(self) -> list[int]:
        return sorted({r.batch_id for r in self.records})

    def image_path(self, rec: SampleRecord) -> Path:
        return self.root / rec.path

    def select(self, batches) -> list[SampleRecord]:
        batches = set(batches)
        return [r for r in self.records if r.batch_id in batches]


# ---------------------------------------------------------------------------
# Image synthesis
# ---------------------------------------------------------------------------


def clean_plate(rng: np.random.Generator, height: int, width: int, mean: float, spread: float,
                hot_pixels: int = 0) -> np.ndarray:
    """A defect-free coated plate."""
    yy, xx = np.mgrid[0:height, 0:width]
    theta = rng.uniform(0, 2 * np.pi)
    # linear shading across the plate, values in [-1, 1]
    ramp = np.cos(theta) * (2 * xx / max(width - 1, 1) - 1) + np.sin(theta) * (2 * yy / max(height - 1, 1) - 1)
    ramp /= max(abs(np.cos(theta)) + abs(np.sin(theta)), 1e-12)
    plate = mean + 0.5 * spread * ramp + rng.normal(0.0, spread, (height, width))
    if hot_pixels:
        idx = rng.integers(0, height * width, hot_pixels)
        plate.flat[idx] = rng.uniform(*HOT_PIXEL_RANGE, hot_pixels)
    return np.clip(np.rint(plate), 0, 65535).astype(np.uint16)


def _disc_mask(h, w, cy, cx, radius):
    yy, xx = np.ogrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 < radius**2


def _scratch(x, s, rng):
    h, w = x.shape
    start = rng.uniform((0, 0), (h, w))
    heading = rng.uniform(0, 2 * np.pi)
    turns = rng.normal(0.0, 0.5, 4)
    # coating scraped off along a thin polyline: counts rise toward background
    length = s * 1.2 * max(h, w)
    radius = 0.5 + 1.5 * s
    seg = length / len(turns)
    pts = [start]
    pos = start.copy()
    for turn in turns:
        heading += turn
        step = np.array([np.sin(heading), np.cos(heading)])
        n = max(int(np.ceil(seg / 0.5)), 1)
        for _ in range(n):
            pos = pos + step * (seg / n)
            pts.append(pos.copy())
    mask = np.zeros((h, w), bool)
    r = int(np.ceil(radius))
    for py, px in pts:
        y0, y1 = max(int(py) - r, 0), min(int(py) + r + 2, h)
        x0, x1 = max(int(px) - r, 0), min(int(px) + r + 2, w)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.ogrid[y0:y1, x0:x1]
        mask[y0:y1, x0:x1] |= (yy - py) ** 2 + (xx - px) ** 2 < radius**2
    x[mask] += s * 0.7 * (BACKGROUND_LEVEL - x[mask])
    return x


def _line(x, s, rng):
    h, w = x.shape
    vertical = rng.random() < 0.5
    pos = rng.uniform(0, 1)
    width = max(1, int(round(1 + 5 * s)))
    n = w if vertical else h
    start = min(int(pos * n), max(n - width, 0))
    # ink streak across the whole plate: denser, darker
    sl = (slice(None), slice(start, start + width)) if vertical else (slice(start, start + width), slice(None))
    x[sl] -= s * 1100.0
    return x


def _edge_cut(x, s, rng):
    h, w = x.shape
    edge = rng.integers(0, 4)
    pos = rng.uniform(0.1, 0.9)
    radius = s * 0.35 * min(h, w)
    cy, cx = [(0, pos * w), (h - 1, pos * w), (pos * h, 0), (pos * h, w - 1)][edge]
    mask = _disc_mask(h, w, cy, cx, radius)
    x[mask] += (0.5 + 0.5 * s) * (BACKGROUND_LEVEL - x[mask])
    return x


def _smudge(x, s, rng):
    h, w = x.shape
    cy, cx = rng.uniform((0.1 * h, 0.1 * w), (0.9 * h, 0.9 * w))
    sign = -1.0 if rng.random() < 0.7 else 1.0
    sigma = (0.03 + 0.12 * s) * min(h, w)
    yy, xx = np.ogrid[0:h, 0:w]
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    x += sign * s * 900.0 * blob
    return x


def _bubble(x, s, rng):
    h, w = x.shape
    cy, cx = rng.uniform((0.05 * h, 0.05 * w), (0.95 * h, 0.95 * w))
    radius = (0.02 + 0.12 * s) * min(h, w)
    yy, xx = np.ogrid[0:h, 0:w]
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    inner = r2 < (0.75 * radius) ** 2
    rim = (r2 < radius**2) & ~inner
    x[inner] += s * 0.8 * (BACKGROUND_LEVEL - x[inner])
    x[rim] -= s * 800.0
    return x


def _missing_ink(x, s, rng):
    h, w = x.shape
    cy, cx = rng.uniform((0.15 * h, 0.15 * w), (0.85 * h, 0.85 * w))
    aspect = rng.uniform(0.6, 1.6)
    noise = rng.normal(0.0, 60.0, x.shape)
    a = s * 0.3 * w * aspect
    b = s * 0.3 * h / aspect
    if a <= 0 or b <= 0:
        return x
    yy, xx = np.ogrid[0:h, 0:w]
    mask = ((yy - cy) / b) ** 2 + ((xx - cx) / a) ** 2 < 1.0
    x[mask] += s * (BACKGROUND_LEVEL - x[mask] + noise[mask])
    return x


_INJECTORS = {
    AnomalyKind.SCRATCH: _scratch,
    AnomalyKind.LINE: _line,
    AnomalyKind.EDGE_CUT: _edge_cut,
    AnomalyKind.SMUDGE: _smudge,
    AnomalyKind.BUBBLE: _bubble,
    AnomalyKind.MISSING_INK: _missing_ink,
}


def inject_anomaly(image, kind: AnomalyKind, severity: float, rng: np.random.Generator) -> np.ndarray:
    """Return a copy of ``image`` with one anomaly painted in.

    Geometry is drawn from ``rng`` independently of ``severity``; severity
    scales both the affected area and the intensity change, so the same
    stream at a higher severity covers a superset of pixels.
    """
    if not 0.0 < severity <= 1.0:
        raise ValueError(f"severity must lie in (0, 1], got {severity}")
    work = as_raw16(image).astype(np.float64)
    work = _INJECTORS[AnomalyKind(kind)](work, float(severity), rng)
    return np.clip(np.rint(work), 0, 65535).astype(np.uint16)


def _draw_anomalies(rng: np.random.Generator, abnormal: bool, cfg: SynthConfig):
    weights = np.asarray(cfg.anomaly_mix, dtype=float)
    weights = weights / weights.sum()
    thr = cfg.severity_threshold
    out = []
    if abnormal:
        lo, hi = cfg.severity_range
        out.append(float(rng.uniform(lo, hi)))
        if rng.random() < cfg.extra_anomaly_prob:
            out.append(float(rng.uniform(0.05, 1.0) * hi))
    elif rng.random() < cfg.normal_minor_prob:
        out.append(float(rng.uniform(0.05, cfg.normal_severity_max) * thr))
    return [(ANOMALY_KINDS[rng.choice(len(ANOMALY_KINDS), p=weights)], s) for s in out]


def _render_sample(cfg: SynthConfig, batch_id: int, number: int, abnormal: bool, mean: float):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, batch_id, number]))
    injected = _draw_anomalies(rng, abnormal, cfg)
    img = clean_plate(rng, cfg.image_height, cfg.image_width, mean, cfg.coating_spread, cfg.hot_pixels)
    for kind, sev in injected:
        img = inject_anomaly(img, kind, sev, rng)
    return img, tuple(injected)


def generate_dataset(config: SynthConfig, root: str | os.PathLike, jobs: int = 1) -> DatasetIndex:
    """Render every sample to ``root/images/*.pgm`` and write ``root/index.csv``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    means = config.batch_means
    counts = config.abnormal_counts()
    tasks = []
    for b, (size, n_abn, mean) in enumerate(zip(config.batch_sizes, counts, means), start=1):
        batch_rng = np.random.default_rng(np.random.SeedSequence([config.seed, b]))
        abnormal = np.zeros(size, bool)
        abnormal[batch_rng.permutation(size)[:n_abn]] = True
        tasks.extend((b, j, bool(abnormal[j]), mean) for j in range(size))

    def work(task):
        b, j, abn, mean = task
        img, injected = _render_sample(config, b, j, abn, mean)
        sid = f"b{b:02d}_{j:04d}"
        rel = f"images/{sid}.pgm"
        save_pgm16(img, root / rel)
        label = Label.ABNORMAL if abn else Label.NORMAL
        return SampleRecord(sid, b, label, rel, injected)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            records = list(pool.map(work, tasks))
    else:
        records = [work(t) for t in tasks]
    index = DatasetIndex(records, root)
    save_index(index, root / "index.csv")
    return index


# ---------------------------------------------------------------------------
# Index CSV
# ---------------------------------------------------------------------------

INDEX_COLUMNS = ["sample_id", "batch_id", "label", "path", "injected"]


def _format_injected(injected) -> str:
    return ";".join(f"{k.value}:{s!r}" for k, s in injected)


def _parse_injected(text: str, line: int):
    out = []
    for part in filter(None, text.split(";")):
        name, _, sev = part.partition(":")
        try:
            out.append((AnomalyKind(name), float(sev)))
        except ValueError:
            raise IndexFormatError(f"line {line}: bad anomaly annotation {part!r}") from None
    return tuple(out)


def save_index(index: DatasetIndex, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INDEX_COLUMNS)
        for r in index.records:
            writer.writerow([r.sample_id, r.batch_id, r.label.token, r.path, _format_injected(r.injected)])


def load_index(path: str | os.PathLike, root: str | os.PathLike | None = None) -> DatasetIndex:
    """Read an index CSV; image paths resolve against ``root`` (default: the CSV's directory)."""
    path = Path(path)
    root = path.parent if root is None else Path(root)
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != INDEX_COLUMNS[:4]:
            raise IndexFormatError(f"index header must start with {','.join(INDEX_COLUMNS[:4])}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) not in (4, 5):
                raise IndexFormatError(f"line {line}: expected 4 or 5 columns, got {len(row)}")
            try:
                batch = int(row[1])
            except ValueError:
                raise IndexFormatError(f"line {line}: batch_id {row[1]!r} is not an integer") from None
            if batch < 1:
                raise IndexFormatError(f"line {line}: batch_id must be >= 1")
            injected = _parse_injected(row[4], line) if len(row) == 5 else ()
            records.append(SampleRecord(row[0], batch, Label.parse(row[2]), row[3], injected))
    return DatasetIndex(records, root)


