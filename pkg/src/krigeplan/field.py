"""Ground-truth fields: sensor-log ingestion, surrogate and synthetic
instances, train/test splits and the RMSE score."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy.ndimage import map_coordinates

from .kriging import KrigingError, SampleSet, fit_samples, predict_map

log = logging.getLogger(__name__)

ATTRIBUTE_COLUMNS = {"temperature": 4, "humidity": 5}
MIN_SURROGATE_MOTES = 10


def check_grid(values) -> np.ndarray:
    """Validate a 2-D field grid (H, W >= 2, all finite) and return it as float64."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ValueError(f"grid must be 2-D with H, W >= 2, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("grid contains non-finite values")
    return arr


@dataclass
class FieldInstance:
    id: str
    truth: np.ndarray
    norm_offset: float = 0.0
    norm_scale: float = 1.0
    source: str = "synthetic"

    def __post_init__(self):
        self.truth = check_grid(self.truth)
        if not self.norm_scale > 0:
            raise ValueError("norm_scale must be positive")
        if self.source not in ("ingested", "synthetic"):
            raise ValueError(f"unknown source {self.source!r}")

    @property
    def shape(self):
        return self.truth.shape

    def denormalized(self) -> np.ndarray:
        return self.truth * self.norm_scale + self.norm_offset

    def to_dict(self) -> dict:
        h, w = self.truth.shape
        return {
            "id": self.id,
            "h": h,
            "w": w,
            "norm_offset": self.norm_offset,
            "norm_scale": self.norm_scale,
            "source": self.source,
            "values": self.truth.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FieldInstance":
        values = np.asarray(d["values"], dtype=float).reshape(d["h"], d["w"])
        return cls(str(d["id"]), values, float(d["norm_offset"]), float(d["norm_scale"]),
                   d.get("source", "synthetic"))


def save_instance(inst: FieldInstance, path) -> Path:
    # json writes floats with repr(), which round-trips float64 exactly
    path = Path(path)
    path.write_text(json.dumps(inst.to_dict()))
    return path


def load_instance(path) -> FieldInstance:
    return FieldInstance.from_dict(json.loads(Path(path).read_text()))


def load_instances(directory) -> list[FieldInstance]:
    return [load_instance(p) for p in sorted(Path(directory).glob("*.json"))]


def normalize(raw: np.ndarray):
    """Min-max normalise to [0, 1]; returns (values, offset, scale)."""
    lo, hi = float(raw.min()), float(raw.max())
    scale = hi - lo
    if not scale > 1e-9 * max(1.0, abs(lo), abs(hi)):
        # constant up to round-off (e.g. kriging a constant field)
        return np.zeros_like(raw, dtype=float), lo, 1.0
    return (raw - lo) / scale, lo, scale


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


# ---------------------------------------------------------------------------
# Sensor logs (Intel Berkeley lab layout)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorReading:
    timestamp: datetime
    mote_id: int
    x: float
    y: float
    value: float
    epoch: int = 0


@dataclass
class IngestStats:
    rows: int = 0
    emitted: int = 0
    dropped: int = 0
    unknown_mote: int = 0


def read_locations(path) -> dict[int, tuple[float, float]]:
    locs = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) < 3:
            continue
        try:
            locs[int(parts[0])] = (float(parts[1]), float(parts[2]))
        except ValueError:
            continue
    return locs


def _parse_time(date: str, time: str) -> datetime:
    for fmt in ("%Y-%m-%d %H:%M:%S.%f", "%Y-%m-%d %H:%M:%S"):
        try:
            return datetime.strptime(f"{date} {time}", fmt)
        except ValueError:
            pass
    raise ValueError(f"bad timestamp {date} {time}")


def ingest_sensor_log(log_path, locations_path, attribute: str = "temperature",
                      stats: IngestStats | None = None) -> Iterator[SensorReading]:
    """Stream readings of one attribute from a whitespace-separated sensor log.

    Rows are ``date time epoch mote_id temperature humidity light voltage``.
    Rows whose attribute is missing or unparseable are dropped; rows from motes
    absent from the locations file are skipped.  Both are tallied in ``stats``.
    Missing files raise immediately, before iteration starts.
    """
    log_path, locations_path = Path(log_path), Path(locations_path)
    if attribute not in ATTRIBUTE_COLUMNS:
        raise ValueError(f"unsupported attribute {attribute!r}")
    for p in (log_path, locations_path):
        if not p.is_file():
            raise FileNotFoundError(p)
    locs = read_locations(locations_path)
    col = ATTRIBUTE_COLUMNS[attribute]
    stats = stats if stats is not None else IngestStats()

    def _stream():
        with open(log_path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                stats.rows += 1
                parts = line.split()
                try:
                    ts = _parse_time(parts[0], parts[1])
                    epoch = int(parts[2])
                    mote = int(parts[3])
                    value = float(parts[col])
                    if not math.isfinite(value):
                        raise ValueError
                except (ValueError, IndexError):
                    stats.dropped += 1
                    continue
                if mote not in locs:
                    stats.unknown_mote += 1
                    continue
                x, y = locs[mote]
                stats.emitted += 1
                yield SensorReading(ts, mote, x, y, value, epoch)
        if stats.unknown_mote:
            log.warning("skipped %d readings from motes without a location", stats.unknown_mote)

    return _stream()


def filter_faulty_sensors(readings: Iterable[SensorReading], validity_range=(0.0, 50.0),
                          max_missing_frac: float = 0.5, n_epochs: int | None = None):
    """Split motes into (kept, dropped) id lists.

    A mote's bad fraction is the share of epochs in which it has no in-range
    reading; motes above ``max_missing_frac`` are dropped.
    """
    lo, hi = validity_range
    if not lo < hi:
        raise ValueError("validity range must satisfy lo < hi")
    good = defaultdict(set)
    seen_motes = set()
    epochs = set()
    for r in readings:
        seen_motes.add(r.mote_id)
        epochs.add(r.epoch)
        if lo < r.value < hi:
            good[r.mote_id].add(r.epoch)
    total = n_epochs if n_epochs is not None else len(epochs)
    kept, dropped = [], []
    for mote in sorted(seen_motes):
        bad = 1.0 - len(good[mote]) / total if total else 1.0
        (dropped if bad > max_missing_frac else kept).append(mote)
    if len(kept) < MIN_SURROGATE_MOTES:
        raise ValueError(f"only {len(kept)} usable sensors; need {MIN_SURROGATE_MOTES}")
    return kept, dropped


def _dedupe(rows: np.ndarray, cols: np.ndarray):
    seen = set()
    cols = cols.copy()
    for i, key in enumerate(zip(rows, cols)):
        if key in seen:
            cols[i] += 0.5
        seen.add((rows[i], cols[i]))
    return cols


def _krige_rows_cols(rows, cols, values, gh, gw):
    samples = SampleSet(tuple(zip(rows, cols)), tuple(values))
    return predict_map(samples, gh, gw, fit_samples(samples)).mean


def build_surrogate_instance(values, coords, out_h: int = 32, out_w: int = 32,
                             cell_size: float = 1.0, instance_id: str = "surrogate",
                             min_motes: int = MIN_SURROGATE_MOTES) -> FieldInstance:
    """Krige mote values over the lab bounding box, resample, normalise.

    The intermediate grid has roughly one cell per ``cell_size`` metres along
    each axis; it is bilinearly resampled to ``out_h x out_w``.
    """
    values = np.asarray(values, dtype=float)
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if len(values) < max(min_motes, 2):
        raise ValueError(f"need at least {min_motes} motes, got {len(values)}")
    if len(values) != len(coords):
        raise ValueError("values and coords differ in length")
    xmin, ymin = coords.min(axis=0)
    xmax, ymax = coords.max(axis=0)
    gw = max(int(round((xmax - xmin) / cell_size)) + 1, 2)
    gh = max(int(round((ymax - ymin) / cell_size)) + 1, 2)
    cols = (coords[:, 0] - xmin) / cell_size
    rows = (coords[:, 1] - ymin) / cell_size

    try:
        inter = _krige_rows_cols(rows, cols, values, gh, gw)
    except (ValueError, KrigingError):
        log.warning("singular surrogate system; nudging duplicate motes by half a cell")
        inter = _krige_rows_cols(rows, _dedupe(rows, cols), values, gh, gw)

    rr = np.linspace(0.0, gh - 1, out_h)
    cc = np.linspace(0.0, gw - 1, out_w)
    grid_r, grid_c = np.meshgrid(rr, cc, indexing="ij")
    raw = map_coordinates(inter, [grid_r, grid_c], order=1, mode="nearest")
    truth, offset, scale = normalize(raw)
    return FieldInstance(instance_id, truth, offset, scale, "ingested")


def snapshot_table(readings: Iterable[SensorReading], kept, validity_range=(0.0, 50.0)):
    """Group in-range readings of kept motes by epoch: {epoch: {mote: (x, y, value)}}."""
    lo, hi = validity_range
    kept = set(kept)
    table = defaultdict(dict)
    for r in readings:
        if r.mote_id in kept and lo < r.value < hi:
            table[r.epoch].setdefault(r.mote_id, (r.x, r.y, r.value))
    return table


def instances_from_readings(readings, n_instances: int, seed: int, min_motes: int = 45,
                            out_h: int = 32, out_w: int = 32, validity_range=(0.0, 50.0),
                            max_missing_frac: float = 0.5) -> list[FieldInstance]:
    """Full ingestion pipeline: filter motes, pick snapshots, build surrogates."""
    readings = list(readings)
    kept, dropped = filter_faulty_sensors(readings, validity_range, max_missing_frac)
    if dropped:
        log.info("dropped faulty motes %s", dropped)
    table = snapshot_table(readings, kept, validity_range)
    eligible = sorted(e for e, motes in table.items() if len(motes) >= min_motes)
    if len(eligible) < n_instances:
        raise ValueError(f"only {len(eligible)} epochs have >= {min_motes} motes reporting")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(eligible, size=n_instances, replace=False).tolist())
    out = []
    for epoch in chosen:
        motes = table[epoch]
        ids = sorted(motes)
        coords = [(motes[m][0], motes[m][1]) for m in ids]
        vals = [motes[m][2] for m in ids]
        out.append(build_surrogate_instance(vals, coords, out_h, out_w, instance_id=f"epoch{epoch:06d}"))
    return out


# ---------------------------------------------------------------------------
# Synthetic fields and splits
# ---------------------------------------------------------------------------

def generate_synthetic_field(seed: int, h: int = 32, w: int = 32, n_bumps: int = 4,
                             length_scale: float = 10.0, instance_id: str | None = None) -> FieldInstance:
    """Sum of Gaussian bumps at random cells with amplitudes in [-1, 1]."""
    if n_bumps < 1:
        raise ValueError("n_bumps must be >= 1")
    if not length_scale > 0:
        raise ValueError("length_scale must be positive")
    rng = np.random.default_rng(seed)
    cr = rng.integers(0, h, size=n_bumps)
    cc = rng.integers(0, w, size=n_bumps)
    amp = rng.uniform(-1.0, 1.0, size=n_bumps)
    rr, gg = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    raw = np.zeros((h, w))
    for a, r0, c0 in zip(amp, cr, cc):
        raw += a * np.exp(-((rr - r0) ** 2 + (gg - c0) ** 2) / (2.0 * length_scale**2))
    truth, offset, scale = normalize(raw)
    return FieldInstance(instance_id or f"syn{seed:06d}", truth, offset, scale, "synthetic")


def synthetic_suite(n: int, seed: int = 0, h: int = 32, w: int = 32, n_bumps: int = 4,
                    length_scale: float | None = None) -> list[FieldInstance]:
    # smooth fields, similar to surrogates kriged from a few dozen motes
    ls = length_scale if length_scale is not None else max(h, w) / 3.2
    return [generate_synthetic_field(seed * 100_003 + i, h, w, n_bumps, ls, f"syn{seed}-{i:04d}")
            for i in range(n)]


@dataclass(frozen=True)
class InstanceSplit:
    train: tuple = field(default_factory=tuple)
    test: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if set(self.train) & set(self.test):
            raise ValueError("train and test sets overlap")

    def to_dict(self):
        return {"train": list(self.train), "test": list(self.test)}


def split_instances(instances, n_train: int = 120, n_test: int = 120, seed: int = 0) -> InstanceSplit:
    """Deterministic shuffled split into disjoint train and test id lists."""
    ids = [i.id if isinstance(i, FieldInstance) else str(i) for i in instances]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate instance ids")
    if n_train < 0 or n_test < 0 or n_train + n_test > len(ids):
        raise ValueError(f"cannot split {len(ids)} instances into {n_train}/{n_test}")
    order = np.random.default_rng(seed).permutation(len(ids))
    picked = [ids[k] for k in order]
    return InstanceSplit(tuple(picked[:n_train]), tuple(picked[n_train:n_train + n_test]))
