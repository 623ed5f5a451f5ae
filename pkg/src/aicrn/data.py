"""ECG record ingestion, lead selection, cleaning, normalization, splitting and batching.

Interchange format
------------------
Metadata CSV (header required)::

    record_id,signal_path,sample_rate_hz,timestamp,pr_ms,qt_ms,qrs_ms,hr_bpm,rpa_mv,twa_mv

An empty cell is a missing label.  ``signal_path`` is relative to the metadata
file.  Each signal CSV has a header row of lead names and one row per sample, in
millivolts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, IngestionError, ShapeError
from .tensor import Tensor

STANDARD_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
MODEL_LEADS = ("I", "II", "V1", "V2", "V3", "V4", "V5", "V6")

# short target name -> label column
TARGETS = {
    "pr": "pr_ms",
    "qt": "qt_ms",
    "qrs": "qrs_ms",
    "hr": "hr_bpm",
    "rpa": "rpa_mv",
    "twa": "twa_mv",
}
LABEL_COLUMNS = tuple(TARGETS.values())
METADATA_COLUMNS = ("record_id", "signal_path", "sample_rate_hz", "timestamp") + LABEL_COLUMNS


@dataclass
class EcgRecord:
    id: str
    signal: np.ndarray  # (n_leads, L) millivolts
    sample_rate_hz: float
    timestamp: str | None = None
    labels: dict[str, float | None] = field(default_factory=dict)
    lead_names: tuple[str, ...] = MODEL_LEADS
    # ground-truth fiducial sample indices, when known (synthetic records)
    fiducials: dict | None = None

    def label(self, target: str) -> float | None:
        return self.labels.get(TARGETS.get(target, target))


def _canonical(name: str) -> str:
    return name.strip().upper()


def select_leads(signal: np.ndarray, lead_names: Sequence[str]) -> np.ndarray:
    """Keep leads I, II, V1-V6 in that order; values are copied, never resampled."""
    if signal.shape[0] != len(lead_names):
        raise IngestionError(f"signal has {signal.shape[0]} rows but {len(lead_names)} lead names")
    index = {_canonical(n): i for i, n in enumerate(lead_names)}
    rows = []
    for lead in MODEL_LEADS:
        i = index.get(_canonical(lead))
        if i is None:
            raise IngestionError(f"missing lead {lead}")
        rows.append(i)
    return signal[rows].copy()


def hr_from_rr(rr_ms: float) -> float:
    if not rr_ms > 0:
        raise ValueError(f"RR interval must be positive, got {rr_ms}")
    return 60000.0 / rr_ms


# ---------------------------------------------------------------------------
# CSV I/O


def _parse_label(cell: str, column: str, record_id: str) -> float | None:
    cell = cell.strip()
    if not cell:
        return None
    try:
        return float(cell)
    except ValueError:
        raise IngestionError(f"record {record_id}: bad {column} value {cell!r}") from None


def read_signal_csv(path) -> tuple[np.ndarray, tuple[str, ...]]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))
            values = np.loadtxt(fh, delimiter=",", dtype=np.float32, ndmin=2)
    except (OSError, StopIteration, ValueError) as exc:
        raise IngestionError(f"{path}: {exc}") from None
    if values.shape[1] != len(header):
        raise IngestionError(f"{path}: {values.shape[1]} columns but {len(header)} lead names")
    return np.ascontiguousarray(values.T), tuple(h.strip() for h in header)


def write_signal_csv(path, signal: np.ndarray, lead_names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(lead_names) + "\n")
        np.savetxt(fh, np.asarray(signal, dtype=np.float32).T, delimiter=",", fmt="%.9g")


def load_records(metadata_csv) -> list[EcgRecord]:
    """Read every record listed in a metadata CSV, reduced to the eight model leads."""
    metadata_csv = Path(metadata_csv)
    base = metadata_csv.parent
    records = []
    try:
        fh = open(metadata_csv, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"{metadata_csv}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        missing = [c for c in METADATA_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestionError(f"{metadata_csv}: missing columns {missing}")
        for row in reader:
            rid = row["record_id"]
            signal, names = read_signal_csv(base / row["signal_path"])
            labels = {c: _parse_label(row[c], c, rid) for c in LABEL_COLUMNS}
            records.append(
                EcgRecord(
                    id=rid,
                    signal=select_leads(signal, names),
                    sample_rate_hz=float(row["sample_rate_hz"]),
                    timestamp=row["timestamp"].strip() or None,
                    labels=labels,
                )
            )
    return records


def write_metadata_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METADATA_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: "" if row.get(c) is None else row[c] for c in METADATA_COLUMNS})


# ---------------------------------------------------------------------------
# cleaning / normalization / splitting


@dataclass
class CleanReport:
    kept: int
    missing_label: int
    non_finite: int

    @property
    def excluded(self) -> int:
        return self.missing_label + self.non_finite


def clean(records: Sequence[EcgRecord], target: str) -> tuple[list[EcgRecord], CleanReport]:
    """Drop records whose target label is missing, non-finite or non-positive, or whose signal is non-finite."""
    if target not in TARGETS:
        raise ConfigError(f"unknown target {target!r}; expected one of {list(TARGETS)}")
    kept, no_label, bad_signal = [], 0, 0
    for rec in records:
        value = rec.label(target)
        if value is None or not math.isfinite(value) or value <= 0:
            no_label += 1
        elif not np.all(np.isfinite(rec.signal)):
            bad_signal += 1
        else:
            kept.append(rec)
    if not kept:
        raise IngestionError(f"no usable records for target {target}")
    return kept, CleanReport(len(kept), no_label, bad_signal)


@dataclass
class NormalizationStats:
    mean: np.ndarray  # per lead, mV
    std: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[EcgRecord]) -> "NormalizationStats":
        if not records:
            raise IngestionError("cannot compute normalization statistics from zero records")
        stacked = np.concatenate([r.signal.astype(np.float64) for r in records], axis=1)
        mean = stacked.mean(axis=1)
        std = stacked.std(axis=1)
        constant = [MODEL_LEADS[i] if len(std) == len(MODEL_LEADS) else str(i) for i in np.flatnonzero(std <= 0)]
        if constant:
            raise IngestionError(f"constant lead {', '.join(constant)}: standard deviation is zero")
        return cls(mean, std)

    @classmethod
    def identity(cls, n_leads: int = len(MODEL_LEADS)) -> "NormalizationStats":
        return cls(np.zeros(n_leads), np.ones(n_leads))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def normalize(records: Sequence[EcgRecord], stats: NormalizationStats) -> list[EcgRecord]:
    if np.any(stats.std <= 0):
        raise IngestionError("constant lead: normalization std must be positive")
    out = []
    for rec in records:
        z = (rec.signal.astype(np.float64) - stats.mean[:, None]) / stats.std[:, None]
        out.append(replace(rec, signal=z.astype(rec.signal.dtype)))
    return out


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0

    def validate(self) -> "SplitSpec":
        ratios = (self.train, self.val, self.test)
        if any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
        return self


def split(records: Sequence[EcgRecord], spec: SplitSpec) -> tuple[list, list, list]:
    """Seeded shuffle, then contiguous partition.

    Train and val sizes are ``floor(ratio * n)``; the remainder goes to the last
    subset with a nonzero ratio.
    """
    spec.validate()
    n = len(records)
    ratios = [spec.train, spec.val, spec.test]
    sizes = [math.floor(r * n + 1e-9) for r in ratios]
    last = max(i for i, r in enumerate(ratios) if r > 0)
    sizes[last] += n - sum(sizes)
    for name, r, size in zip(("train", "val", "test"), ratios, sizes):
        if r > 0 and size == 0:
            raise ConfigError(f"{name} ratio {r} yields an empty subset for {n} records")
    order = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [records[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


# ---------------------------------------------------------------------------
# tensors


@dataclass
class Dataset:
    """Records stacked channel-major: x is (N, 8, L) float32, y is (N,) float32."""

    ids: list[str]
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(cls, records: Sequence[EcgRecord], target: str, input_len: int | None = None) -> "Dataset":
        if not records:
            return cls([], np.zeros((0, len(MODEL_LEADS), input_len or 0), np.float32), np.zeros(0, np.float32))
        lengths = {r.signal.shape[1] for r in records}
        expected = input_len if input_len is not None else next(iter(lengths))
        bad = [r.id for r in records if r.signal.shape[1] != expected]
        if bad:
            raise ShapeError(f"records {bad[:3]} do not have length {expected}")
        x = np.stack([r.signal.astype(np.float32) for r in records])
        y = np.array([r.label(target) if r.label(target) is not None else np.nan for r in records], dtype=np.float32)
        return cls([r.id for r in records], x, y)


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Full batches in order; a final remainder of one sample joins the previous batch."""
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        del bounds[-2]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def batches(data: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[Tensor, Tensor]]:
    order = np.random.default_rng([seed, epoch]).permutation(len(data))
    for sl in batch_slices(len(data), batch_size):
        idx = order[sl]
        yield Tensor(data.x[idx]), Tensor(data.y[idx].reshape(-1, 1))
