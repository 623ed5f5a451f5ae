"""Synthetic 8-lead ECG records with labels known by construction.

Each beat is a sum of Gaussian bumps around an R peak at time ``r`` (ms).  A
bump with width ``s`` is taken to span ``center +/- 3 s``, which fixes every
fiducial point:

* QRS onset ``q = r - qrs/2`` and offset ``r + qrs/2``.  Q and S are narrow
  negative bumps centred ``qrs/3`` before/after R (``s = qrs/18``); R has
  ``s = qrs/12`` and amplitude ``rpa``.
* P onset is ``q - pr``.
* T offset is ``q + qt`` and the T amplitude is ``twa``.

R peaks sit on the sample grid, so lead I (gain 1, no noise) peaks at exactly
``rpa``.  Other leads scale the same template by a fixed gain.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
from scipy.signal import find_peaks

from .data import MODEL_LEADS, EcgRecord, hr_from_rr, write_metadata_csv, write_signal_csv

DEFAULT_GAINS = (1.0, 1.1, -0.4, 0.3, 0.7, 1.0, 0.9, 0.8)

RANGES = {
    "hr_bpm": (50.0, 110.0),
    "pr_ms": (120.0, 200.0),
    "qrs_ms": (70.0, 110.0),
    "qt_ms": (320.0, 440.0),
    "rpa_mv": (0.5, 2.5),
    "twa_mv": (0.1, 0.6),
}
# T and P peaks stay well under the 0.6 x max threshold used for R-peak detection.
MAX_WAVE_TO_R_RATIO = 0.3


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class BeatParams:
    hr_bpm: float
    pr_ms: float
    qrs_ms: float
    qt_ms: float
    rpa_mv: float
    twa_mv: float
    p_sigma_ms: float = 15.0
    t_sigma_ms: float = 30.0
    p_amp_mv: float = 0.15

    @property
    def rr_ms(self) -> float:
        return 60000.0 / self.hr_bpm

    def violations(self) -> list[str]:
        out = []
        if not self.qrs_ms < self.qt_ms:
            out.append("QRS must end before T (qrs < qt)")
        if not self.qt_ms < self.rr_ms:
            out.append(f"qt {self.qt_ms:.1f} ms must be shorter than RR {self.rr_ms:.1f} ms")
        if 6 * self.p_sigma_ms > self.pr_ms:
            out.append("P wave longer than the PR interval")
        if self.qt_ms - 6 * self.t_sigma_ms < self.qrs_ms:
            out.append("T wave overlaps the QRS complex")
        if self.twa_mv > MAX_WAVE_TO_R_RATIO * self.rpa_mv or self.p_amp_mv > MAX_WAVE_TO_R_RATIO * self.rpa_mv:
            out.append("P or T amplitude too close to R amplitude")
        if min(self.hr_bpm, self.pr_ms, self.qrs_ms, self.qt_ms, self.rpa_mv, self.twa_mv) <= 0:
            out.append("all labels must be positive")
        return out

    def labels(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in RANGES}


@dataclass(frozen=True)
class GeneratorConfig:
    n_records: int = 8
    duration_s: float = 10.0
    sample_rate_hz: float = 100.0
    noise_std_mv: float = 0.02
    gains: tuple[float, ...] = DEFAULT_GAINS
    seed: int = 0
    start_time: str = "2024-01-01T08:00:00"
    interval_minutes: float = 60.0

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))

    def validate(self) -> "GeneratorConfig":
        if not math.isclose(self.duration_s * self.sample_rate_hz, self.n_samples, abs_tol=1e-9):
            raise GenerationError("duration_s * sample_rate_hz must be an integer")
        if len(self.gains) != len(MODEL_LEADS) or any(g == 0 for g in self.gains):
            raise GenerationError(f"need {len(MODEL_LEADS)} nonzero lead gains")
        if self.noise_std_mv < 0 or self.n_records < 0:
            raise GenerationError("noise_std_mv and n_records must be non-negative")
        return self


def sample_params(rng: np.random.Generator) -> BeatParams:
    while True:
        draw = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in RANGES.items()}
        p = BeatParams(**draw)
        if not p.violations():
            return p


def _bump(t: np.ndarray, center: float, sigma: float, amp: float) -> np.ndarray:
    return amp * np.exp(-0.5 * ((t - center) / sigma) ** 2)


def beat_template(p: BeatParams, g: GeneratorConfig, phase_samples: int) -> tuple[np.ndarray, dict]:
    """Noise-free single-lead template and the fiducial sample indices of in-window beats."""
    step = 1000.0 / g.sample_rate_hz
    n = g.n_samples
    t = np.arange(n) * step
    rr = p.rr_ms / step  # in samples
    template = np.zeros(n)
    fid = {"r_peak": [], "p_onset": [], "qrs_onset": [], "qrs_offset": [], "t_offset": []}
    k_lo = -int(math.ceil((p.pr_ms + p.qrs_ms) / p.rr_ms)) - 1
    k_hi = int(math.ceil(n / rr)) + 1
    for k in range(k_lo, k_hi + 1):
        r_idx = phase_samples + int(round(k * rr))
        r = r_idx * step
        q_on = r - p.qrs_ms / 2
        template += _bump(t, q_on - p.pr_ms + 3 * p.p_sigma_ms, p.p_sigma_ms, p.p_amp_mv)
        template += _bump(t, r - p.qrs_ms / 3, p.qrs_ms / 18, -0.1 * p.rpa_mv)
        template += _bump(t, r, p.qrs_ms / 12, p.rpa_mv)
        template += _bump(t, r + p.qrs_ms / 3, p.qrs_ms / 18, -0.2 * p.rpa_mv)
        template += _bump(t, q_on + p.qt_ms - 3 * p.t_sigma_ms, p.t_sigma_ms, p.twa_mv)
        if 0 <= r_idx < n:
            fid["r_peak"].append(r_idx)
            fid["p_onset"].append((q_on - p.pr_ms) / step)
            fid["qrs_onset"].append(q_on / step)
            fid["qrs_offset"].append((r + p.qrs_ms / 2) / step)
            fid["t_offset"].append((q_on + p.qt_ms) / step)
    return template, {k: np.round(np.asarray(v, dtype=float)).astype(int) for k, v in fid.items()}


def synth_record(
    p: BeatParams,
    g: GeneratorConfig,
    rng: np.random.Generator,
    record_id: str = "synthetic",
    timestamp: str | None = None,
) -> EcgRecord:
    bad = p.violations()
    if bad:
        raise GenerationError("; ".join(bad))
    g.validate()
    rr_samples = p.rr_ms * g.sample_rate_hz / 1000.0
    phase = int(rng.integers(0, max(1, int(math.floor(rr_samples)))))
    template, fiducials = beat_template(p, g, phase)
    gains = np.asarray(g.gains)[:, None]
    signal = gains * template[None, :]
    if g.noise_std_mv > 0:
        signal = signal + rng.normal(0.0, g.noise_std_mv, size=signal.shape)
    return EcgRecord(
        id=record_id,
        signal=signal.astype(np.float32),
        sample_rate_hz=g.sample_rate_hz,
        timestamp=timestamp,
        labels=p.labels(),
        fiducials=fiducials,
    )


def delineate_r_peaks(record: EcgRecord, lead: int = 0) -> list[int]:
    """Local maxima above 0.6 x the lead's global maximum, at least 200 ms apart."""
    x = np.asarray(record.signal[lead], dtype=np.float64)
    top = float(np.max(x)) if x.size else 0.0
    if not np.all(np.isfinite(x)) or top <= 0:
        return []
    distance = max(1, int(math.ceil(0.2 * record.sample_rate_hz)))
    peaks, _ = find_peaks(x, height=0.6 * top, distance=distance)
    return [int(i) for i in peaks]


def estimate_hr(record: EcgRecord, lead: int = 0) -> float | None:
    """Heart rate from the mean RR interval between the first and last detected peak."""
    peaks = delineate_r_peaks(record, lead)
    if len(peaks) < 2:
        return None
    rr_ms = (peaks[-1] - peaks[0]) / (len(peaks) - 1) * 1000.0 / record.sample_rate_hz
    return hr_from_rr(rr_ms)


@dataclass
class Manifest:
    metadata: str  # relative to the corpus directory
    seed: int
    ids: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def generate_corpus(g: GeneratorConfig, out_dir) -> Manifest:
    """Write ``metadata.csv``, ``signals/<id>.csv`` and ``manifest.json`` under ``out_dir``.

    Record ``i`` draws from a generator seeded with ``(seed, i)``, so records are
    independent of how many are generated.
    """
    g.validate()
    out = Path(out_dir)
    sig_dir = out / "signals"
    try:
        sig_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {sig_dir}: {exc}") from exc
    start = datetime.fromisoformat(g.start_time)
    rows, ids = [], []
    for i in range(g.n_records):
        rng = np.random.default_rng([g.seed, i])
        rid = f"syn{g.seed}_{i:05d}"
        stamp = (start + timedelta(minutes=g.interval_minutes * i)).isoformat()
        rec = synth_record(sample_params(rng), g, rng, rid, stamp)
        rel = f"signals/{rid}.csv"
        try:
            write_signal_csv(out / rel, rec.signal, MODEL_LEADS)
        except OSError as exc:
            raise OSError(f"writing {out / rel}: {exc}") from exc
        row = {"record_id": rid, "signal_path": rel, "sample_rate_hz": repr(g.sample_rate_hz), "timestamp": stamp}
        row.update({k: repr(v) for k, v in rec.labels.items()})
        rows.append(row)
        ids.append(rid)
    write_metadata_csv(out / "metadata.csv", rows)
    cfg = asdict(g)
    cfg["gains"] = list(g.gains)
    manifest = Manifest("metadata.csv", g.seed, ids, cfg)
    manifest.write(out / "manifest.json")
    return manifest
