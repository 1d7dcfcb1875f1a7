"""Bearing ingestion, normalisation, FPT detection, labels, padding and windowing."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractViolation, FormatError, IngestionError

DEFAULT_POINTS = 2560
DEFAULT_PERIOD_S = 10.0
PAD_VIBRATION = 1.0
PAD_LABEL = 0.0


@dataclass
class BearingRecord:
    """One bearing's run-to-failure history.

    ``acquisitions`` has shape ``[l, 2, S]`` (horizontal, vertical).
    ``labels`` is the HI curve, one value per acquisition.
    """

    id: str
    acquisitions: np.ndarray
    sample_period_s: float = DEFAULT_PERIOD_S
    labels: np.ndarray | None = None
    fpt_index: int | None = None

    def __post_init__(self) -> None:
        self.acquisitions = np.asarray(self.acquisitions, dtype=np.float64)
        if self.acquisitions.ndim != 3 or self.acquisitions.shape[1] != 2:
            raise ContractViolation(
                f"{self.id}: acquisitions must have shape [l, 2, S], got {list(self.acquisitions.shape)}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape != (len(self),):
                raise ContractViolation(f"{self.id}: {self.labels.size} labels for {len(self)} acquisitions")

    def __len__(self) -> int:
        return self.acquisitions.shape[0]

    @property
    def points(self) -> int:
        return self.acquisitions.shape[2]


# -- ingestion --------------------------------------------------------------

_ACC_RE = re.compile(r"acc_(\d+)\.csv$")


def _parse_acc_file(path: Path, points: int) -> np.ndarray:
    with open(path, newline="") as fh:
        first = fh.readline()
    sep = ";" if ";" in first else ","
    try:
        cols = np.loadtxt(path, delimiter=sep, usecols=(4, 5), max_rows=points, ndmin=2)
    except ValueError:
        # slow path only to locate the bad cell
        with open(path, newline="") as fh:
            for r, row in enumerate(csv.reader(fh, delimiter=sep), start=1):
                if r > points:
                    break
                if len(row) < 6:
                    raise FormatError(f"{path.name}: row {r} has {len(row)} columns, need 6")
                for c in (4, 5):
                    try:
                        float(row[c])
                    except ValueError:
                        raise FormatError(f"{path.name}: non-numeric value {row[c]!r} at row {r}, column {c + 1}")
        raise
    if cols.shape[0] < points:
        raise IngestionError(f"{path.name}: {cols.shape[0]} rows, need {points}")
    return cols.T


def load_phm2012_bearing(directory: str | Path, points: int = DEFAULT_POINTS,
                         sample_period_s: float = DEFAULT_PERIOD_S) -> BearingRecord:
    """Read a PRONOSTIA bearing directory of ``acc_NNNNN.csv`` files.

    Columns 5 and 6 (1-based) hold horizontal and vertical acceleration.
    Acquisitions are ordered by the numeric file index.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"{directory}: not a directory")
    files = []
    for p in directory.iterdir():
        m = _ACC_RE.search(p.name)
        if m:
            files.append((int(m.group(1)), p))
    if not files:
        raise IngestionError(f"{directory}: no acc_NNNNN.csv files")
    files.sort()
    acqs = np.stack([_parse_acc_file(p, points) for _, p in files])
    return BearingRecord(directory.name, acqs, sample_period_s=sample_period_s)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".meta")


def read_metadata(path: str | Path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def write_native_bearing(record: BearingRecord, path: str | Path) -> Path:
    """Write the native CSV (header ``h,v``) plus a ``.meta`` key=value sidecar."""
    path = Path(path)
    rows = record.acquisitions.transpose(0, 2, 1).reshape(-1, 2)
    with open(path, "w", newline="") as fh:
        fh.write("h,v\n")
        np.savetxt(fh, rows, fmt="%.17g", delimiter=",")
    meta = [f"id={record.id}", f"points_per_acquisition={record.points}",
            f"sample_period_s={record.sample_period_s!r}"]
    if record.fpt_index is not None:
        meta.append(f"fpt_index={record.fpt_index}")
    _sidecar(path).write_text("\n".join(meta) + "\n")
    return path


def load_native_bearing(path: str | Path) -> BearingRecord:
    """Read a native bearing CSV and its sidecar.

    When the sidecar carries ``fpt_index`` the piecewise labels are rebuilt.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: no such file")
    side = _sidecar(path)
    meta = read_metadata(side) if side.is_file() else {}
    points = int(meta.get("points_per_acquisition", DEFAULT_POINTS))
    with open(path) as fh:
        header = fh.readline().strip().replace(" ", "")
    if header != "h,v":
        raise FormatError(f"{path}: missing 'h,v' header (got {header!r})")
    try:
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if rows.size == 0 or rows.shape[1] != 2:
        raise FormatError(f"{path}: expected two columns of data")
    if rows.shape[0] % points:
        raise FormatError(f"{path}: {rows.shape[0]} rows is not a multiple of S={points}")
    acqs = rows.reshape(-1, points, 2).transpose(0, 2, 1)
    rec = BearingRecord(meta.get("id", path.stem), acqs,
                        sample_period_s=float(meta.get("sample_period_s", DEFAULT_PERIOD_S)))
    if "fpt_index" in meta:
        rec = make_labels(rec, int(meta["fpt_index"]))
    return rec


# -- preprocessing ----------------------------------------------------------

def normalize(record: BearingRecord) -> BearingRecord:
    """Per-channel z-score over every acquisition of this bearing."""
    x = record.acquisitions
    mu = x.mean(axis=(0, 2), keepdims=True)
    sd = x.std(axis=(0, 2), keepdims=True)
    sd = np.where(sd > 0, sd, 1.0)
    return replace(record, acquisitions=(x - mu) / sd)


@dataclass(frozen=True)
class Fpt3SigmaConfig:
    baseline_count: int = 100
    consecutive_required: int = 2

    def __post_init__(self) -> None:
        if self.baseline_count < 2:
            raise ContractViolation("baseline_count must be >= 2")
        if self.consecutive_required < 1:
            raise ContractViolation("consecutive_required must be >= 1")


def rms_indicator(record: BearingRecord) -> np.ndarray:
    return np.sqrt(np.mean(record.acquisitions ** 2, axis=(1, 2)))


def detect_fpt(record: BearingRecord, config: Fpt3SigmaConfig = Fpt3SigmaConfig()) -> int:
    """First index after the baseline where the RMS stays above mean + 3 sd.

    Returns the last index when no run of ``consecutive_required``
    exceedances is found.
    """
    n = len(record)
    if config.baseline_count >= n:
        raise ContractViolation(f"baseline of {config.baseline_count} needs more than {n} acquisitions")
    ind = rms_indicator(record)
    base = ind[: config.baseline_count]
    threshold = base.mean() + 3.0 * base.std()
    above = ind > threshold
    run = 0
    for i in range(config.baseline_count, n):
        run = run + 1 if above[i] else 0
        if run == config.consecutive_required:
            return i - run + 1
    return n - 1


def make_labels(record: BearingRecord, fpt_index: int) -> BearingRecord:
    """Piecewise HI: 1 up to ``fpt_index``, then linear down to 0 at the last acquisition."""
    n = len(record)
    if not 0 <= fpt_index < n:
        raise ContractViolation(f"fpt_index {fpt_index} outside [0, {n})")
    labels = np.ones(n)
    tail = n - 1 - fpt_index
    if tail > 0:
        labels[fpt_index:] = 1.0 - np.arange(tail + 1) / tail
    labels[-1] = 0.0
    return replace(record, labels=labels, fpt_index=fpt_index)


def fpt_table() -> dict[str, float]:
    """FPT in seconds for the PHM2012 bearings, keyed like ``B1-3``."""
    text = resources.files("arrul").joinpath("data/fpt_table.csv").read_text()
    rows = csv.DictReader(text.splitlines())
    return {r["bearing_id"]: float(r["fpt_seconds"]) for r in rows}


def canonical_bearing_id(name: str) -> str:
    m = re.search(r"(\d+)[-_](\d+)", name)
    if not m:
        raise KeyError(name)
    return f"B{int(m.group(1))}-{int(m.group(2))}"


def lookup_fpt_seconds(bearing_id: str) -> float:
    try:
        return fpt_table()[canonical_bearing_id(bearing_id)]
    except KeyError:
        raise KeyError(f"no tabulated FPT for bearing {bearing_id!r}") from None


# -- padding and windowing --------------------------------------------------

@dataclass
class WindowedBearing:
    """Windows of one bearing after padding, split into ``n`` segments of ``m``.

    Windows are built lazily from the acquisition array. Window ``w`` covers
    acquisitions ``w .. w+k-1`` and its target is the HI at ``w+k``.
    Windows ``w >= length`` are padding: all-ones vibration and label 0.
    """

    id: str
    acquisitions: np.ndarray
    labels: np.ndarray
    k: int
    n: int
    l_f: int
    length: int
    has_labels: bool = True

    @property
    def m(self) -> int:
        return self.l_f // self.n

    @property
    def l_pad(self) -> int:
        return self.l_f - self.length

    @property
    def points(self) -> int:
        return self.acquisitions.shape[2]

    def is_padding(self, w: int) -> bool:
        return w >= self.length

    def window_input(self, w: int) -> np.ndarray:
        if self.is_padding(w):
            return np.full((2 * self.k, self.points), PAD_VIBRATION)
        return self.acquisitions[w: w + self.k].reshape(2 * self.k, self.points)

    def target(self, w: int) -> float:
        return PAD_LABEL if self.is_padding(w) else float(self.labels[w + self.k])

    def label_window(self, w: int) -> np.ndarray:
        if self.is_padding(w):
            return np.full(self.k, PAD_LABEL)
        return self.labels[w: w + self.k].copy()

    def segment_starts(self) -> list[int]:
        return [j * self.m for j in range(self.n)]

    def segment_windows(self, j: int) -> range:
        return range(j * self.m, (j + 1) * self.m)


def padded_length(l: int, k: int, n: int) -> tuple[int, int, int]:
    """Return ``(len, l_f, l_pad)`` with ``l_f`` rounded up to a multiple of LCM(100, n)."""
    if l <= k:
        raise ContractViolation(f"need more acquisitions ({l}) than the window size k={k}")
    if n < 1:
        raise ContractViolation(f"n must be >= 1, got {n}")
    lcm = math.lcm(100, n)
    length = l - k
    l_f = -(-length // lcm) * lcm
    return length, l_f, l_f - length


def pad_and_window(record: BearingRecord, k: int, n: int, l_max: int | None = None) -> WindowedBearing:
    """Pad and segment one bearing.

    ``l_max`` is the longest acquisition count across the bearings that
    will be batched together; it fixes ``l_f`` so they share geometry.
    """
    l = len(record)
    padded_length(l, k, n)  # l > k, n >= 1 for this bearing
    _, l_f, _ = padded_length(max(l, l_max or 0), k, n)
    labels = record.labels if record.labels is not None else np.full(l, np.nan)
    return WindowedBearing(record.id, record.acquisitions, labels, k, n, l_f, l - k,
                           has_labels=record.labels is not None)


def window_bearings(records: Sequence[BearingRecord], k: int, n: int) -> list[WindowedBearing]:
    l_max = max(len(r) for r in records)
    return [pad_and_window(r, k, n, l_max) for r in records]


class Batch(NamedTuple):
    x: np.ndarray              # [B, 2k, S]
    y: np.ndarray              # [B]
    label_windows: np.ndarray  # [B, k]
    is_padding: np.ndarray     # [B] bool


def assemble_batch(datasets: Sequence[WindowedBearing], step: int) -> Batch:
    """Window ``step`` of every segment of every bearing; rows ordered bearing-major."""
    if not datasets:
        raise ContractViolation("assemble_batch needs at least one bearing")
    d0 = datasets[0]
    for d in datasets[1:]:
        if (d.k, d.n, d.m, d.points) != (d0.k, d0.n, d0.m, d0.points):
            raise ContractViolation(f"geometry mismatch between {d0.id} and {d.id}")
    if not 0 <= step < d0.m:
        raise ContractViolation(f"segment step {step} outside [0, {d0.m})")
    xs, ys, lws, pads = [], [], [], []
    for d in datasets:
        for start in d.segment_starts():
            w = start + step
            xs.append(d.window_input(w))
            ys.append(d.target(w))
            lws.append(d.label_window(w))
            pads.append(d.is_padding(w))
    return Batch(np.stack(xs), np.asarray(ys), np.stack(lws), np.asarray(pads, dtype=bool))


def prepare(records: Sequence[BearingRecord], k: int, n: int) -> list[WindowedBearing]:
    """Normalise each bearing, then pad/window them to a shared geometry."""
    return window_bearings([normalize(r) for r in records], k, n)
