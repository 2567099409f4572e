"""Trial containers, CSV storage and a synthetic EEG generator.

On disk a trial set is a directory holding

* ``manifest.csv`` with header ``trial_id,subject,session,label,path``
  (paths relative to the manifest, empty label for unlabeled trials),
* ``manifest.meta``, ``key = value`` lines (currently ``sample_rate_hz``),
* one headerless CSV per trial: T rows x n_c columns, one time sample per row.
"""

from __future__ import annotations

import csv
import enum
import math
import os
import tempfile
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateId,
    EmptySet,
    InconsistentChannelCount,
    InvalidSpec,
    MalformedRow,
    MissingFile,
    NonFiniteSample,
    TrialIoError,
)

MANIFEST_HEADER = ["trial_id", "subject", "session", "label", "path"]
DEFAULT_SAMPLE_RATE_HZ = 250.0


class Label(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"


class Session(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True, eq=False)
class Trial:
    """One epoch of multichannel EEG, ``data`` shaped (n_c, T)."""

    data: np.ndarray
    sample_rate_hz: float
    label: Label | None
    subject_id: str
    trial_id: str
    session: Session = Session.TRAIN

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise InvalidSpec(f"trial {self.trial_id!r}: data must be a nonempty 2-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteSample(f"trial {self.trial_id!r}: non-finite sample")
        if not self.sample_rate_hz > 0:
            raise InvalidSpec(f"trial {self.trial_id!r}: sample rate must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.label is not None:
            object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "session", Session(self.session))

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray) -> "Trial":
        """Copy of this trial carrying new sample data (metadata kept)."""
        return replace(self, data=data)

    def __eq__(self, other):
        if not isinstance(other, Trial):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
            and self.sample_rate_hz == other.sample_rate_hz
            and self.label == other.label
            and self.subject_id == other.subject_id
            and self.trial_id == other.trial_id
            and self.session == other.session
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TrialSet:
    trials: tuple[Trial, ...]

    def __post_init__(self):
        trials = tuple(self.trials)
        if not trials:
            raise EmptySet("trial set is empty")
        n_c = trials[0].n_channels
        rate = trials[0].sample_rate_hz
        seen = set()
        for t in trials:
            if t.n_channels != n_c:
                raise InconsistentChannelCount(
                    f"trial {t.trial_id!r} has {t.n_channels} channels, expected {n_c}"
                )
            if t.sample_rate_hz != rate:
                raise InvalidSpec(f"trial {t.trial_id!r} has sample rate {t.sample_rate_hz}, expected {rate}")
            if t.trial_id in seen:
                raise DuplicateId(f"duplicate trial_id {t.trial_id!r}")
            seen.add(t.trial_id)
        object.__setattr__(self, "trials", trials)

    @property
    def n_channels(self) -> int:
        return self.trials[0].n_channels

    @property
    def sample_rate_hz(self) -> float:
        return self.trials[0].sample_rate_hz

    @property
    def lengths(self) -> set[int]:
        return {t.n_samples for t in self.trials}

    @property
    def n_samples(self) -> int:
        """Common trial length; raises if trials differ in length."""
        lengths = self.lengths
        if len(lengths) != 1:
            raise InvalidSpec(f"trials differ in length: {sorted(lengths)}")
        return next(iter(lengths))

    @property
    def labels(self) -> list[Label | None]:
        return [t.label for t in self.trials]

    def stack(self) -> np.ndarray:
        """Data of all trials as one (n_trials, n_c, T) array."""
        return np.stack([t.data for t in self.trials])

    def map(self, fn) -> "TrialSet":
        return TrialSet(tuple(fn(t) for t in self.trials))

    def subset(self, indices: Iterable[int]) -> "TrialSet":
        return TrialSet(tuple(self.trials[i] for i in indices))

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def __getitem__(self, i):
        return self.trials[i]

    def __eq__(self, other):
        if not isinstance(other, TrialSet):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self.trials, other.trials))

    __hash__ = None


# ---------------------------------------------------------------------------
# key = value files


def read_keyvalue(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    out: dict[str, str] = {}
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise MissingFile(f"{path}: file not found") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedRow(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise MalformedRow(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# trial CSV


def read_trial_csv(path: str | Path, n_channels: int | None = None) -> np.ndarray:
    """Read a headerless T x n_c CSV and return it transposed to (n_c, T)."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"{path}: trial file not found")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if n_channels is None:
                n_channels = len(fields)
            if len(fields) != n_channels:
                raise MalformedRow(f"{path}:{lineno}: expected {n_channels} values, got {len(fields)}")
            try:
                values = [float(v) for v in fields]
            except ValueError:
                raise MalformedRow(f"{path}:{lineno}: unparseable number") from None
            if not all(math.isfinite(v) for v in values):
                raise NonFiniteSample(f"{path}:{lineno}: non-finite sample")
            rows.append(values)
    if not rows:
        raise MalformedRow(f"{path}: no samples")
    return np.asarray(rows, dtype=np.float64).T


def format_trial_csv(data: np.ndarray) -> str:
    return "".join(",".join(format(v, ".17g") for v in row) + "\n" for row in np.asarray(data).T.tolist())


# ---------------------------------------------------------------------------
# manifests


def load_trialset(manifest_path: str | Path, sample_rate_hz: float | None = None) -> TrialSet:
    """Load the trial set described by a manifest CSV.

    The sample rate comes from ``sample_rate_hz`` if given, else from the
    ``.meta`` sidecar next to the manifest, else 250 Hz.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingFile(f"{manifest_path}: manifest not found")
    if sample_rate_hz is None:
        meta_path = manifest_path.with_suffix(".meta")
        sample_rate_hz = DEFAULT_SAMPLE_RATE_HZ
        if meta_path.is_file():
            meta = read_keyvalue(meta_path)
            if "sample_rate_hz" in meta:
                sample_rate_hz = float(meta["sample_rate_hz"])

    base = manifest_path.parent
    trials = []
    n_c = None
    with open(manifest_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise MalformedRow(f"{manifest_path}:1: header must be {','.join(MANIFEST_HEADER)}")
        for row in reader:
            lineno = reader.line_num
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise MalformedRow(f"{manifest_path}:{lineno}: expected 5 fields, got {len(row)}")
            trial_id, subject, session, label, rel = (f.strip() for f in row)
            try:
                session_v = Session(session.lower())
                label_v = Label(label.lower()) if label else None
            except ValueError as exc:
                raise MalformedRow(f"{manifest_path}:{lineno}: {exc}") from None
            trial_path = base / rel
            if not trial_path.is_file():
                raise MissingFile(f"{manifest_path}:{lineno}: trial file {trial_path} not found")
            data = read_trial_csv(trial_path)
            if n_c is None:
                n_c = data.shape[0]
            elif data.shape[0] != n_c:
                raise InconsistentChannelCount(
                    f"{trial_path}:1: {data.shape[0]} channels, expected {n_c} (from first trial)"
                )
            if any(t.trial_id == trial_id for t in trials):
                raise DuplicateId(f"{manifest_path}:{lineno}: duplicate trial_id {trial_id!r}")
            trials.append(Trial(data, sample_rate_hz, label_v, subject, trial_id, session_v))
    if not trials:
        raise EmptySet(f"{manifest_path}: manifest lists no trials")
    return TrialSet(tuple(trials))


def _safe_filename(trial_id: str) -> str:
    stem = "".join(c if c.isalnum() or c in "-_." else "_" for c in trial_id)
    return f"{stem}-{zlib.crc32(trial_id.encode()):08x}.csv"


def save_trialset(trialset: TrialSet | Sequence[Trial], directory: str | Path) -> Path:
    """Write trials and manifest into ``directory``; returns the manifest path."""
    if not isinstance(trialset, TrialSet):
        trialset = TrialSet(tuple(trialset))
    directory = Path(directory)
    try:
        (directory / "trials").mkdir(parents=True, exist_ok=True)
        lines = [",".join(MANIFEST_HEADER) + "\n"]
        for t in trialset:
            rel = f"trials/{_safe_filename(t.trial_id)}"
            atomic_write_text(directory / rel, format_trial_csv(t.data))
            label = t.label.value if t.label is not None else ""
            lines.append(_csv_line([t.trial_id, t.subject_id, t.session.value, label, rel]))
        manifest = directory / "manifest.csv"
        atomic_write_text(manifest.with_suffix(".meta"), f"sample_rate_hz = {trialset.sample_rate_hz!r}\n")
        atomic_write_text(manifest, "".join(lines))
    except OSError as exc:
        raise TrialIoError(f"{directory}: {exc}") from exc
    return manifest


def _csv_line(fields: list[str]) -> str:
    import io

    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(fields)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic motor-imagery generator.

    Each trial is white Gaussian noise (unit variance per channel) plus,
    inside every salient interval, a narrowband sinusoid whose frequency is
    drawn from the class band and whose per-channel amplitude pattern
    depends on the class. ``snr_db`` sets the planted power relative to the
    in-interval noise power. ``remainder_gain_db`` scales the noise outside
    the salient intervals. ``distractor_db``, when set, adds class-independent
    narrowband activity outside the salient intervals: one sinusoid per
    trial, frequency drawn from ``distractor_band_hz``, random spatial
    pattern, power relative to the unit noise. With ``distractor_mimics_class``
    the distractor instead copies the band and spatial pattern of a class
    picked by a fair coin, independently of the trial's own label.
    """

    n_c: int = 22
    T: int = 1000
    trials_per_class: int = 20
    salient_start: int = 250
    salient_len: int = 500
    class_band_hz: tuple[tuple[float, float], tuple[float, float]] = ((9.0, 11.0), (19.0, 23.0))
    snr_db: float = 0.0
    seed: int = 0
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    intervals: tuple[tuple[int, int], ...] | None = None
    remainder_gain_db: float = 0.0
    distractor_db: float | None = None
    distractor_band_hz: tuple[float, float] = (8.0, 24.0)
    distractor_mimics_class: bool = False
    subject_id: str = "synth"
    session: Session = Session.TRAIN

    def planted_intervals(self) -> tuple[tuple[int, int], ...]:
        """Planted ``(start, length)`` pairs."""
        if self.intervals is not None:
            return tuple((int(s), int(n)) for s, n in self.intervals)
        return ((self.salient_start, self.salient_len),)

    def salient_mask(self) -> np.ndarray:
        mask = np.zeros(self.T, dtype=bool)
        for start, length in self.planted_intervals():
            mask[start:start + length] = True
        return mask

    def validate(self) -> None:
        if self.n_c < 1 or self.T < 1:
            raise InvalidSpec("n_c and T must be >= 1")
        if self.trials_per_class < 1:
            raise InvalidSpec("trials_per_class must be >= 1")
        if not self.sample_rate_hz > 0:
            raise InvalidSpec("sample_rate_hz must be positive")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed must be an unsigned 64-bit integer")
        for start, length in self.planted_intervals():
            if start < 0 or length < 0 or start + length > self.T:
                raise InvalidSpec(f"interval ({start}, {length}) does not fit in T={self.T}")
        if len(self.class_band_hz) != 2:
            raise InvalidSpec("class_band_hz needs one band per class")
        for lo, hi in (*self.class_band_hz, self.distractor_band_hz):
            if not 0 < lo <= hi < self.sample_rate_hz / 2:
                raise InvalidSpec(f"class band ({lo}, {hi}) must satisfy 0 < lo <= hi < fs/2")
        if not (math.isfinite(self.snr_db) and math.isfinite(self.remainder_gain_db)):
            raise InvalidSpec("snr_db and remainder_gain_db must be finite")
        if self.distractor_db is not None and not math.isfinite(self.distractor_db):
            raise InvalidSpec("distractor_db must be finite")


def class_patterns(n_c: int) -> np.ndarray:
    """Spatial amplitude patterns (2, n_c), each with unit mean square.

    Left loads on the low-index channels, right on the high-index ones.
    """
    w = np.linspace(1.0, 0.1, n_c) if n_c > 1 else np.ones(1)
    w = w / np.sqrt(np.mean(w**2))
    return np.stack([w, w[::-1]])


def generate_synthetic(spec: SynthSpec) -> TrialSet:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    patterns = class_patterns(spec.n_c)
    amp = math.sqrt(2.0 * 10.0 ** (spec.snr_db / 10.0))
    salient = spec.salient_mask()
    noise_gain = np.where(salient, 1.0, 10.0 ** (spec.remainder_gain_db / 20.0))
    t_axis = np.arange(spec.T) / spec.sample_rate_hz
    trials = []
    for i in range(2 * spec.trials_per_class):
        cls = i % 2
        label = (Label.LEFT, Label.RIGHT)[cls]
        data = rng.standard_normal((spec.n_c, spec.T)) * noise_gain
        lo, hi = spec.class_band_hz[cls]
        for start, length in spec.planted_intervals():
            freq = rng.uniform(lo, hi)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            seg = slice(start, start + length)
            wave = np.sin(2.0 * math.pi * freq * t_axis[seg] + phase)
            data[:, seg] += amp * patterns[cls][:, None] * wave[None, :]
        if spec.distractor_db is not None:
            if spec.distractor_mimics_class:
                fake = int(rng.integers(2))
                freq = rng.uniform(*spec.class_band_hz[fake])
                pattern = patterns[fake]
            else:
                freq = rng.uniform(*spec.distractor_band_hz)
                pattern = rng.standard_normal(spec.n_c)
                pattern /= np.sqrt(np.mean(pattern**2))
            phase = rng.uniform(0.0, 2.0 * math.pi)
            d_amp = math.sqrt(2.0 * 10.0 ** (spec.distractor_db / 10.0))
            wave = np.sin(2.0 * math.pi * freq * t_axis[~salient] + phase)
            data[:, ~salient] += d_amp * pattern[:, None] * wave[None, :]
        trial_id = f"{spec.subject_id}-{spec.session.value}-{i:04d}"
        trials.append(Trial(data, spec.sample_rate_hz, label, spec.subject_id, trial_id, spec.session))
    return TrialSet(tuple(trials))
