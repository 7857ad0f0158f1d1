"""EEG preprocessing, PERCLOS labelling, splits, a synthetic generator and the
on-disk dataset format.

Real recordings enter through :func:`preprocess_recording`: a 17 x T float
matrix sampled at 1000 Hz plus one PERCLOS value per one-second epoch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from . import binfmt

SEED_VIG_CHANNELS = ("FT7", "FT8", "T7", "T8", "TP7", "TP8", "CP1", "CP2", "P1", "PZ",
                     "P2", "PO3", "POZ", "PO4", "O1", "OZ", "O2")
N_CHANNELS = 17
EPOCH_SAMPLES = 200
TARGET_RATE = 200
PERCLOS_THRESHOLD = 0.5
AWAKE, DROWSY = 0, 1

DATASET_MAGIC = b"DZGMEEG\x00"
DATASET_VERSION = 1
_PROVENANCE = {"real": 0, "synthetic": 1}
_UNLABELED = 255


@dataclass
class ContinuousRecording:
    samples: np.ndarray                 # (channels, T)
    sample_rate: float
    channel_names: tuple = SEED_VIG_CHANNELS

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError(f"recording must be (channels, T), got {self.samples.shape}")
        if len(self.channel_names) != self.samples.shape[0]:
            self.channel_names = tuple(f"ch{i}" for i in range(self.samples.shape[0]))

    @property
    def duration(self) -> float:
        return self.samples.shape[1] / self.sample_rate


@dataclass
class EEGDataset:
    """Epochs (n, 17, 200, 1) as float32; labels 0 = awake, 1 = drowsy (or None)."""

    epochs: np.ndarray
    labels: np.ndarray | None = None
    provenance: str = "real"

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.float32)
        if self.epochs.ndim == 3:
            self.epochs = self.epochs[..., None]
        if self.epochs.ndim != 4 or self.epochs.shape[3] != 1:
            raise ValueError(f"epochs must be (n, channels, samples, 1), got {self.epochs.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.epochs),):
                raise ValueError(f"{len(self.labels)} labels for {len(self.epochs)} epochs")
            if np.any((self.labels != AWAKE) & (self.labels != DROWSY)):
                raise ValueError("labels must be 0 (awake) or 1 (drowsy)")
        if self.provenance not in _PROVENANCE:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return len(self.epochs)

    def subset(self, idx) -> "EEGDataset":
        idx = np.asarray(idx, dtype=np.intp)
        labels = None if self.labels is None else self.labels[idx]
        return EEGDataset(self.epochs[idx], labels, self.provenance)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=2)


# -- signal processing --------------------------------------------------------

def design_bandpass(low: float, high: float, sample_rate: float, numtaps: int | None = None):
    """Hamming-windowed sinc band-pass; default length 2 s of taps (2001 at 1000 Hz)."""
    if numtaps is None:
        numtaps = 2 * int(round(sample_rate)) + 1
    if numtaps % 2 == 0:
        numtaps += 1
    return signal.firwin(numtaps, [low, high], pass_zero=False, fs=sample_rate, window="hamming")


def bandpass_filter(r: ContinuousRecording, low: float = 1.0, high: float = 75.0,
                    numtaps: int | None = None) -> ContinuousRecording:
    """Zero-phase FIR band-pass (filter applied forward then backward).

    Edges are extended by even reflection: unlike odd reflection it does not
    inject a step at the boundary, which the 1 Hz high-pass edge would turn
    into a second-long transient.
    """
    nyq = r.sample_rate / 2
    if not 0 < low < high < nyq:
        raise ValueError(f"band [{low}, {high}] Hz must lie strictly inside (0, {nyq}) Hz")
    taps = design_bandpass(low, high, r.sample_rate, numtaps)
    T = r.samples.shape[1]
    padlen = min(3 * (len(taps) - 1), T - 1)
    out = signal.filtfilt(taps, [1.0], r.samples, axis=1, padtype="even", padlen=padlen)
    return ContinuousRecording(out, r.sample_rate, r.channel_names)


def downsample(r: ContinuousRecording, factor: int = 5) -> ContinuousRecording:
    """Keep every ``factor``-th sample; the caller is responsible for band-limiting."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"downsample factor must be a positive integer, got {factor}")
    new_rate = r.sample_rate / factor
    if new_rate != int(new_rate):
        raise ValueError(f"{r.sample_rate} Hz / {factor} is not an integer rate")
    return ContinuousRecording(r.samples[:, ::factor].copy(), new_rate, r.channel_names)


def epoch_segment(r: ContinuousRecording, epoch_seconds: float = 1.0) -> EEGDataset:
    """Non-overlapping windows; the trailing partial window is dropped."""
    if r.sample_rate != TARGET_RATE:
        raise ValueError(f"epoch_segment expects {TARGET_RATE} Hz input, got {r.sample_rate}")
    width = int(round(epoch_seconds * r.sample_rate))
    T = r.samples.shape[1]
    if T < width:
        raise ValueError(f"recording of {T} samples is shorter than one epoch ({width})")
    n = T // width
    ch = r.samples.shape[0]
    epochs = r.samples[:, :n * width].reshape(ch, n, width).transpose(1, 0, 2)
    return EEGDataset(epochs[..., None])


def perclos_label(perclos: float) -> int:
    """0.5 and above is drowsy."""
    if not 0.0 <= perclos <= 1.0 or np.isnan(perclos):
        raise ValueError(f"PERCLOS must lie in [0, 1], got {perclos}")
    return DROWSY if perclos >= PERCLOS_THRESHOLD else AWAKE


def preprocess_recording(samples: np.ndarray, perclos=None, sample_rate: float = 1000.0,
                         low: float = 1.0, high: float = 75.0) -> EEGDataset:
    """Band-pass, downsample to 200 Hz, cut one-second epochs, label from PERCLOS.

    ``perclos`` (one value per epoch) may be longer than the epoch count; extra
    values are ignored.  Without it the dataset is unlabeled.
    """
    r = ContinuousRecording(samples, sample_rate)
    r = bandpass_filter(r, low, high)
    factor = int(round(sample_rate / TARGET_RATE))
    if factor * TARGET_RATE != sample_rate:
        raise ValueError(f"cannot reach {TARGET_RATE} Hz from {sample_rate} Hz by decimation")
    d = epoch_segment(downsample(r, factor) if factor > 1 else r)
    if perclos is not None:
        perclos = np.asarray(perclos, dtype=float)
        if len(perclos) < len(d):
            raise ValueError(f"{len(perclos)} PERCLOS values for {len(d)} epochs")
        d.labels = np.array([perclos_label(v) for v in perclos[:len(d)]], dtype=np.int64)
    return d


# -- splits -------------------------------------------------------------------

@dataclass
class SplitSpec:
    fractions: tuple = (0.70, 0.15, 0.15)
    stratified: bool = True
    seed: int = 0
    per_subject: bool = False

    def __post_init__(self):
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9 \
                or min(self.fractions) < 0:
            raise ValueError(f"split fractions must be three non-negatives summing to 1, got {self.fractions}")


def _allocate(n: int, fractions) -> list[int]:
    counts = [int(round(n * f)) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    return counts


def split_indices(labels: np.ndarray, spec: SplitSpec, groups=None) -> tuple[np.ndarray, ...]:
    labels = np.asarray(labels)
    n = len(labels)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    rng = np.random.default_rng(spec.seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    if spec.per_subject:
        if groups is None:
            raise ValueError("per-subject split requested without subject ids")
        groups = np.asarray(groups)
        subjects = rng.permutation(np.unique(groups))
        for i, c in enumerate(_allocate(len(subjects), spec.fractions)):
            start = sum(_allocate(len(subjects), spec.fractions)[:i])
            parts[i].append(np.flatnonzero(np.isin(groups, subjects[start:start + c])))
    elif spec.stratified:
        # cumulative rounding over the classes, so split sizes match the unstratified totals
        seen = 0
        for cls in np.unique(labels):
            idx = np.flatnonzero(labels == cls)
            if len(idx) < 3:
                raise ValueError(f"class {cls} has {len(idx)} samples, fewer than the 3 splits")
            idx = rng.permutation(idx)
            counts = np.subtract(_allocate(seen + len(idx), spec.fractions),
                                 _allocate(seen, spec.fractions))
            seen += len(idx)
            bounds = np.cumsum(np.maximum(counts, 0))
            for i, chunk in enumerate(np.split(idx, bounds[:-1])):
                parts[i].append(chunk)
    else:
        idx = rng.permutation(n)
        bounds = np.cumsum(_allocate(n, spec.fractions))
        for i, chunk in enumerate(np.split(idx, bounds[:-1])):
            parts[i].append(chunk)
    return tuple(np.sort(np.concatenate(p)) if p else np.array([], dtype=np.intp) for p in parts)


def split_dataset(d: EEGDataset, s: SplitSpec | None = None, groups=None):
    """Stratified, seeded train/val/test partition."""
    s = s or SplitSpec()
    if d.labels is None:
        raise ValueError("split_dataset needs a labeled dataset")
    return tuple(d.subset(i) for i in split_indices(d.labels, s, groups))


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """k folds; per class, shuffled samples are dealt round-robin so every fold's
    class count differs by at most one."""
    labels = np.asarray(labels.labels if isinstance(labels, EEGDataset) else labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=np.intp)
    offset = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < k:
            raise ValueError(f"class {cls} has {len(idx)} samples, fewer than k={k} folds")
        idx = rng.permutation(idx)
        fold_of[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    all_idx = np.arange(len(labels))
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)]


# -- synthetic data -----------------------------------------------------------

BANDS = {"theta": (5.0, 7.0), "alpha": (9.0, 11.0), "beta": (18.0, 25.0)}


def synth_generate(n: int, seed: int = 0, snr: float = 5.0,
                   minor_amplitude: float = 0.3) -> EEGDataset:
    """Balanced two-class synthetic epochs (17 channels x 1 s at 200 Hz).

    Drowsy epochs are dominated by one theta (5-7 Hz) and one alpha (9-11 Hz)
    rhythm, awake epochs by two beta (18-25 Hz) rhythms; each class also
    carries the other class's rhythms at ``minor_amplitude``.  Rhythm
    frequencies are shared by all channels of an epoch, amplitudes and phases
    are per channel.  White noise is added per channel at signal/noise power
    ratio ``snr``.
    """
    if n % 2:
        raise ValueError(f"n must be even for balanced classes, got {n}")
    if snr <= 0:
        raise ValueError("snr must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(EPOCH_SAMPLES) / TARGET_RATE
    labels = np.repeat([AWAKE, DROWSY], n // 2)
    labels = labels[rng.permutation(n)]
    epochs = np.empty((n, N_CHANNELS, EPOCH_SAMPLES))
    for i, lab in enumerate(labels):
        freqs = np.array([rng.uniform(*BANDS["theta"]), rng.uniform(*BANDS["alpha"]),
                          rng.uniform(*BANDS["beta"]), rng.uniform(*BANDS["beta"])])
        weights = np.array([1.0, 1.0, minor_amplitude, minor_amplitude]) if lab == DROWSY \
            else np.array([minor_amplitude, minor_amplitude, 1.0, 1.0])
        chan_amp = rng.uniform(0.5, 1.5, size=(N_CHANNELS, 1))
        amps = chan_amp * weights * rng.uniform(0.8, 1.2, size=(N_CHANNELS, 4))
        phases = rng.uniform(0, 2 * np.pi, size=(N_CHANNELS, 4))
        sig = np.einsum("cf,cft->ct", amps, np.sin(2 * np.pi * freqs[None, :, None] * t + phases[..., None]))
        power = (sig ** 2).mean(axis=1, keepdims=True)
        noise = rng.normal(size=sig.shape) * np.sqrt(power / snr)
        epochs[i] = sig + noise
    return EEGDataset(epochs[..., None], labels, provenance="synthetic")


def band_power(epochs: np.ndarray, band: tuple, sample_rate: float = TARGET_RATE) -> np.ndarray:
    """Mean periodogram power in ``band`` per epoch and channel: (n, channels)."""
    x = np.asarray(epochs, dtype=np.float64)
    if x.ndim == 4:
        x = x[..., 0]
    power = np.abs(np.fft.rfft(x, axis=-1)) ** 2
    freqs = np.fft.rfftfreq(x.shape[-1], 1.0 / sample_rate)
    sel = (freqs >= band[0]) & (freqs <= band[1])
    return power[..., sel].mean(axis=-1)


# -- file format --------------------------------------------------------------

def dataset_bytes(d: EEGDataset) -> bytes:
    """magic, u32 version, u32 n, u32 channels, u32 samples, u8 provenance,
    float32 LE epochs (n * channels * samples), u8 label per epoch (255 = none)."""
    n, ch, ns, _ = d.epochs.shape
    labels = np.full(n, _UNLABELED, dtype=np.uint8) if d.labels is None else d.labels.astype(np.uint8)
    return b"".join([DATASET_MAGIC, binfmt.u32(DATASET_VERSION), binfmt.u32(n), binfmt.u32(ch),
                     binfmt.u32(ns), bytes([_PROVENANCE[d.provenance]]),
                     d.epochs.astype("<f4").tobytes(order="C"), labels.tobytes()])


def save_dataset(d: EEGDataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(d))


def parse_dataset(buf: bytes, expect_extents: tuple | None = (N_CHANNELS, EPOCH_SAMPLES)) -> EEGDataset:
    r = binfmt.Reader(buf, "dataset")
    r.expect_magic(DATASET_MAGIC)
    version = r.u32()
    if version != DATASET_VERSION:
        raise binfmt.UnsupportedVersionError(f"dataset: version {version} not supported")
    n, ch, ns = r.u32(), r.u32(), r.u32()
    if expect_extents is not None and (ch, ns) != tuple(expect_extents):
        raise binfmt.ExtentMismatchError(
            f"dataset: epochs are {ch}x{ns}, expected {expect_extents[0]}x{expect_extents[1]}")
    prov = r.u8()
    names = {v: k for k, v in _PROVENANCE.items()}
    if prov not in names:
        raise binfmt.FormatError(f"dataset: unknown provenance code {prov}")
    epochs = r.array("<f4", n * ch * ns).reshape(n, ch, ns, 1)
    raw = r.array("u1", n)
    r.expect_end()
    if np.all(raw == _UNLABELED):
        labels = None
    elif np.any(raw > 1):
        raise binfmt.FormatError("dataset: label bytes must be 0, 1, or all 255")
    else:
        labels = raw.astype(np.int64)
    return EEGDataset(epochs, labels, names[prov])


def load_dataset(path, expect_extents: tuple | None = (N_CHANNELS, EPOCH_SAMPLES)) -> EEGDataset:
    return parse_dataset(Path(path).read_bytes(), expect_extents)
