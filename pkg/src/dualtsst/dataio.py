"""Neutral on-disk dataset format, split management, presets, and a
synthetic-EEG generator for self-contained tests.

A dataset directory holds ``manifest.json`` plus ``trials/*.eegt`` files
(raw EEG, one per trial) and optional ``trials/*.tfr.eegt`` sidecars with
the cached Morlet power of the preprocessed trial.

Tensor file format (little endian):

    magic  b"EEGT"
    u32    version (1)
    u8     ndim
    u32    extent per dim (row-major payload order)
    f32    payload

The sidecar cache key is the frequency grid plus the band/window used to
preprocess; changing either invalidates the cache.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import signal
from .errors import DataError

MAGIC = b"EEGT"
VERSION = 1
TFR_SUFFIX = ".tfr.eegt"
_MAX_EXTENT = 2**31
_MAX_NDIM = 8


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------


def write_array(path, arr) -> None:
    """Write an array as 32-bit little-endian floats with a shape header."""
    arr = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
    if arr.ndim < 1 or arr.ndim > _MAX_NDIM:
        raise DataError(f"cannot store a {arr.ndim}-d array")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IB", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_array(path) -> np.ndarray:
    """Read a tensor file; returns float32 with the stored shape."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 9:
        raise DataError(f"{path}: truncated header")
    version, ndim = struct.unpack_from("<IB", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if ndim < 1 or ndim > _MAX_NDIM:
        raise DataError(f"{path}: bad ndim {ndim}")
    off = 9
    if len(blob) < off + 4 * ndim:
        raise DataError(f"{path}: truncated shape header")
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    count = 1
    for e in shape:
        if e < 1 or e > _MAX_EXTENT:
            raise DataError(f"{path}: extent overflow in shape {shape}")
        count *= e
        if count > _MAX_EXTENT:
            raise DataError(f"{path}: extent overflow in shape {shape}")
    if len(blob) != off + 4 * count:
        raise DataError(
            f"{path}: payload is {len(blob) - off} bytes, shape {shape} needs {4 * count}"
        )
    return np.frombuffer(blob, dtype="<f4", offset=off).reshape(shape).copy()


# some callers think of these in trial terms
write_trial = write_array
read_trial = read_array


# ---------------------------------------------------------------------------
# trial collections
# ---------------------------------------------------------------------------


@dataclass
class TrialSet:
    """A labelled stack of trials: EEG [n, ch, T] and optional TFR [n, ch, F, T]."""

    eeg: np.ndarray
    labels: np.ndarray
    fs: float
    tfr: np.ndarray | None = None
    freqs: np.ndarray | None = None
    class_names: list[str] | None = None
    subjects: list[str] | None = None
    sessions: list[str] | None = None

    def __post_init__(self):
        self.eeg = np.asarray(self.eeg, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.eeg.ndim != 3:
            raise DataError(f"TrialSet EEG must be [n, ch, T], got {self.eeg.shape}")
        if self.labels.shape != (self.eeg.shape[0],):
            raise DataError("labels do not match the number of trials")
        if self.tfr is not None:
            self.tfr = np.asarray(self.tfr, dtype=np.float64)
            n, ch, t = self.eeg.shape
            if self.tfr.shape[0] != n or self.tfr.shape[1] != ch or self.tfr.shape[3] != t:
                raise DataError(
                    f"TFR shape {self.tfr.shape} inconsistent with EEG {self.eeg.shape}"
                )
        if self.subjects is None:
            self.subjects = ["s0"] * len(self.labels)
        if self.sessions is None:
            self.sessions = ["0"] * len(self.labels)

    def __len__(self) -> int:
        return self.eeg.shape[0]

    @property
    def n_channels(self) -> int:
        return self.eeg.shape[1]

    @property
    def n_times(self) -> int:
        return self.eeg.shape[2]

    @property
    def n_freqs(self) -> int:
        return 0 if self.tfr is None else self.tfr.shape[2]

    def subset(self, idx) -> "TrialSet":
        idx = np.asarray(idx, dtype=np.int64)
        return TrialSet(
            eeg=self.eeg[idx],
            labels=self.labels[idx],
            fs=self.fs,
            tfr=None if self.tfr is None else self.tfr[idx],
            freqs=self.freqs,
            class_names=self.class_names,
            subjects=[self.subjects[i] for i in idx],
            sessions=[self.sessions[i] for i in idx],
        )

    def class_indices(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class TrialEntry:
    file: str
    label: int
    subject: str = "s0"
    session: str = "0"
    split: str | None = None


@dataclass
class DatasetManifest:
    name: str
    fs: float
    channels: list[str]
    n_classes: int
    class_names: list[str]
    trials: list[TrialEntry]
    preprocess: dict | None = None  # {"band": [lo, hi] | None, "window": [t0, t1] | None}
    tfr: dict | None = None  # {"freqs": [...], "suffix": ".tfr.eegt"}

    def validate(self) -> None:
        if self.n_classes < 1:
            raise DataError("n_classes must be >= 1")
        if len(self.class_names) != self.n_classes:
            raise DataError("class_names length does not match n_classes")
        if not self.trials:
            raise DataError("manifest lists no trials")
        for t in self.trials:
            if not 0 <= t.label < self.n_classes:
                raise DataError(f"{t.file}: label {t.label} out of range [0, {self.n_classes})")
            if t.split not in (None, "train", "test"):
                raise DataError(f"{t.file}: unknown split tag {t.split!r}")


def save_manifest(dataset_dir, manifest: DatasetManifest) -> None:
    manifest.validate()
    payload = dataclasses.asdict(manifest)
    path = Path(dataset_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")


def load_manifest(dataset_dir) -> DatasetManifest:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json in {dataset_dir}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    try:
        trials = [TrialEntry(**t) for t in raw.pop("trials")]
        manifest = DatasetManifest(trials=trials, **raw)
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed manifest ({exc})") from exc
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    """How to carve a dataset into train/test.

    ``session`` mode honours the per-trial split tags in the manifest;
    ``kfold`` deterministically derives fold membership from (seed, k)
    and holds out fold ``fold``.
    """

    mode: str = "session"
    k: int = 5
    fold: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("session", "kfold"):
            raise DataError(f"unknown split mode {self.mode!r}")
        if self.mode == "kfold":
            if self.k < 2:
                raise DataError("kfold needs k >= 2")
            if not 0 <= self.fold < self.k:
                raise DataError(f"fold {self.fold} out of range for k={self.k}")


def split_indices(n: int, plan: SplitPlan, tags=None):
    """Return (train_idx, test_idx) as sorted arrays."""
    plan.validate()
    if plan.mode == "session":
        if tags is None or any(t is None for t in tags):
            raise DataError("session split requires split tags on every trial")
        train = np.array([i for i, t in enumerate(tags) if t == "train"], dtype=np.int64)
        test = np.array([i for i, t in enumerate(tags) if t == "test"], dtype=np.int64)
    else:
        rng = np.random.default_rng(plan.seed)
        perm = rng.permutation(n)
        test = np.sort(perm[plan.fold :: plan.k])
        mask = np.ones(n, dtype=bool)
        mask[test] = False
        train = np.nonzero(mask)[0]
    if len(train) == 0 or len(test) == 0:
        raise DataError(f"degenerate split: {len(train)} train / {len(test)} test trials")
    return train, test


# ---------------------------------------------------------------------------
# dataset IO
# ---------------------------------------------------------------------------


def _tfr_path(dataset_dir: Path, trial_file: str) -> Path:
    rel = trial_file[: -len(".eegt")] if trial_file.endswith(".eegt") else trial_file
    return Path(dataset_dir) / (rel + TFR_SUFFIX)


def write_dataset(dataset_dir, trials: TrialSet, name: str = "dataset",
                  splits=None, channels=None) -> DatasetManifest:
    """Write a TrialSet (and TFR sidecars, if present) as a dataset directory."""
    dataset_dir = Path(dataset_dir)
    n, ch, _ = trials.eeg.shape
    if channels is None:
        channels = [f"ch{i}" for i in range(ch)]
    class_names = trials.class_names or [str(c) for c in range(int(trials.labels.max()) + 1)]
    entries = []
    for i in range(n):
        rel = f"trials/trial_{i:04d}.eegt"
        write_array(dataset_dir / rel, trials.eeg[i])
        if trials.tfr is not None:
            write_array(_tfr_path(dataset_dir, rel), trials.tfr[i])
        entries.append(
            TrialEntry(
                file=rel,
                label=int(trials.labels[i]),
                subject=trials.subjects[i],
                session=trials.sessions[i],
                split=None if splits is None else splits[i],
            )
        )
    manifest = DatasetManifest(
        name=name,
        fs=float(trials.fs),
        channels=list(channels),
        n_classes=len(class_names),
        class_names=list(class_names),
        trials=entries,
        preprocess=None,
        tfr=None
        if trials.tfr is None
        else {"freqs": [float(f) for f in trials.freqs], "suffix": TFR_SUFFIX},
    )
    save_manifest(dataset_dir, manifest)
    return manifest


def transform_dataset(dataset_dir, freqs, band=None, window=None, force: bool = False) -> int:
    """Compute Morlet-power sidecars for every trial; returns how many were written.

    ``band``/``window`` are applied to the raw trial before the transform and
    recorded in the manifest so later loads preprocess the EEG identically.
    Existing sidecars are reused when the recorded settings match.
    """
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    freqs = [float(f) for f in freqs]
    settings = {
        "freqs": freqs,
        "suffix": TFR_SUFFIX,
    }
    preprocess = {
        "band": None if band is None else [float(band[0]), float(band[1])],
        "window": None if window is None else [float(window[0]), float(window[1])],
    }
    unchanged = manifest.tfr == settings and manifest.preprocess == preprocess
    plan = signal.make_morlet_plan(freqs, manifest.fs)
    written = 0
    for entry in manifest.trials:
        out_path = _tfr_path(dataset_dir, entry.file)
        if unchanged and out_path.exists() and not force:
            continue
        x = read_array(dataset_dir / entry.file).astype(np.float64)
        if x.ndim != 2:
            raise DataError(f"{entry.file}: trial must be [ch, T], got {x.shape}")
        if band is not None:
            x = signal.bandpass_array(x, manifest.fs, band[0], band[1])
        if window is not None:
            x = signal.epoch_array(x, manifest.fs, window[0], window[1])
        write_array(out_path, signal.morlet_power(x, plan))
        written += 1
    manifest.tfr = settings
    manifest.preprocess = preprocess
    save_manifest(dataset_dir, manifest)
    return written


def load_trialset(dataset_dir, require_tfr: bool = False, normalize: bool = True) -> TrialSet:
    """Load every trial of a dataset directory into one TrialSet.

    EEG is preprocessed with the band/window recorded in the manifest and
    Z-scored per (trial, channel); TFR sidecars are Z-scored per
    (trial, channel, frequency).
    """
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    if require_tfr and manifest.tfr is None:
        raise DataError(
            f"{dataset_dir}: no TFR sidecars; run the 'transform' command first"
        )
    band = window = None
    if manifest.preprocess:
        band = manifest.preprocess.get("band")
        window = manifest.preprocess.get("window")

    eeg, tfrs = [], []
    shape0 = None
    for entry in manifest.trials:
        path = dataset_dir / entry.file
        if not path.exists():
            raise DataError(f"missing trial file {path}")
        x = read_array(path).astype(np.float64)
        if x.ndim != 2:
            raise DataError(f"{entry.file}: trial must be [ch, T], got {x.shape}")
        if band is not None:
            x = signal.bandpass_array(x, manifest.fs, band[0], band[1])
        if window is not None:
            x = signal.epoch_array(x, manifest.fs, window[0], window[1])
        if shape0 is None:
            shape0 = x.shape
        elif x.shape != shape0:
            raise DataError(f"{entry.file}: shape {x.shape} != {shape0} of first trial")
        eeg.append(x)
        if manifest.tfr is not None:
            tfr_path = _tfr_path(dataset_dir, entry.file)
            if not tfr_path.exists():
                raise DataError(f"missing TFR sidecar {tfr_path}")
            t = read_array(tfr_path).astype(np.float64)
            if t.ndim != 3 or t.shape[0] != x.shape[0] or t.shape[2] != x.shape[1]:
                raise DataError(
                    f"{tfr_path.name}: sidecar shape {t.shape} inconsistent with trial {x.shape}"
                )
            tfrs.append(t)

    eeg = np.stack(eeg)
    tfr = np.stack(tfrs) if tfrs else None
    if normalize:
        eeg = signal.zscore(eeg, axes=(-1,))
        if tfr is not None:
            tfr = signal.zscore(tfr, axes=(-1,))

    labels = np.array([t.label for t in manifest.trials], dtype=np.int64)
    return TrialSet(
        eeg=eeg,
        labels=labels,
        fs=manifest.fs,
        tfr=tfr,
        freqs=None if manifest.tfr is None else np.asarray(manifest.tfr["freqs"]),
        class_names=manifest.class_names,
        subjects=[t.subject for t in manifest.trials],
        sessions=[t.session for t in manifest.trials],
    )


def load_dataset(dataset_dir, plan: SplitPlan, require_tfr: bool = False,
                 normalize: bool = True):
    """Load a dataset directory and split it into (train, test) TrialSets."""
    manifest = load_manifest(dataset_dir)
    full = load_trialset(dataset_dir, require_tfr=require_tfr, normalize=normalize)
    tags = [t.split for t in manifest.trials]
    train_idx, test_idx = split_indices(len(full), plan, tags=tags)
    return full.subset(train_idx), full.subset(test_idx)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthClass:
    """A class emits a sinusoid at ``freq`` Hz on ``channels`` (None = all)."""

    freq: float
    channels: tuple | None = None


def synth(n_per_class: int, n_channels: int, n_times: int, fs: float,
          classes, noise: float = 0.0, seed: int = 0) -> TrialSet:
    """Generate labelled trials: per-class sinusoid (random phase) on masked
    channels plus white noise everywhere.

    Trials are emitted class by class, so with ``noise=0`` a frequency-bin
    rule on the masked channels separates the classes perfectly.
    """
    rng = np.random.default_rng(seed)
    classes = list(classes)
    for c in classes:
        if not 0 < c.freq < fs / 2:
            raise DataError(f"class frequency {c.freq} outside (0, fs/2)")
        if c.channels is not None and any(not 0 <= ch < n_channels for ch in c.channels):
            raise DataError(f"class channel mask {c.channels} outside [0, {n_channels})")
    t = np.arange(n_times) / fs
    eeg = np.zeros((n_per_class * len(classes), n_channels, n_times))
    labels = np.zeros(n_per_class * len(classes), dtype=np.int64)
    i = 0
    for label, spec in enumerate(classes):
        mask = range(n_channels) if spec.channels is None else spec.channels
        for _ in range(n_per_class):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = np.sin(2.0 * np.pi * spec.freq * t + phase)
            trial = np.zeros((n_channels, n_times))
            for ch in mask:
                trial[ch] = wave
            if noise > 0:
                trial += rng.normal(0.0, noise, size=trial.shape)
            eeg[i] = trial
            labels[i] = label
            i += 1
    return TrialSet(
        eeg=eeg,
        labels=labels,
        fs=fs,
        class_names=[f"f{spec.freq:g}" for spec in classes],
    )


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetPreset:
    """Geometry, preprocessing, and training defaults for a known dataset."""

    name: str
    n_channels: int
    fs: float
    n_classes: int
    n_times: int
    band: tuple | None
    window: tuple | None
    freq_lo: float
    freq_hi: float
    freq_step: float
    augment_segments: int  # 0 disables augmentation
    split_mode: str
    kfold_k: int
    model_overrides: dict
    train_overrides: dict
    synth_classes: tuple | None = None

    def freqs(self) -> np.ndarray:
        return np.arange(self.freq_lo, self.freq_hi + 1e-9, self.freq_step)

    def split_plan(self, fold: int = 0, seed: int = 0) -> SplitPlan:
        return SplitPlan(mode=self.split_mode, k=self.kfold_k, fold=fold, seed=seed)


_PRESETS = {
    "bci2a": DatasetPreset(
        name="bci2a",
        n_channels=22,
        fs=250.0,
        n_classes=4,
        n_times=1000,  # 2..6 s at 250 Hz
        band=(0.0, 40.0),
        window=(2.0, 6.0),
        freq_lo=1.0,
        freq_hi=40.0,
        freq_step=1.0,
        augment_segments=8,
        split_mode="session",
        kfold_k=5,
        model_overrides={},
        train_overrides={},
    ),
    "bci2b": DatasetPreset(
        name="bci2b",
        n_channels=3,
        fs=250.0,
        n_classes=2,
        n_times=1125,  # 3..7.5 s at 250 Hz
        band=(0.0, 40.0),
        window=(3.0, 7.5),
        freq_lo=1.0,
        freq_hi=40.0,
        freq_step=1.0,
        augment_segments=9,
        split_mode="session",
        kfold_k=5,
        model_overrides={},
        train_overrides={},
    ),
    "seed": DatasetPreset(
        name="seed",
        n_channels=62,
        fs=200.0,
        n_classes=3,
        n_times=200,  # non-overlapping 1 s windows at 200 Hz
        band=(0.5, 50.0),
        window=None,
        freq_lo=1.0,
        freq_hi=50.0,
        freq_step=1.0,
        augment_segments=0,
        split_mode="kfold",
        kfold_k=5,
        model_overrides={},
        train_overrides={},
    ),
    # desk-scale configuration used by the test suite and gradcheck
    "mini": DatasetPreset(
        name="mini",
        n_channels=4,
        fs=128.0,
        n_classes=2,
        n_times=64,
        band=None,
        window=None,
        freq_lo=4.0,
        freq_hi=24.0,
        freq_step=4.0,
        augment_segments=8,
        split_mode="kfold",
        kfold_k=3,
        model_overrides={
            "branch_channels": 3,
            "embed_dim": 8,
            "time_kernel_raw": 7,
            "time_kernel_tfr": 9,
            "pool_raw": 16,
            "pool_raw_stride": 4,
            "pool_tfr": 8,
            "pool_tfr_stride": 4,
            "encoder_layers": 2,
            "encoder_heads": 2,
            "classifier_hidden": 16,
        },
        train_overrides={"epochs": 200, "lr_max": 2e-3, "cycle_epochs": 32},
        synth_classes=(SynthClass(8.0, (0, 1)), SynthClass(20.0, (2, 3))),
    ),
}


def preset(name: str) -> DatasetPreset:
    try:
        return _PRESETS[name]
    except KeyError:
        raise DataError(f"unknown preset {name!r}; known: {sorted(_PRESETS)}") from None


def preset_names():
    return sorted(_PRESETS)
