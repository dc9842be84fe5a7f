"""Raw-EEG preprocessing: band filtering, epoching, Morlet time-frequency
transform, and Z-score normalisation.

The time-frequency view uses a complex Morlet wavelet per analysis
frequency.  The wavelet width follows the half-frequency cycle rule
(``n_cycles = freq / 2``), which gives a temporal standard deviation of

    sigma_t = n_cycles / (2 * pi * freq) = 1 / (4 * pi) seconds

for every frequency.  Taps are sampled on [-5 sigma_t, +5 sigma_t] at the
signal's sampling interval and L2-normalised; the Gaussian envelope is
exp(-t^2 / (2 sigma_t^2)), the standard temporal-std convention.  Signals
are reflect-padded by half the support so the output keeps the input's
length, and power |W|^2 is returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

#: slices with a standard deviation below this are emitted as zeros
ZSCORE_GUARD = 1e-12


@dataclass
class EegTrial:
    """One trial of multichannel EEG, [channels, time] in microvolts."""

    data: np.ndarray
    fs: float
    label: int | None = None
    subject: str | None = None
    session: str | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DataError(f"EEG trial must be [ch, T] with ch,T >= 1, got {self.data.shape}")
        if self.fs <= 0:
            raise DataError(f"sampling rate must be positive, got {self.fs}")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_times(self) -> int:
        return self.data.shape[1]


@dataclass
class TfrTrial:
    """Time-frequency power of one trial, [channels, freqs, time]."""

    data: np.ndarray
    freqs: np.ndarray
    fs: float
    label: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.freqs = np.asarray(self.freqs, dtype=np.float64)
        if self.data.ndim != 3:
            raise DataError(f"TFR trial must be [ch, F, T], got shape {self.data.shape}")
        if self.data.shape[1] != self.freqs.size:
            raise DataError("TFR frequency axis does not match the frequency grid")


@dataclass
class MorletPlan:
    """Per-frequency complex Morlet taps for a fixed sampling rate."""

    freqs: np.ndarray
    fs: float
    n_cycles: np.ndarray = field(init=False)
    sigma_t: np.ndarray = field(init=False)
    taps: list = field(init=False)

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=np.float64)
        if self.freqs.size == 0:
            raise DataError("frequency grid is empty")
        if np.any(self.freqs <= 0):
            raise DataError("analysis frequencies must be positive")
        if np.any(np.diff(self.freqs) <= 0):
            raise DataError("analysis frequencies must be strictly ascending")
        if self.fs <= 0:
            raise DataError(f"sampling rate must be positive, got {self.fs}")
        self.n_cycles = self.freqs / 2.0
        self.sigma_t = self.n_cycles / (2.0 * np.pi * self.freqs)
        self.taps = [self._make_taps(f, s) for f, s in zip(self.freqs, self.sigma_t)]

    def _make_taps(self, freq: float, sigma_t: float) -> np.ndarray:
        half = int(math.floor(5.0 * sigma_t * self.fs))
        t = np.arange(-half, half + 1) / self.fs
        w = np.exp(-(t ** 2) / (2.0 * sigma_t ** 2)) * np.exp(2j * np.pi * freq * t)
        return w / np.sqrt(np.sum(np.abs(w) ** 2))

    @property
    def n_freqs(self) -> int:
        return self.freqs.size

    def max_support(self) -> int:
        return max(len(t) for t in self.taps)


def make_morlet_plan(freqs, fs: float) -> MorletPlan:
    return MorletPlan(freqs=np.asarray(freqs, dtype=np.float64), fs=fs)


# ---------------------------------------------------------------------------
# filtering / epoching
# ---------------------------------------------------------------------------


def bandpass_array(x: np.ndarray, fs: float, f_lo: float, f_hi: float) -> np.ndarray:
    """Brickwall FFT filter: keep bins with f_lo <= f <= f_hi, zero the rest.

    Zero-phase and idempotent; the output length equals the input length.
    """
    x = np.asarray(x, dtype=np.float64)
    if not (0.0 <= f_lo < f_hi <= fs / 2.0 + 1e-9):
        raise DataError(f"invalid band [{f_lo}, {f_hi}] for fs={fs}")
    spec = np.fft.rfft(x, axis=-1)
    f = np.fft.rfftfreq(x.shape[-1], 1.0 / fs)
    keep = (f >= f_lo - 1e-9) & (f <= f_hi + 1e-9)
    spec[..., ~keep] = 0.0
    return np.fft.irfft(spec, n=x.shape[-1], axis=-1)


def bandpass(trial: EegTrial, f_lo: float, f_hi: float) -> EegTrial:
    return EegTrial(
        data=bandpass_array(trial.data, trial.fs, f_lo, f_hi),
        fs=trial.fs,
        label=trial.label,
        subject=trial.subject,
        session=trial.session,
    )


def epoch_array(x: np.ndarray, fs: float, t_start: float, t_end: float) -> np.ndarray:
    """Extract the window [t_start, t_end) seconds; round((t_end-t_start)*fs) samples."""
    x = np.asarray(x)
    total = x.shape[-1]
    if not (0.0 <= t_start < t_end):
        raise DataError(f"invalid window [{t_start}, {t_end}]")
    i0 = int(round(t_start * fs))
    n = int(round((t_end - t_start) * fs))
    if i0 + n > total:
        raise DataError(
            f"window [{t_start}, {t_end}] s needs {i0 + n} samples, recording has {total}"
        )
    return np.array(x[..., i0 : i0 + n])


def epoch(trial: EegTrial, t_start: float, t_end: float) -> EegTrial:
    return EegTrial(
        data=epoch_array(trial.data, trial.fs, t_start, t_end),
        fs=trial.fs,
        label=trial.label,
        subject=trial.subject,
        session=trial.session,
    )


# ---------------------------------------------------------------------------
# Morlet transform
# ---------------------------------------------------------------------------


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def morlet_power(x: np.ndarray, plan: MorletPlan) -> np.ndarray:
    """Morlet power of [ch, T] -> [ch, F, T].

    Each channel is reflect-padded by half the wavelet support, convolved
    with the complex taps (via FFT), and squared.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"morlet_power expects [ch, T], got shape {x.shape}")
    ch, n_t = x.shape
    if plan.max_support() > 10 * n_t:
        raise DataError(
            f"wavelet support {plan.max_support()} is absurd for {n_t} samples"
        )
    out = np.empty((ch, plan.n_freqs, n_t), dtype=np.float64)

    # group frequencies by tap length so each group shares one padded FFT
    by_len: dict[int, list[int]] = {}
    for i, taps in enumerate(plan.taps):
        by_len.setdefault(len(taps), []).append(i)

    for k, idxs in by_len.items():
        half = (k - 1) // 2
        if half > n_t - 1:
            raise DataError(
                f"wavelet support {k} cannot be reflect-padded onto {n_t} samples"
            )
        xp = np.pad(x, ((0, 0), (half, half)), mode="reflect")
        nfft = _next_pow2(xp.shape[-1] + k - 1)
        spec = np.fft.fft(xp, nfft, axis=-1)
        for i in idxs:
            wspec = np.fft.fft(plan.taps[i], nfft)
            conv = np.fft.ifft(spec * wspec, axis=-1)[:, k - 1 : k - 1 + n_t]
            out[:, i, :] = conv.real ** 2 + conv.imag ** 2
    return out


def morlet_tfr(trial: EegTrial, plan: MorletPlan) -> TfrTrial:
    if abs(plan.fs - trial.fs) > 1e-9:
        raise DataError(f"plan fs {plan.fs} does not match trial fs {trial.fs}")
    return TfrTrial(
        data=morlet_power(trial.data, plan),
        freqs=plan.freqs,
        fs=trial.fs,
        label=trial.label,
    )


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def zscore(x: np.ndarray, axes=(-1,)) -> np.ndarray:
    """(x - mean) / population-std over ``axes``; degenerate slices become 0."""
    x = np.asarray(x, dtype=np.float64)
    axes = tuple(axes) if isinstance(axes, (tuple, list)) else (axes,)
    mu = x.mean(axis=axes, keepdims=True)
    sd = x.std(axis=axes, keepdims=True)
    ok = sd >= ZSCORE_GUARD
    return np.where(ok, (x - mu) / np.where(ok, sd, 1.0), 0.0)
