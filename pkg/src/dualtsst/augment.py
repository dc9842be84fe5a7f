"""Segment-and-Reassemble augmentation.

The time axis is cut into a fixed number of contiguous segments; for each
segment position one donor trial of the target class is drawn uniformly at
random, and both the EEG samples and the time-frequency samples of that
exact range are copied from the same donor.  Segment order is preserved,
so every synthetic trial respects the original temporal sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import TrialSet
from .errors import DataError
from .signal import EegTrial, TfrTrial


@dataclass(frozen=True)
class AugmentSpec:
    segments: int  # segments per trial
    count: int = 0  # samples to generate per batch (0 = match batch size)

    def validate(self, n_times: int) -> None:
        if self.segments < 1:
            raise DataError(f"segments must be >= 1, got {self.segments}")
        if self.segments > n_times:
            raise DataError(f"segments {self.segments} > trial length {n_times}")


def segment_bounds(n_times: int, segments: int) -> list:
    """Contiguous (start, stop) pairs; the first ``n_times % segments``
    segments absorb the extra samples so lengths differ by at most one."""
    if segments < 1 or segments > n_times:
        raise DataError(f"cannot cut {n_times} samples into {segments} segments")
    base, extra = divmod(n_times, segments)
    bounds, start = [], 0
    for i in range(segments):
        stop = start + base + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def segment_reassemble(pool: TrialSet, label: int, segments: int,
                       rng: np.random.Generator):
    """Build one augmented (EegTrial, TfrTrial) pair for ``label``.

    Donors are drawn with replacement, uniformly per segment, from the
    same-class trials in ``pool``; the two views always share the donor.
    """
    if pool.tfr is None:
        raise DataError("augmentation needs a TrialSet with TFR sidecars")
    donors = pool.class_indices(label)
    if donors.size == 0:
        raise DataError(f"no trials of class {label} to augment from")
    bounds = segment_bounds(pool.n_times, segments)
    eeg = np.empty_like(pool.eeg[0])
    tfr = np.empty_like(pool.tfr[0])
    for start, stop in bounds:
        donor = donors[rng.integers(0, donors.size)]
        eeg[:, start:stop] = pool.eeg[donor, :, start:stop]
        tfr[:, :, start:stop] = pool.tfr[donor, :, :, start:stop]
    return (
        EegTrial(data=eeg, fs=pool.fs, label=label),
        TfrTrial(data=tfr, freqs=pool.freqs, fs=pool.fs, label=label),
    )


def augment_batch(batch: TrialSet, segments: int, rng: np.random.Generator,
                  count: int | None = None):
    """Generate ``count`` augmented samples (default: the batch size) from a
    batch, class-balanced over the classes present in it.

    Returns (eeg [m, ch, T], tfr [m, ch, F, T], labels [m]).
    """
    if batch.tfr is None:
        raise DataError("augmentation needs a TrialSet with TFR sidecars")
    if count is None:
        count = len(batch)
    present = np.unique(batch.labels)
    base, extra = divmod(count, present.size)
    eeg = np.empty((count,) + batch.eeg.shape[1:])
    tfr = np.empty((count,) + batch.tfr.shape[1:])
    labels = np.empty(count, dtype=np.int64)
    i = 0
    for j, label in enumerate(present):
        for _ in range(base + (1 if j < extra else 0)):
            e, t = segment_reassemble(batch, int(label), segments, rng)
            eeg[i] = e.data
            tfr[i] = t.data
            labels[i] = label
            i += 1
    return eeg, tfr, labels
