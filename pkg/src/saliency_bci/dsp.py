"""Butterworth bandpass design (second-order sections) and zero-phase filtering."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import sosfilt

from .errors import InvalidBand, RateMismatch, UnstableDesign
from .trialio import Trial, TrialSet

STABILITY_MARGIN = 1e-12


@dataclass(frozen=True)
class IirFilter:
    """Cascade of biquads; each row of ``sos`` is ``(b0, b1, b2, a1, a2)``."""

    sos: np.ndarray
    order: int
    low_hz: float
    high_hz: float
    sample_rate_hz: float

    @property
    def n_sections(self) -> int:
        return self.sos.shape[0]

    def as_scipy_sos(self) -> np.ndarray:
        """The ``(b0, b1, b2, 1, a1, a2)`` layout used by ``scipy.signal``."""
        return np.column_stack([self.sos[:, :3], np.ones(self.n_sections), self.sos[:, 3:]])

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for a1, a2 in self.sos[:, 3:]])

    def frequency_response(self, freqs_hz) -> np.ndarray:
        """Complex response of the cascade at the given frequencies."""
        z = np.exp(-1j * 2.0 * np.pi * np.asarray(freqs_hz, dtype=float) / self.sample_rate_hz)
        h = np.ones_like(z)
        for b0, b1, b2, a1, a2 in self.sos:
            h = h * (b0 + b1 * z + b2 * z**2) / (1.0 + a1 * z + a2 * z**2)
        return h


def _pair_poles(poles: np.ndarray) -> list[tuple[complex, complex]]:
    """Group poles into conjugate pairs; leftover real poles pair with each other."""
    poles = list(poles)
    complex_upper = sorted((p for p in poles if p.imag > 1e-14 * max(1.0, abs(p))), key=abs)
    real = sorted((p.real for p in poles if abs(p.imag) <= 1e-14 * max(1.0, abs(p))), key=abs)
    pairs = [(p, p.conjugate()) for p in complex_upper]
    if len(real) % 2:
        raise UnstableDesign("odd number of real poles in a bandpass design")
    pairs += [(complex(real[i]), complex(real[i + 1])) for i in range(0, len(real), 2)]
    return sorted(pairs, key=lambda pr: max(abs(pr[0]), abs(pr[1])))


def design_bandpass(order: int, low_hz: float, high_hz: float, fs_hz: float) -> IirFilter:
    """Digital Butterworth bandpass of the given prototype order.

    Analog lowpass prototype, lowpass-to-bandpass transform around the
    pre-warped band edges, bilinear transform, then factorization into
    ``order`` biquads each carrying one zero at z=1 and one at z=-1.
    """
    if not (isinstance(order, (int, np.integer)) and order >= 1):
        raise InvalidBand(f"order must be a positive integer, got {order!r}")
    if not (0 < low_hz < high_hz < fs_hz / 2):
        raise InvalidBand(f"need 0 < low < high < fs/2, got low={low_hz}, high={high_hz}, fs={fs_hz}")

    k = np.arange(1, order + 1)
    proto = np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))

    fs2 = 2.0 * fs_hz
    w_lo = fs2 * math.tan(math.pi * low_hz / fs_hz)
    w_hi = fs2 * math.tan(math.pi * high_hz / fs_hz)
    bw = w_hi - w_lo
    w0_sq = w_lo * w_hi

    # each prototype pole p splits into the roots of s^2 - p*bw*s + w0^2
    half = proto * bw / 2.0
    disc = np.sqrt(half**2 - w0_sq + 0j)
    analog = np.concatenate([half + disc, half - disc])
    gain = bw**order

    digital = (fs2 + analog) / (fs2 - analog)
    # order analog zeros at s=0 map to z=1, the order zeros at infinity to z=-1
    gain_d = gain * np.real(fs2**order / np.prod(fs2 - analog))

    sections = []
    for p1, p2 in _pair_poles(digital):
        a1 = -(p1 + p2).real
        a2 = (p1 * p2).real
        sections.append([1.0, 0.0, -1.0, a1, a2])
    sos = np.array(sections)
    sos[0, :3] *= gain_d

    filt = IirFilter(sos, int(order), float(low_hz), float(high_hz), float(fs_hz))
    if np.any(np.abs(filt.poles()) >= 1.0 - STABILITY_MARGIN):
        raise UnstableDesign(f"pole on or outside the unit circle for band {low_hz}-{high_hz} Hz")
    return filt


def pad_length(f: IirFilter) -> int:
    return 3 * f.n_sections * 2


def filtfilt(f: IirFilter, x: np.ndarray) -> np.ndarray:
    """Forward-backward filtering along the last axis with reflect padding."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    pad = min(pad_length(f), n - 1)
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    y = np.pad(x, widths, mode="reflect") if pad > 0 else x
    sos = f.as_scipy_sos()
    y = sosfilt(sos, y, axis=-1)
    y = sosfilt(sos, y[..., ::-1], axis=-1)[..., ::-1]
    return np.ascontiguousarray(y[..., pad:pad + n])


def filter_trial(f: IirFilter, t: Trial) -> Trial:
    if t.sample_rate_hz != f.sample_rate_hz:
        raise RateMismatch(
            f"trial {t.trial_id!r} sampled at {t.sample_rate_hz} Hz, filter designed for {f.sample_rate_hz} Hz"
        )
    return t.with_data(filtfilt(f, t.data))


def filter_trialset(f: IirFilter, trials: TrialSet) -> TrialSet:
    return trials.map(lambda t: filter_trial(f, t))
