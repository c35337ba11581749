"""Magnitude response, sub-band EQ extraction and T60 measurement for IRs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .audio_io import CANONICAL_RATE, AudioBuffer, require_rate

NFFT = 512
HOP = NFFT // 2
N_BINS = NFFT // 2 + 1
FLOOR_DB = -120.0

EQ_FREQUENCIES = (62.5, 125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0)
REFERENCE_INDEX = 4
FREE_INDICES = (0, 1, 2, 3, 5, 6, 7)


class UnreliableEstimateError(ValueError):
    pass


@dataclass(frozen=True)
class ImpulseResponse:
    buffer: AudioBuffer
    id: str = ""

    def __post_init__(self):
        if len(self.buffer) < 1 or not np.any(self.buffer.samples):
            raise ValueError(f"impulse response {self.id!r} has no nonzero sample")

    def __len__(self):
        return len(self.buffer)

    @classmethod
    def from_array(cls, samples, sample_rate=CANONICAL_RATE, id=""):
        return cls(AudioBuffer(samples, sample_rate), id)

    @property
    def samples(self) -> np.ndarray:
        return self.buffer.samples

    @property
    def sample_rate(self) -> int:
        return self.buffer.sample_rate


@dataclass(frozen=True)
class SpectrumDb:
    gains_db: np.ndarray
    sample_rate: int = CANONICAL_RATE

    @property
    def bin_width(self) -> float:
        return self.sample_rate / NFFT

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(N_BINS) * self.bin_width


@dataclass(frozen=True)
class SubBandEq:
    """Eight dB gains at ``EQ_FREQUENCIES``, relative to the 1 kHz entry."""

    gains_db: np.ndarray

    def __post_init__(self):
        g = np.array(self.gains_db, dtype=np.float64)
        if g.shape != (len(EQ_FREQUENCIES),):
            raise ValueError(f"SubBandEq needs {len(EQ_FREQUENCIES)} gains, got shape {g.shape}")
        g.flags.writeable = False
        object.__setattr__(self, "gains_db", g)

    @property
    def free(self) -> np.ndarray:
        """The 7 unconstrained entries (everything but 1 kHz)."""
        return self.gains_db[list(FREE_INDICES)]

    @classmethod
    def from_free(cls, free) -> SubBandEq:
        free = np.asarray(free, dtype=np.float64)
        if free.shape != (len(FREE_INDICES),):
            raise ValueError(f"expected {len(FREE_INDICES)} free gains, got shape {free.shape}")
        return cls(np.insert(free, REFERENCE_INDEX, 0.0))

    @classmethod
    def referenced(cls, gains) -> SubBandEq:
        g = np.asarray(gains, dtype=np.float64)
        return cls(g - g[REFERENCE_INDEX])


def eq_bins(sample_rate: int = CANONICAL_RATE) -> np.ndarray:
    """Fractional bin positions of the EQ sample points (exact ints at 16 kHz)."""
    return np.asarray(EQ_FREQUENCIES) / (sample_rate / NFFT)


def magnitude_response_db(ir: ImpulseResponse) -> SpectrumDb:
    """Welch-style magnitude spectrum of an IR on a 512-point grid.

    The IR is framed with a periodic Hann window (hop 256) after padding 256
    zeros in front and enough at the end that every sample is covered by two
    frames.  Frame magnitudes are summed and divided by the overlap-add gain
    of the window (exactly 1 for Hann at 50 % hop), so a unit impulse reads
    0 dB at every bin whatever its position.
    """
    require_rate(ir.buffer)
    x = ir.samples
    n = len(x)
    last_start = ((HOP + n - 1) // HOP) * HOP
    padded = np.zeros(last_start + NFFT)
    padded[HOP:HOP + n] = x

    window = get_window("hann", NFFT)
    starts = np.arange(0, last_start + 1, HOP)
    mags = np.zeros(N_BINS)
    block = 256
    for i in range(0, len(starts), block):
        idx = starts[i:i + block, None] + np.arange(NFFT)[None, :]
        mags += np.abs(np.fft.rfft(padded[idx] * window, axis=1)).sum(axis=0)

    mags /= window.sum() / HOP
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mags)
    return SpectrumDb(np.maximum(db, FLOOR_DB), ir.sample_rate)


def sample_spectrum(spectrum: SpectrumDb, frequencies=EQ_FREQUENCIES) -> np.ndarray:
    """Read dB values at the given frequencies.

    Exact bins are read directly; anything between bins falls back to linear
    interpolation over log-frequency.
    """
    pos = np.asarray(frequencies, dtype=np.float64) / spectrum.bin_width
    out = np.empty(len(pos))
    freqs = spectrum.frequencies
    for i, p in enumerate(pos):
        k = int(round(p))
        if abs(p - k) < 1e-9 and 0 <= k < N_BINS:
            out[i] = spectrum.gains_db[k]
        else:
            out[i] = np.interp(np.log(frequencies[i]), np.log(freqs[1:]), spectrum.gains_db[1:])
    return out


def extract_subband_eq(ir: ImpulseResponse) -> SubBandEq:
    return SubBandEq.referenced(sample_spectrum(magnitude_response_db(ir)))


def energy_decay_curve_db(samples) -> np.ndarray:
    """Schroeder backward integral of the squared IR, normalised to 0 dB."""
    energy = np.cumsum(np.asarray(samples, dtype=np.float64)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


def estimate_t60(ir: ImpulseResponse, fit_range=(-5.0, -35.0)) -> float:
    """T60 in seconds from a line fit to the [-5, -35] dB span of the EDC."""
    edc = energy_decay_curve_db(ir.samples)
    hi, lo = fit_range
    below_hi = np.flatnonzero(edc <= hi)
    below_lo = np.flatnonzero(edc <= lo)
    if below_hi.size == 0 or below_lo.size == 0:
        raise UnreliableEstimateError(
            f"decay never spans {hi:g} to {lo:g} dB; unreliable estimate")
    i0, i1 = below_hi[0], below_lo[0]
    fs = ir.sample_rate
    if (i1 - i0) / fs < 0.010:
        raise UnreliableEstimateError(
            f"decay segment is {1000 * (i1 - i0) / fs:.2f} ms (< 10 ms); unreliable estimate")
    t = np.arange(i0, i1 + 1) / fs
    slope, _ = np.polyfit(t, edc[i0:i1 + 1], 1)
    if slope >= 0:
        raise UnreliableEstimateError("energy decay curve is not decreasing")
    return 60.0 / abs(slope)
