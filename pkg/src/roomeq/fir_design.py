"""Linear-phase EQ compensation filters designed by the window method."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, get_window

from .audio_io import CANONICAL_RATE, AudioBuffer, EmptySignalError
from .spectral import EQ_FREQUENCIES, HOP, N_BINS, NFFT, eq_bins

log = logging.getLogger(__name__)

NUM_TAPS = 511
DELAY = (NUM_TAPS - 1) // 2
GAIN_LIMIT_DB = 30.0
FFT_THRESHOLD = 4096


@dataclass(frozen=True)
class FirFilter:
    taps: np.ndarray
    design_gains_db: np.ndarray
    clamped: bool = False
    clamp_limit_db: float = GAIN_LIMIT_DB
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64)
        taps.flags.writeable = False
        object.__setattr__(self, "taps", taps)
        gains = np.array(self.design_gains_db, dtype=np.float64)
        gains.flags.writeable = False
        object.__setattr__(self, "design_gains_db", gains)

    @property
    def group_delay(self) -> int:
        return (len(self.taps) - 1) // 2


def _check_gains(gains) -> np.ndarray:
    g = np.asarray(gains, dtype=np.float64)
    if g.shape != (len(EQ_FREQUENCIES),):
        raise ValueError(f"expected {len(EQ_FREQUENCIES)} gains, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError(f"gains must be finite, got {g.tolist()}")
    return g


def clamp_gains(gains, limit_db: float = GAIN_LIMIT_DB) -> tuple[np.ndarray, bool]:
    g = _check_gains(gains)
    clamped = np.clip(g, -limit_db, limit_db)
    return clamped, bool(np.any(clamped != g))


def interpolate_desired_response(gains, sample_rate: int = CANONICAL_RATE) -> np.ndarray:
    """Dense linear-amplitude target on the 257-bin grid.

    dB gains are interpolated linearly over log-frequency between 62.5 Hz and
    8 kHz and held constant outside that span (including DC and Nyquist).
    """
    g, _ = clamp_gains(gains)
    freqs = np.arange(N_BINS) * (sample_rate / NFFT)
    log_f = np.log(np.maximum(freqs, EQ_FREQUENCIES[0]))
    db = np.interp(log_f, np.log(EQ_FREQUENCIES), g)
    return 10.0 ** (db / 20.0)


@lru_cache(maxsize=None)
def _grid_to_taps() -> np.ndarray:
    """(NUM_TAPS, N_BINS) real matrix: amplitude grid -> windowed, delayed taps.

    Column ``b`` is the design for a unit amplitude at bin ``b`` alone.
    """
    k = np.arange(N_BINS)
    phase = np.exp(-2j * np.pi * k * DELAY / NFFT)
    kernels = np.fft.irfft(np.diag(phase), NFFT, axis=1)[:, :NUM_TAPS]
    window = np.hamming(NUM_TAPS)
    window = 0.5 * (window + window[::-1])
    B = (kernels * window).T
    B.flags.writeable = False
    return B


@lru_cache(maxsize=None)
def _eq_bin_operators() -> np.ndarray:
    """(frames, 8, N_BINS) complex maps from the grid to the analysis frames.

    Mirrors ``magnitude_response_db`` on a NUM_TAPS-long input: frames start
    at -HOP, 0 and HOP, each Hann-weighted, evaluated at the eight EQ bins.
    Summing magnitudes over frames gives the measured linear EQ exactly.
    """
    window = get_window("hann", NFFT)
    bins = np.rint(eq_bins()).astype(int)
    n_frames = (HOP + NUM_TAPS - 1) // HOP + 1
    ops = np.zeros((n_frames, len(bins), NUM_TAPS), dtype=complex)
    for f in range(n_frames):
        start = f * HOP - HOP
        j = np.arange(NFFT)
        t = start + j
        keep = (t >= 0) & (t < NUM_TAPS)
        ops[f][:, t[keep]] = window[j[keep]] * np.exp(-2j * np.pi * np.outer(bins, j[keep]) / NFFT)
    ops = ops @ _grid_to_taps() / (window.sum() / HOP)
    ops.flags.writeable = False
    return ops


def _measured_eq(grid):
    spectra = _eq_bin_operators() @ grid
    return np.abs(spectra).sum(axis=0), spectra


def _symmetric_taps(grid) -> np.ndarray:
    taps = _grid_to_taps() @ grid
    # mirrored BLAS rows may round differently; averaging is exactly symmetric
    return 0.5 * (taps + taps[::-1])


def design_window_method(gains) -> FirFilter:
    """Single-pass window-method design of the log-interpolated target."""
    g, clamped = clamp_gains(gains)
    taps = _symmetric_taps(interpolate_desired_response(g))
    return FirFilter(taps, _check_gains(gains), clamped)


def design_eq_filter(gains, tol_db: float = 0.01, max_iter: int = 20) -> FirFilter:
    """511-tap linear-phase EQ filter whose measured sub-band EQ hits ``gains``.

    Starts from the window-method design of the log-interpolated target and
    refines the sampled amplitude grid with minimum-norm Gauss-Newton steps
    until the sub-band EQ of the taps (as ``extract_subband_eq`` reads it) is
    within ``tol_db`` of the request.  The refinement only reshapes the grid
    near the eight EQ bins; the design stays frequency sampling + Hamming
    window with exact tap symmetry.
    """
    g, clamped = clamp_gains(gains)
    if clamped:
        log.info("design gains clamped to +/-%g dB: %s", GAIN_LIMIT_DB, np.round(g, 2).tolist())
    ops = _eq_bin_operators()
    target = np.log(10.0 ** (g / 20.0))
    grid = interpolate_desired_response(g)
    best_grid, best_err = grid, np.inf
    for _ in range(max_iter):
        mag, spectra = _measured_eq(grid)
        resid = target - np.log(np.maximum(mag, 1e-300))
        err = np.max(np.abs(resid - resid[4])) * 20.0 / np.log(10.0)
        if err < best_err:
            best_grid, best_err = grid, err
        if err < tol_db:
            break
        unit = np.conj(spectra) / np.maximum(np.abs(spectra), 1e-300)
        jac = np.real(unit[..., None] * ops).sum(axis=0) / np.maximum(mag, 1e-300)[:, None]
        gram = jac @ jac.T
        gram.flat[::len(gram) + 1] += 1e-12 * np.trace(gram)
        grid = grid + jac.T @ np.linalg.solve(gram, resid)
    taps = _symmetric_taps(best_grid)
    return FirFilter(taps, _check_gains(gains), clamped,
                     metadata={"residual_db": float(best_err)})


def _direct_convolve(x, h):
    return np.convolve(x, h)


def _fft_convolve(x, h):
    return fftconvolve(x, h)


def apply_fir(signal: AudioBuffer, fir: FirFilter, trim_delay: bool = True) -> AudioBuffer:
    """Full linear convolution with ``fir``; optionally drop the group delay.

    With ``trim_delay`` the output has ``len(signal) + group_delay`` samples,
    so a feature at index ``i`` of the input stays at index ``i``.
    """
    x = signal.samples
    if len(x) == 0:
        raise EmptySignalError()
    if len(x) > FFT_THRESHOLD:
        y = _fft_convolve(x, fir.taps)
    else:
        y = _direct_convolve(x, fir.taps)
    if trim_delay:
        y = y[fir.group_delay:]
    return AudioBuffer(y, signal.sample_rate)


def dump_taps(fir: FirFilter, path=None) -> str:
    """Plain-text dump: one comment line with the gains, then one tap per line."""
    header = "# gains_db " + ",".join(f"{g:.17g}" for g in fir.design_gains_db)
    if fir.clamped:
        header += f" (clamped to +/-{fir.clamp_limit_db:g} dB)"
    text = header + "\n" + "".join(f"{t:.17g}\n" for t in fir.taps)
    if path is not None:
        Path(path).write_text(text)
    return text


def load_taps(path) -> FirFilter:
    gains = None
    taps = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("# gains_db "):
                gains = [float(v) for v in line.split()[2].split(",")]
            continue
        taps.append(float(line))
    if gains is None:
        gains = [0.0] * len(EQ_FREQUENCIES)
    return FirFilter(np.array(taps), np.array(gains), clamped=False)
