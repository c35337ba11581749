"""WAVE reading/writing and resampling to the pipeline's canonical form.

Everything downstream works on mono float64 samples in [-1, 1] at 16 kHz.
Only the ``fmt `` and ``data`` chunks of a RIFF/WAVE file are interpreted;
any other chunk is skipped.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CANONICAL_RATE = 16000

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE

RESAMPLE_TAPS = 64


class AudioFileError(Exception):
    """Base class for WAVE read/write failures. Carries the offending path."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


class AudioFileNotFoundError(AudioFileError, FileNotFoundError):
    pass


class UnsupportedFormatError(AudioFileError):
    pass


class CorruptFileError(AudioFileError):
    pass


class EmptySignalError(ValueError):
    def __init__(self, message="empty signal"):
        super().__init__(message)


@dataclass(frozen=True)
class AudioBuffer:
    """Mono signal plus its sample rate. The sample array is made read-only."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"AudioBuffer expects a 1-D array, got shape {x.shape}")
        if x.flags.writeable:
            x = x.copy()
            x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def read_audio(path) -> AudioBuffer:
    """Read a PCM16 or float32 WAVE file as a mono buffer.

    Multi-channel files are downmixed by averaging channels per frame.
    PCM16 values are divided by 32768 so that -32768 maps to exactly -1.0.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise AudioFileNotFoundError(path, "no such file") from None
    except IsADirectoryError:
        raise AudioFileNotFoundError(path, "is a directory") from None

    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise CorruptFileError(path, "not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise CorruptFileError(path, "truncated fmt chunk")
            fmt = body
        elif chunk_id == b"data":
            if len(body) < size:
                log.warning("%s: data chunk truncated (%d of %d bytes)", path, len(body), size)
            data = body
            break
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise CorruptFileError(path, "missing fmt chunk")
    if data is None:
        raise CorruptFileError(path, "missing data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _FORMAT_EXTENSIBLE:
        if len(fmt) < 26:
            raise CorruptFileError(path, "truncated extensible fmt chunk")
        (tag,) = struct.unpack("<H", fmt[24:26])
    if channels < 1 or rate < 1:
        raise CorruptFileError(path, f"invalid header (channels={channels}, rate={rate})")

    if tag == _FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FORMAT_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedFormatError(path, f"unsupported codec (format tag {tag:#06x}, {bits} bits)")

    frame_bytes = dtype.itemsize * channels
    n_frames = len(data) // frame_bytes
    if n_frames == 0:
        raise CorruptFileError(path, "no audio frames")
    frames = np.frombuffer(data[:n_frames * frame_bytes], dtype=dtype).astype(np.float64)
    frames = frames.reshape(n_frames, channels) * scale
    samples = frames[:, 0] if channels == 1 else frames.mean(axis=1)
    return AudioBuffer(samples, rate)


def write_audio(path, buf: AudioBuffer, format: str = "pcm16") -> int:
    """Write ``buf`` as a mono WAVE file and return the number of clipped samples.

    Clipping only happens for ``pcm16``; ``float32`` stores values as-is.
    """
    path = Path(path)
    if len(buf) == 0:
        raise EmptySignalError()
    x = buf.samples
    clipped = 0
    if format == "pcm16":
        over = np.abs(x) > 1.0
        clipped = int(np.count_nonzero(over))
        if clipped:
            log.warning("%s: clipped %d samples outside [-1, 1]", path, clipped)
        # 1.0 must survive the round trip as 32767/32768 within one LSB
        pcm = np.clip(np.round(np.clip(x, -1.0, 1.0) * 32768.0), -32768, 32767)
        payload = pcm.astype("<i2").tobytes()
        tag, bits = _FORMAT_PCM, 16
    elif format == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _FORMAT_FLOAT, 32
    else:
        raise ValueError(f"unknown format {format!r}; expected 'pcm16' or 'float32'")

    block_align = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, buf.sample_rate,
                      buf.sample_rate * block_align, block_align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    try:
        path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    except OSError as exc:
        raise AudioFileError(path, f"cannot write: {exc.strerror or exc}") from exc
    return clipped


def resample(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited resampling with a 64-tap Hann-windowed sinc kernel.

    Output length is ``round(len(buf) * target_rate / buf.sample_rate)``.
    Kernel weights are normalised per output sample, so DC passes unchanged
    wherever the kernel is fully supported.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == buf.sample_rate:
        return buf

    x = buf.samples
    n_in = len(x)
    n_out = int(round(n_in * target_rate / buf.sample_rate))
    ratio = buf.sample_rate / target_rate
    cutoff = min(1.0, target_rate / buf.sample_rate)
    half = RESAMPLE_TAPS // 2
    offsets = np.arange(-half + 1, half + 1)

    out = np.empty(n_out)
    chunk = 16384
    for start in range(0, n_out, chunk):
        pos = np.arange(start, min(start + chunk, n_out)) * ratio
        base = np.floor(pos).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        dist = pos[:, None] - idx
        window = 0.5 + 0.5 * np.cos(np.pi * dist / half)
        window[np.abs(dist) >= half] = 0.0
        weights = cutoff * np.sinc(cutoff * dist) * window
        valid = (idx >= 0) & (idx < n_in)
        taps = np.where(valid, x[np.clip(idx, 0, n_in - 1)], 0.0)
        norm = weights.sum(axis=1)
        out[start:start + len(pos)] = (taps * weights).sum(axis=1) / norm
    return AudioBuffer(out, target_rate)


def to_canonical(buf: AudioBuffer) -> AudioBuffer:
    return resample(buf, CANONICAL_RATE)


def require_rate(buf: AudioBuffer, rate: int = CANONICAL_RATE) -> None:
    if buf.sample_rate != rate:
        raise ValueError(f"expected sample rate {rate} Hz, got {buf.sample_rate} Hz")
