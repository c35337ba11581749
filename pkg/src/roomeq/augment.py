"""Far-field speech augmentation.

    x_r = align(x * h_s) + sum_i (n_i * h_i) + d

The reverberant speech is advanced by the IR's direct-path delay so that it
starts where the clean utterance starts, and every output has exactly the
clean utterance's length.  The combined noise term is scaled to the requested
SNR against the aligned reverberant speech.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audio_io import AudioBuffer, EmptySignalError, read_audio, require_rate, to_canonical, write_audio
from .compensate import default_workers, output_path_for, parallel_map
from .dataset import Manifest
from .seeding import item_seed
from .spectral import ImpulseResponse

log = logging.getLogger(__name__)

PEAK_TARGET = 0.95
MANIFEST_NAME = "manifest.jsonl"


class SilentNoiseError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationSpec:
    speech: AudioBuffer
    speech_ir: ImpulseResponse
    point_noises: tuple = ()
    ambient: AudioBuffer | None = None
    snr_db: float | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.speech) == 0:
            raise EmptySignalError("empty speech signal")
        if self.snr_db is not None and not np.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")
        object.__setattr__(self, "point_noises", tuple(self.point_noises))


@dataclass(frozen=True)
class AugmentResult:
    audio: AudioBuffer
    reverberant: np.ndarray
    noise: np.ndarray
    noise_scale: float
    scale: float
    direct_index: int
    snr_db: float | None


def detect_direct_path(ir: ImpulseResponse) -> int:
    """Index of the largest absolute sample."""
    return int(np.argmax(np.abs(ir.samples)))


def align_convolved(speech_len: int, convolved: AudioBuffer, direct_idx: int) -> AudioBuffer:
    """Drop the first ``direct_idx`` samples, then cut or zero-pad to ``speech_len``."""
    x = convolved.samples
    if not 0 <= direct_idx < len(x):
        raise ValueError(f"direct index {direct_idx} outside signal of length {len(x)}")
    y = x[direct_idx:direct_idx + speech_len]
    if len(y) < speech_len:
        y = np.concatenate([y, np.zeros(speech_len - len(y))])
    return AudioBuffer(y, convolved.sample_rate)


def fit_length(noise: np.ndarray, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Loop or crop ``noise`` to ``n`` samples, starting at a seeded offset."""
    noise = np.asarray(noise, dtype=np.float64)
    if len(noise) == 0:
        raise EmptySignalError("empty noise signal")
    if len(noise) >= n:
        offset = int(rng.integers(len(noise) - n + 1)) if rng is not None else 0
        return noise[offset:offset + n]
    offset = int(rng.integers(len(noise))) if rng is not None else 0
    reps = -(-(n + offset) // len(noise))
    return np.tile(noise, reps)[offset:offset + n]


def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def noise_scale_for_snr(signal, noise, snr_db: float) -> float:
    """Gain for ``noise`` so that 10 log10(P_signal / P_scaled_noise) == snr_db."""
    p_noise = power(noise)
    if p_noise == 0.0:
        raise SilentNoiseError("noise has zero power; cannot mix at a given SNR")
    return float(np.sqrt(power(signal) / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(signal: AudioBuffer, noise: AudioBuffer, snr_db: float) -> AudioBuffer:
    if len(signal) == 0 or len(noise) == 0:
        raise EmptySignalError()
    n = fit_length(noise.samples, len(signal))
    gain = noise_scale_for_snr(signal.samples, n, snr_db)
    return AudioBuffer(signal.samples + gain * n, signal.sample_rate)


def _convolve(x, h):
    # trailing zeros add nothing; trimming keeps short IRs on the exact path
    nz = np.flatnonzero(h)
    h = h[:nz[-1] + 1] if len(nz) else h[:1]
    return fftconvolve(x, h) if min(len(x), len(h)) > 64 else np.convolve(x, h)


def augment_utterance(spec: AugmentationSpec) -> AudioBuffer:
    """Augmented utterance, same length as the clean speech."""
    return augment_components(spec).audio


def augment_components(spec: AugmentationSpec) -> AugmentResult:
    """Like ``augment_utterance`` but also returns the addends and gains."""
    speech = spec.speech
    require_rate(speech)
    require_rate(spec.speech_ir.buffer)
    n = len(speech)
    rng = np.random.default_rng(spec.seed)

    direct = detect_direct_path(spec.speech_ir)
    wet = AudioBuffer(_convolve(speech.samples, spec.speech_ir.samples), speech.sample_rate)
    reverberant = align_convolved(n, wet, direct).samples

    noise = np.zeros(n)
    has_noise = False
    for src, ir in spec.point_noises:
        require_rate(ir.buffer)
        noise += _convolve(fit_length(src.samples, n, rng), ir.samples)[:n]
        has_noise = True
    if spec.ambient is not None:
        noise += fit_length(spec.ambient.samples, n, rng)
        has_noise = True

    gain = 0.0
    snr = spec.snr_db
    if has_noise and snr is not None:
        gain = noise_scale_for_snr(reverberant, noise, snr)
    elif snr is not None:
        log.info("no noise sources given; SNR %.2f dB ignored", snr)
        snr = None
    elif has_noise:
        gain = 1.0

    noise = gain * noise
    out = reverberant + noise
    peak = float(np.max(np.abs(out)))
    scale = PEAK_TARGET / peak if peak > 1.0 else 1.0
    if scale != 1.0:
        out = out * scale
    return AugmentResult(AudioBuffer(out, speech.sample_rate), reverberant, noise,
                         gain, scale, direct, snr)


@dataclass(frozen=True)
class AugmentConfig:
    snr_range: tuple = (5.0, 25.0)
    snr_db: float | None = None
    point_noises: int = 0
    use_ambient: bool = True
    output_format: str = "pcm16"


@lru_cache(maxsize=64)
def _load_canonical(path: str) -> AudioBuffer:
    return to_canonical(read_audio(path))


def _augment_item(args):
    utt, irs, noises, config, master_seed, out_dir = args
    seed = item_seed(master_seed, utt[0])
    try:
        rng = np.random.default_rng(seed)
        ir_id, ir_path = irs[int(rng.integers(len(irs)))]
        snr = config.snr_db if config.snr_db is not None else float(rng.uniform(*config.snr_range))
        point, noise_ids = [], []
        if noises:
            for _ in range(config.point_noises):
                nid, npath = noises[int(rng.integers(len(noises)))]
                hid, hpath = irs[int(rng.integers(len(irs)))]
                point.append((_load_canonical(npath), ImpulseResponse(_load_canonical(hpath), hid)))
                noise_ids.append(nid)
            ambient = None
            if config.use_ambient:
                nid, npath = noises[int(rng.integers(len(noises)))]
                ambient = _load_canonical(npath)
                noise_ids.append(nid)
        else:
            ambient = None
        speech = _load_canonical(utt[1])
        ir = ImpulseResponse(_load_canonical(ir_path), ir_id)
        spec = AugmentationSpec(speech, ir, tuple(point), ambient,
                                snr if (point or ambient is not None) else None,
                                int(rng.integers(2**63)))
        res = augment_components(spec)
        dest = output_path_for(Path(out_dir), utt[0])
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_audio(dest, res.audio, config.output_format)
        return {"utterance_id": utt[0], "source_path": utt[1], "ir_id": ir_id,
                "noise_ids": noise_ids, "snr_db": res.snr_db, "seed": seed,
                "scale": res.scale, "output_path": dest.relative_to(out_dir).as_posix(),
                "duration_samples": len(res.audio)}
    except Exception as exc:  # per-item failures are logged, the run goes on
        return {"utterance_id": utt[0], "error": f"{type(exc).__name__}: {exc}"}


@dataclass
class DatasetResult:
    rows: list
    failures: list = field(default_factory=list)
    manifest_path: Path | None = None


def build_augmented_dataset(speech_manifest: Manifest, ir_manifest: Manifest,
                            noise_manifest: Manifest | None, config: AugmentConfig,
                            master_seed: int, out_dir, workers: int | None = None) -> DatasetResult:
    """Augment every utterance and write ``manifest.jsonl`` next to the outputs.

    Each utterance gets its own seed ``item_seed(master_seed, utterance_id)``
    which picks the IR, the noises, their offsets and the SNR.
    """
    if len(ir_manifest) == 0:
        raise ValueError("IR manifest is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    irs = tuple((e.id, e.path) for e in ir_manifest)
    noises = tuple((e.id, e.path) for e in noise_manifest) if noise_manifest else ()
    items = [((e.id, e.path), irs, noises, config, int(master_seed), str(out_dir))
             for e in speech_manifest]
    results = parallel_map(_augment_item, items, workers or default_workers())
    rows = [r for r in results if "error" not in r]
    failures = [r for r in results if "error" in r]
    for f in failures:
        log.error("%s: %s", f["utterance_id"], f["error"])
    path = out_dir / MANIFEST_NAME
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return DatasetResult(rows, failures, path)
