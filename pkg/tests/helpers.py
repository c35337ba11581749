"""Shared builders for the test suite."""
import json
import struct
from pathlib import Path

import numpy as np

from roomeq.audio_io import AudioBuffer, write_audio
from roomeq.room_sim import RoomSpec, simulate_room
from roomeq.spectral import ImpulseResponse

FS = 16000


def random_room(rng, margin=0.5, min_distance=1.0, dims=None):
    """Random shoebox with source and mic at least ``margin`` from every wall."""
    if dims is None:
        dims = rng.uniform([4.0, 3.5, 2.5], [9.0, 7.0, 3.5])
    dims = np.asarray(dims, dtype=float)
    while True:
        src = rng.uniform(margin, dims - margin)
        mic = rng.uniform(margin, dims - margin)
        if np.linalg.norm(src - mic) >= min_distance:
            return RoomSpec(tuple(dims), tuple(src), tuple(mic))


def random_ir(rng, t60_range=(0.3, 0.8), id=""):
    spec = random_room(rng)
    return simulate_room(spec, float(rng.uniform(*t60_range)), id=id).ir


def impulse(n=512, at=0, amp=1.0, id=""):
    h = np.zeros(n)
    h[at] = amp
    return ImpulseResponse.from_array(h, id=id)


def wav_bytes(samples, rate=FS, channels=1, fmt="pcm16", extensible=False, extra_chunk=None):
    """Build a RIFF/WAVE file by hand (independent of the package writer)."""
    x = np.asarray(samples)
    if fmt == "pcm16":
        tag, width, data = 1, 2, x.astype("<i2").tobytes()
    elif fmt == "float32":
        tag, width, data = 3, 4, x.astype("<f4").tobytes()
    else:
        raise ValueError(fmt)
    block = channels * width
    if extensible:
        guid = struct.pack("<H", tag) + b"\x00\x00\x00\x00\x10\x00\x80\x00\x00\xaa\x00\x38\x9b\x71"
        fmt_body = struct.pack("<HHIIHHHHI", 0xFFFE, channels, rate, rate * block, block,
                               8 * width, 22, 8 * width, 0) + guid
    else:
        fmt_body = struct.pack("<HHIIHH", tag, channels, rate, rate * block, block, 8 * width)
    chunks = b"fmt " + struct.pack("<I", len(fmt_body)) + fmt_body
    if extra_chunk is not None:
        pad = b"\x00" if len(extra_chunk) % 2 else b""
        chunks += b"LIST" + struct.pack("<I", len(extra_chunk)) + extra_chunk + pad
    chunks += b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


def write_manifest(path, entries):
    Path(path).write_text("".join(json.dumps(e) + "\n" for e in entries), encoding="utf-8")


def make_ir_corpus(root, count, seed=0, t60_range=(0.3, 0.6)):
    """Simulated IRs written as float32 WAVE plus a manifest; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        ir = random_ir(rng, t60_range, id=f"ir{i:03d}")
        write_audio(root / f"ir{i:03d}.wav", ir.buffer, "float32")
        entries.append({"id": f"ir{i:03d}", "path": f"ir{i:03d}.wav", "kind": "ir"})
    write_manifest(root / "manifest.jsonl", entries)
    return root / "manifest.jsonl"


def make_speech_corpus(root, count, seed=0, base_len=4000, kind="speech", prefix="utt"):
    """Band-limited noise bursts standing in for speech."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        n = base_len + int(rng.integers(0, base_len))
        x = np.convolve(rng.standard_normal(n), np.hanning(9), "same")
        x *= 0.2 / np.max(np.abs(x))
        name = f"{prefix}{i:03d}"
        write_audio(root / f"{name}.wav", AudioBuffer(x, FS), "float32")
        entries.append({"id": name, "path": f"{name}.wav", "kind": kind})
    write_manifest(root / "manifest.jsonl", entries)
    return root / "manifest.jsonl"
