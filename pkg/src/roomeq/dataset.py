"""Corpus bookkeeping: JSON-lines manifests, directory scans and seeded splits."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("speech", "ir", "noise")

# default train/dev/test IR counts
DEFAULT_SPLIT = (773, 194, 242)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Entry:
    id: str
    path: str
    kind: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ManifestError(f"entry {self.id!r}: kind must be one of {KINDS}, got {self.kind!r}")

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "path": self.path, "kind": self.kind,
                           "metadata": self.metadata}, ensure_ascii=False)


@dataclass(frozen=True)
class Manifest:
    entries: tuple = ()

    def __post_init__(self):
        entries = tuple(self.entries)
        ids = [e.id for e in entries]
        paths = [e.path for e in entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate ids in manifest: {dup[:5]}")
        if len(set(paths)) != len(paths):
            raise ManifestError("duplicate paths in manifest")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def by_id(self, item_id: str) -> Entry:
        for e in self.entries:
            if e.id == item_id:
                return e
        raise KeyError(item_id)

    def resolve(self, entry: Entry, base=None) -> Path:
        p = Path(entry.path)
        if p.is_absolute() or base is None:
            return p
        return Path(base) / p

    def dumps(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.entries)

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def loads_manifest(text: str) -> Manifest:
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            entries.append(Entry(str(d["id"]), str(d["path"]), d["kind"], d.get("metadata", {})))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"line {lineno}: malformed manifest record ({exc})") from None
    return Manifest(tuple(entries))


def read_manifest(path) -> Manifest:
    try:
        return loads_manifest(Path(path).read_text(encoding="utf-8"))
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def _is_wave(path: Path) -> bool:
    try:
        with open(path, "rb") as fh:
            head = fh.read(12)
    except OSError:
        return False
    return len(head) == 12 and head[:4] == b"RIFF" and head[8:12] == b"WAVE"


def scan_directory(root, kind: str, exclude=()) -> Manifest:
    """Recursively collect WAVE files under ``root``.

    Files are recognised by their RIFF/WAVE header, not their extension.
    ``id`` is the POSIX path relative to ``root``; entries are sorted by it.
    Ids listed in ``exclude`` are dropped.
    """
    root = Path(root)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise ManifestError(f"{root}: not a readable directory")
    excluded = set(exclude)
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in filenames:
            p = Path(dirpath) / name
            rel = p.relative_to(root).as_posix()
            if rel in excluded or not _is_wave(p):
                continue
            found.append(rel)
    found.sort()
    return Manifest(tuple(Entry(rel, str(root / rel), kind) for rel in found))


def split_manifest(m: Manifest, counts, seed: int) -> tuple[Manifest, ...]:
    """Shuffle with ``seed`` and cut into consecutive pieces of the given sizes."""
    counts = tuple(int(c) for c in counts)
    if any(c < 0 for c in counts) or sum(counts) != len(m):
        raise ManifestError(f"split counts {counts} sum to {sum(counts)}, "
                            f"manifest has {len(m)} entries")
    order = np.random.default_rng(seed).permutation(len(m))
    parts = []
    start = 0
    for c in counts:
        parts.append(Manifest(tuple(m.entries[i] for i in order[start:start + c])))
        start += c
    return tuple(parts)
