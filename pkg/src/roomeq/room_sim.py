"""Shoebox image-source IR generator with absorption chosen for a target T60.

This is a stand-in for a full geometric-acoustics engine: specular
reflections only, one frequency-independent absorption coefficient shared by
all six walls.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .audio_io import CANONICAL_RATE, AudioBuffer
from .spectral import ImpulseResponse, estimate_t60

log = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
MIN_VOLUME = 100.0
MAX_VOLUME = 2000.0
MAX_ABSORPTION = 0.99
T60_RANGE = (0.1, 4.0)


class RoomWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple
    source: tuple
    mic: tuple
    absorption: float = 0.5
    speed_of_sound: float = SPEED_OF_SOUND
    warnings: tuple = field(default=(), compare=False)

    def __post_init__(self):
        dims = tuple(float(v) for v in self.dims)
        src = tuple(float(v) for v in self.source)
        mic = tuple(float(v) for v in self.mic)
        if len(dims) != 3 or len(src) != 3 or len(mic) != 3:
            raise ValueError("dims, source and mic must all have three coordinates")
        if min(dims) <= 0:
            raise ValueError(f"room dimensions must be positive, got {dims}")
        for name, p in (("source", src), ("mic", mic)):
            if not all(0.0 < c < d for c, d in zip(p, dims)):
                raise ValueError(f"{name} {p} is not strictly inside room {dims}")
        if not 0.0 < self.absorption <= 1.0:
            raise ValueError(f"absorption must be in (0, 1], got {self.absorption}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "mic", mic)
        notes = list(self.warnings)
        if not MIN_VOLUME <= self.volume <= MAX_VOLUME:
            msg = (f"room volume {self.volume:.1f} m^3 outside "
                   f"[{MIN_VOLUME:g}, {MAX_VOLUME:g}] m^3")
            if msg not in notes:
                notes.append(msg)
                log.info(msg)
        object.__setattr__(self, "warnings", tuple(notes))

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dims
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    @property
    def distance(self) -> float:
        return math.dist(self.source, self.mic)

    def with_absorption(self, absorption: float) -> RoomSpec:
        return RoomSpec(self.dims, self.source, self.mic, absorption,
                        self.speed_of_sound, self.warnings)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "source": list(self.source), "mic": list(self.mic),
                "absorption": self.absorption, "speed_of_sound": self.speed_of_sound}

    @classmethod
    def from_dict(cls, d: dict) -> RoomSpec:
        return cls(tuple(d["dims"]), tuple(d["source"]), tuple(d["mic"]),
                   float(d.get("absorption", 0.5)),
                   float(d.get("speed_of_sound", SPEED_OF_SOUND)))


def sabine_absorption(dims, target_t60: float) -> float:
    lx, ly, lz = dims
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    return 0.161 * volume / (surface * target_t60)


def absorption_for_t60(dims, target_t60: float) -> float:
    """Eyring inversion: alpha = 1 - exp(-0.161 V / (S T60)), clamped to (0, 0.99]."""
    lo, hi = T60_RANGE
    if not lo <= target_t60 <= hi:
        raise ValueError(f"target T60 {target_t60} s outside [{lo}, {hi}] s")
    sabine = sabine_absorption(dims, target_t60)
    alpha = -math.expm1(-sabine)
    log.debug("T60 %.3f s: Sabine alpha %.4f, Eyring alpha %.4f", target_t60, sabine, alpha)
    if alpha > MAX_ABSORPTION:
        warnings.warn(f"absorption {alpha:.4f} for T60 {target_t60} s clamped to "
                      f"{MAX_ABSORPTION}", RoomWarning, stacklevel=2)
        alpha = MAX_ABSORPTION
    return max(alpha, np.finfo(float).tiny)


def _axis_images(n_max, src, mic, length):
    """Per-axis image offsets: (image - mic) coordinate and wall-hit count."""
    n = np.arange(-n_max, n_max + 1)
    offsets = []
    hits = []
    for q in (0, 1):
        offsets.append((1 - 2 * q) * src + 2.0 * n * length - mic)
        hits.append(np.abs(n - q) + np.abs(n))
    return np.concatenate(offsets), np.concatenate(hits)


def image_sources(spec: RoomSpec, max_distance: float):
    """Distances and reflection orders of every image closer than ``max_distance``.

    Images come out in lexicographic (x, y, z) index order.
    """
    per_axis = []
    for axis in range(3):
        n_max = int(math.ceil(max_distance / (2.0 * spec.dims[axis]))) + 1
        per_axis.append(_axis_images(n_max, spec.source[axis], spec.mic[axis], spec.dims[axis]))
    (dx, hx), (dy, hy), (dz, hz) = per_axis

    dyz2 = dy[:, None] ** 2 + dz[None, :] ** 2
    hyz = hy[:, None] + hz[None, :]
    lim2 = max_distance ** 2
    dists, orders = [], []
    for x, h in zip(dx, hx):
        d2 = x * x + dyz2
        keep = d2 < lim2
        if keep.any():
            dists.append(np.sqrt(d2[keep]))
            orders.append(h + hyz[keep])
    if not dists:
        return np.empty(0), np.empty(0, dtype=np.int64)
    return np.concatenate(dists), np.concatenate(orders)


@dataclass(frozen=True)
class Simulation:
    ir: ImpulseResponse
    spec: RoomSpec
    eyring_absorption: float | None
    measured_t60: float | None


def _render(dist, order, absorption, delay_samples, n_samples):
    amp = np.power(math.sqrt(1.0 - absorption), order) / (4.0 * np.pi * dist)
    idx = np.rint(delay_samples).astype(np.int64)
    keep = idx < n_samples
    return np.bincount(idx[keep], weights=amp[keep], minlength=n_samples)


def simulate_room(spec: RoomSpec, target_t60: float | None = None,
                  max_length: float | None = None, sample_rate: int = CANONICAL_RATE,
                  id: str = "", calibrate: bool = True, tol: float = 0.01,
                  max_iter: int = 8) -> Simulation:
    """Image-source impulse response of a rectangular room.

    Each image contributes ``sqrt(1 - alpha) ** order / (4 pi d)`` at the
    sample nearest to ``d / c``.  With ``target_t60`` the Eyring absorption
    is the starting point; when ``calibrate`` is set it is then rescaled
    (in ``-ln(1 - alpha)``) until the Schroeder T60 of the rendered IR is
    within ``tol`` of the target, since shoebox image decays run longer than
    the diffuse-field formula predicts.
    """
    if max_length is None:
        max_length = 1.2 * target_t60 if target_t60 is not None else 1.0
    if target_t60 is not None and max_length < 1.2 * target_t60 - 1e-12:
        raise ValueError(f"max_length {max_length} s shorter than 1.2 x T60 ({1.2 * target_t60:g} s)")
    if spec.distance < 0.01:
        raise ValueError("source and mic coincide (distance < 1 cm)")

    c = spec.speed_of_sound
    n_samples = int(math.ceil(max_length * sample_rate))
    dist, order = image_sources(spec, max_length * c)
    delay = dist / c * sample_rate
    # stable sort on delay keeps lexicographic image order for ties
    perm = np.argsort(delay, kind="stable")
    dist, order, delay = dist[perm], order[perm], delay[perm]

    eyring = None
    measured = None
    alpha = spec.absorption
    if target_t60 is not None:
        eyring = alpha = absorption_for_t60(spec.dims, target_t60)
        if calibrate:
            strength = -math.log1p(-alpha)
            for _ in range(max_iter):
                h = _render(dist, order, alpha, delay, n_samples)
                measured = estimate_t60(ImpulseResponse.from_array(h, sample_rate))
                if abs(measured / target_t60 - 1.0) < tol or (
                        alpha >= MAX_ABSORPTION and measured > target_t60):
                    break
                strength *= measured / target_t60
                alpha = min(-math.expm1(-strength), MAX_ABSORPTION)
            log.debug("calibrated absorption %.4f (Eyring %.4f), T60 %.3f s",
                      alpha, eyring, measured)
        spec = spec.with_absorption(alpha)

    h = _render(dist, order, alpha, delay, n_samples)
    return Simulation(ImpulseResponse(AudioBuffer(h, sample_rate), id), spec, eyring, measured)


def simulate_shoebox_ir(spec: RoomSpec, target_t60: float | None = None,
                        max_length: float | None = None,
                        sample_rate: int = CANONICAL_RATE, id: str = "",
                        calibrate: bool = True) -> ImpulseResponse:
    return simulate_room(spec, target_t60, max_length, sample_rate, id, calibrate).ir
