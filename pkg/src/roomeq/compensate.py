"""EQ compensation of simulated IRs against a fitted EQ mixture.

For each IR: measure its sub-band EQ, draw a target EQ from the model,
design the filter for the difference and convolve.  Batch runs derive one
seed per IR from the master seed, so the output does not depend on the
number of workers or the order in which items finish.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import read_audio, require_rate, to_canonical, write_audio
from .dataset import Entry, Manifest
from .eq_model import EqGmm, load_model, sample_eq
from .fir_design import apply_fir, design_eq_filter
from .seeding import item_rng, item_seed
from .spectral import FREE_INDICES, ImpulseResponse, SubBandEq, extract_subband_eq

log = logging.getLogger(__name__)

REPORT_NAME = "report.jsonl"
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class CompensationRecord:
    ir_id: str
    original_eq: SubBandEq
    target_eq: SubBandEq
    gain_diff: np.ndarray
    achieved_eq: SubBandEq
    seed: int
    clamped: bool = False
    filter_gains: np.ndarray | None = None
    evaluations: int = 1

    def to_dict(self) -> dict:
        return {
            "ir_id": self.ir_id,
            "original_eq": self.original_eq.gains_db.tolist(),
            "target_eq": self.target_eq.gains_db.tolist(),
            "gain_diff": np.asarray(self.gain_diff).tolist(),
            "achieved_eq": self.achieved_eq.gains_db.tolist(),
            "seed": self.seed,
            "clamped": self.clamped,
            "filter_gains": None if self.filter_gains is None else
            np.asarray(self.filter_gains).tolist(),
            "evaluations": self.evaluations,
        }


def _measure(ir: ImpulseResponse, request):
    fir = design_eq_filter(request)
    out = ImpulseResponse(apply_fir(ir.buffer, fir, trim_delay=True), ir.id)
    return fir, out, extract_subband_eq(out).gains_db


def compensate_ir(ir: ImpulseResponse, model: EqGmm, seed: int,
                  max_evals: int = 24, tol_db: float = 0.05):
    """Return the compensated IR and its ``CompensationRecord``.

    The first filter is designed for ``target - original``.  A long IR and
    the bare filter are smoothed differently by the analysis window, mostly
    at the lowest bands, so the design gains are then corrected in closed
    loop: a finite-difference Jacobian of achieved vs. requested EQ, Newton
    steps with halving, Broyden updates.  At most ``max_evals`` filters are
    designed; the one closest to the target is kept.  The output keeps the
    input's direct-path timing and is ``len(ir) + 255`` samples long.
    """
    require_rate(ir.buffer)
    target = sample_eq(model, item_rng(seed, ir.id))
    original = extract_subband_eq(ir)
    goal = target.gains_db
    diff = goal - original.gains_db

    free = list(FREE_INDICES)
    request = diff.copy()
    fir, out, achieved = _measure(ir, request)
    err = achieved - goal
    evals = 1
    best = (np.max(np.abs(err)), fir, out, achieved)
    jac = None
    while best[0] >= tol_db and evals < max_evals:
        if jac is None:
            jac = np.empty((len(free), len(free)))
            for j, f in enumerate(free):
                probe = request.copy()
                probe[f] += 1.0
                jac[:, j] = (_measure(ir, probe)[2] - achieved)[free]
            evals += len(free)
        step = np.zeros_like(request)
        step[free] = np.linalg.lstsq(jac, err[free], rcond=None)[0]
        t = 1.0
        while True:
            trial = request - t * step
            t_fir, t_out, t_ach = _measure(ir, trial)
            evals += 1
            t_err = t_ach - goal
            if np.max(np.abs(t_err)) < np.max(np.abs(err)) or t < 0.2 or evals >= max_evals:
                break
            t *= 0.5
        dx = (trial - request)[free]
        dy = (t_ach - achieved)[free]
        if dx @ dx > 0:
            jac += np.outer(dy - jac @ dx, dx) / (dx @ dx)
        request, achieved, err = trial, t_ach, t_err
        if np.max(np.abs(err)) < best[0]:
            best = (np.max(np.abs(err)), t_fir, t_out, t_ach)

    _, fir, out, achieved = best
    if fir.clamped:
        log.warning("%s: filter gains clamped to +/-%g dB", ir.id, fir.clamp_limit_db)
    record = CompensationRecord(ir.id, original, target, diff, SubBandEq(achieved), int(seed),
                                fir.clamped, fir.design_gains_db.copy(), evals)
    return out, record


def output_path_for(out_dir: Path, item_id: str) -> Path:
    """``out_dir/<item_id>.wav``, kept inside ``out_dir`` whatever the id looks like."""
    rel = Path(item_id)
    if rel.is_absolute() or ".." in rel.parts:
        rel = Path(item_id.replace("/", "_").replace("\\", "_").lstrip("."))
    if rel.suffix.lower() != ".wav":
        rel = rel.with_name(rel.name + ".wav")
    return out_dir / rel


def _compensate_item(args):
    entry_id, src, model_path, out_dir, master_seed = args
    seed = item_seed(master_seed, entry_id)
    try:
        model = load_model(model_path)
        buf = to_canonical(read_audio(src))
        ir = ImpulseResponse(buf, entry_id)
        out, record = compensate_ir(ir, model, seed)
        dest = output_path_for(Path(out_dir), entry_id)
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_audio(dest, out.buffer, "float32")
        row = record.to_dict()
        # relative to out_dir, so reports do not depend on where they were written
        row["output_path"] = dest.relative_to(out_dir).as_posix()
        row["status"] = "ok"
        return row
    except Exception as exc:  # per-item failures are reported, not raised
        return {"ir_id": entry_id, "seed": seed, "status": "failed",
                "error": f"{type(exc).__name__}: {exc}"}


@dataclass
class BatchReport:
    rows: list
    report_path: Path

    @property
    def failures(self) -> list:
        return [r for r in self.rows if r["status"] != "ok"]

    @property
    def succeeded(self) -> list:
        return [r for r in self.rows if r["status"] == "ok"]

    @property
    def all_failed(self) -> bool:
        return bool(self.rows) and not self.succeeded


def default_workers() -> int:
    return os.cpu_count() or 1


def parallel_map(fn, items, workers):
    """Order-preserving map; runs inline for a single worker."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=1))


def batch_compensate(ir_manifest: Manifest, model_path, out_dir, master_seed: int,
                     workers: int | None = None) -> BatchReport:
    """Compensate every IR in the manifest.

    ``out_dir`` receives the compensated IRs, ``report.jsonl`` with one
    record per input and ``manifest.jsonl`` listing the successful outputs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    load_model(model_path)
    items = [(e.id, e.path, str(model_path), str(out_dir), int(master_seed))
             for e in ir_manifest]
    rows = parallel_map(_compensate_item, items, workers or default_workers())
    for r in rows:
        if r["status"] != "ok":
            log.error("%s: %s", r["ir_id"], r["error"])
    report_path = out_dir / REPORT_NAME
    report_path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    Manifest(tuple(Entry(r["ir_id"], r["output_path"], "ir") for r in rows
                   if r["status"] == "ok")).write(out_dir / MANIFEST_NAME)
    return BatchReport(rows, report_path)
