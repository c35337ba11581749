"""roomeq command line: batch EQ analysis, GMM fitting, filter design,
room simulation, compensation, augmentation and splitting.

Exit status is 0 on success, 1 when the run failed (for batch commands: when
every item failed), 2 on a usage error.  Diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audio_io import AudioFileError, read_audio, to_canonical, write_audio
from .augment import AugmentConfig, build_augmented_dataset
from .compensate import batch_compensate, default_workers, parallel_map
from .dataset import Entry, Manifest, ManifestError, read_manifest, scan_directory, split_manifest
from .eq_model import DEFAULT_K, ModelError, fit_gmm, load_model, sample_eq, save_model
from .fir_design import design_eq_filter, dump_taps
from .room_sim import RoomSpec, simulate_room
from .seeding import item_rng
from .spectral import EQ_FREQUENCIES, ImpulseResponse, extract_subband_eq

log = logging.getLogger("roomeq")

SPLIT_NAMES = ("train", "dev", "test")


class CliError(Exception):
    """A failure that should end the run with exit status 1."""


# ---------------------------------------------------------------- helpers

def _floats(text: str, count: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if count is not None and len(vals) != count:
        raise argparse.ArgumentTypeError(f"expected {count} values, got {len(vals)}")
    if not all(np.isfinite(vals)):
        raise argparse.ArgumentTypeError(f"values must be finite: {text!r}")
    return vals


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _pair(text: str) -> tuple[float, float]:
    lo, hi = _floats(text, 2)
    if lo > hi:
        raise argparse.ArgumentTypeError(f"range {text!r} has low > high")
    return lo, hi


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def load_manifest(path) -> Manifest:
    """Read a manifest; relative entry paths are taken relative to its directory."""
    path = Path(path)
    try:
        m = read_manifest(path)
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror or exc}") from None
    base = path.parent
    return Manifest(tuple(
        Entry(e.id, e.path if Path(e.path).is_absolute() else str(base / e.path), e.kind, e.metadata)
        for e in m))


def _emit(text: str, output) -> None:
    if output is None or str(output) == "-":
        sys.stdout.write(text)
    else:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        Path(output).write_text(text, encoding="utf-8")


def format_eq_table(rows) -> str:
    """``rows`` is an iterable of (id, 8 gains).  Floats use shortest round-trip repr."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id"] + [f"{f:g}" for f in EQ_FREQUENCIES])
    for item_id, gains in rows:
        w.writerow([item_id] + [repr(float(g)) for g in gains])
    return buf.getvalue()


def read_eq_table(path) -> tuple[list[str], np.ndarray]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror or exc}") from None
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or len(header) != len(EQ_FREQUENCIES) + 1:
        raise CliError(f"{path}: expected a header with id and {len(EQ_FREQUENCIES)} frequencies")
    try:
        freqs = [float(h) for h in header[1:]]
    except ValueError:
        raise CliError(f"{path}: bad header {header}") from None
    if not np.allclose(freqs, EQ_FREQUENCIES):
        raise CliError(f"{path}: header frequencies {freqs} do not match {list(EQ_FREQUENCIES)}")
    ids, rows = [], []
    for lineno, rec in enumerate(reader, 2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise CliError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
        try:
            rows.append([float(v) for v in rec[1:]])
        except ValueError:
            raise CliError(f"{path}:{lineno}: non-numeric gain") from None
        ids.append(rec[0])
    return ids, np.array(rows, dtype=np.float64).reshape(-1, len(EQ_FREQUENCIES))


# ---------------------------------------------------------------- commands

def _analyze_item(entry):
    try:
        ir = ImpulseResponse(to_canonical(read_audio(entry[1])), entry[0])
        return entry[0], extract_subband_eq(ir).gains_db.tolist(), None
    except Exception as exc:
        return entry[0], None, f"{type(exc).__name__}: {exc}"


def cmd_analyze_eq(args) -> int:
    m = load_manifest(args.manifest)
    results = parallel_map(_analyze_item, [(e.id, e.path) for e in m], args.workers)
    ok = [(i, g) for i, g, err in results if err is None]
    for i, _, err in results:
        if err is not None:
            log.error("%s: %s", i, err)
    _emit(format_eq_table(ok), args.output)
    if results and not ok:
        raise CliError("no IR could be analysed")
    log.info("analysed %d of %d IRs", len(ok), len(results))
    return 0


def cmd_fit_gmm(args) -> int:
    _, x = read_eq_table(args.table)
    model = fit_gmm(x, k=args.k, seed=args.seed)
    save_model(model, args.output)
    log.info("fitted k=%d on %d EQ vectors in %d iterations; mean log-likelihood %.4f",
             model.k, len(x), len(model.log_likelihood_trace), model.log_likelihood_trace[-1])
    return 0


def cmd_sample_eq(args) -> int:
    model = load_model(args.model)
    rows = [(f"draw{i:06d}", sample_eq(model, item_rng(args.seed, f"draw{i:06d}")).gains_db)
            for i in range(args.count)]
    _emit(format_eq_table(rows), args.output)
    return 0


def cmd_design_filter(args) -> int:
    fir = design_eq_filter(args.gains)
    if fir.clamped:
        log.warning("gains clamped to +/-%g dB", fir.clamp_limit_db)
    text = dump_taps(fir)
    _emit(text, args.output)
    return 0


def _random_room(rng, t60_range):
    lo, hi = [4.0, 3.5, 2.5], [20.0, 15.0, 6.0]
    dims = rng.uniform(lo, hi)
    while not 100.0 <= np.prod(dims) <= 2000.0:
        dims = rng.uniform(lo, hi)
    margin = 0.5
    while True:
        src = rng.uniform(margin, dims - margin)
        mic = rng.uniform(margin, dims - margin)
        if np.linalg.norm(src - mic) >= 1.0:
            break
    return {"dims": dims.tolist(), "source": src.tolist(), "mic": mic.tolist(),
            "t60": float(rng.uniform(*t60_range))}


def _simulate_item(args):
    room_id, room, out_dir, seed, t60_range = args
    try:
        spec = RoomSpec.from_dict(room)
        t60 = room.get("t60")
        if t60 is None:
            t60 = float(item_rng(seed, room_id).uniform(*t60_range))
        sim = simulate_room(spec, float(t60), id=room_id)
        dest = Path(out_dir) / f"{room_id}.wav"
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_audio(dest, sim.ir.buffer, "float32")
        meta = {**spec.to_dict(), "t60_target": float(t60), "t60_measured": sim.measured_t60}
        # manifest paths are relative to the manifest's own directory
        return Entry(room_id, f"{room_id}.wav", "ir", meta), None
    except Exception as exc:
        return room_id, f"{type(exc).__name__}: {exc}"


def cmd_simulate_ir(args) -> int:
    rooms = []
    if args.rooms:
        try:
            lines = Path(args.rooms).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise CliError(f"{args.rooms}: {exc.strerror or exc}") from None
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CliError(f"{args.rooms}:{lineno}: {exc}") from None
            rooms.append((str(d.pop("id", f"room{lineno:05d}")), d))
    for i in range(args.random):
        room_id = f"sim{i:05d}"
        rooms.append((room_id, _random_room(item_rng(args.seed, room_id), args.t60_range)))
    if not rooms:
        raise CliError("nothing to simulate: give a room file or --random N")
    out_dir = Path(args.out_dir)
    items = [(rid, room, str(out_dir), args.seed, args.t60_range) for rid, room in rooms]
    results = parallel_map(_simulate_item, items, args.workers)
    entries = [r[0] for r in results if r[1] is None]
    for rid, err in results:
        if err is not None:
            log.error("%s: %s", rid, err)
    out_dir.mkdir(parents=True, exist_ok=True)
    Manifest(tuple(entries)).write(out_dir / "manifest.jsonl")
    if not entries:
        raise CliError("every simulation failed")
    return 0


def cmd_compensate(args) -> int:
    m = load_manifest(args.manifest)
    load_model(args.model)
    report = batch_compensate(m, args.model, args.out_dir, args.seed, args.workers)
    log.info("compensated %d of %d IRs; report %s", len(report.succeeded), len(report.rows),
             report.report_path)
    if report.all_failed:
        raise CliError("every IR failed")
    return 0


def cmd_augment(args) -> int:
    speech = load_manifest(args.speech)
    irs = load_manifest(args.irs)
    noises = load_manifest(args.noises) if args.noises else None
    config = AugmentConfig(snr_range=tuple(args.snr_range), snr_db=args.snr,
                           point_noises=args.point_noises, use_ambient=not args.no_ambient,
                           output_format=args.format)
    result = build_augmented_dataset(speech, irs, noises, config, args.seed, args.out_dir,
                                     args.workers)
    log.info("augmented %d of %d utterances; manifest %s", len(result.rows),
             len(result.rows) + len(result.failures), result.manifest_path)
    if result.failures and not result.rows:
        raise CliError("every utterance failed")
    return 0


def cmd_split(args) -> int:
    m = read_manifest(args.manifest)
    parts = split_manifest(m, args.counts, args.seed)
    default = list(SPLIT_NAMES) if len(parts) == 3 else [f"part{i}" for i in range(len(parts))]
    names = args.names or default
    if len(names) != len(parts):
        raise CliError(f"{len(names)} names for {len(parts)} parts")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, part in zip(names, parts):
        part.write(out_dir / f"{name}.jsonl")
        log.info("%s: %d entries", name, len(part))
    return 0


def cmd_scan(args) -> int:
    exclude = ()
    if args.exclude:
        try:
            exclude = [l.strip() for l in Path(args.exclude).read_text(encoding="utf-8").splitlines()
                       if l.strip() and not l.startswith("#")]
        except OSError as exc:
            raise CliError(f"{args.exclude}: {exc.strerror or exc}") from None
    m = scan_directory(args.root, args.kind, exclude)
    _emit(m.dumps(), args.output)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roomeq", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more diagnostics on stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.set_defaults(func=func)
        return sp

    def workers(sp):
        sp.add_argument("--workers", type=_positive_int, default=default_workers(),
                        help="parallel worker processes (default: CPU count)")

    sp = add("analyze-eq", cmd_analyze_eq, "measure the sub-band EQ of every IR in a manifest")
    sp.add_argument("manifest")
    sp.add_argument("-o", "--output", help="EQ table (CSV); stdout if omitted")
    workers(sp)

    sp = add("fit-gmm", cmd_fit_gmm, "fit a Gaussian mixture to an EQ table")
    sp.add_argument("table")
    sp.add_argument("-o", "--output", required=True, help="model file (JSON)")
    sp.add_argument("--k", type=_positive_int, default=DEFAULT_K)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("sample-eq", cmd_sample_eq, "draw EQ vectors from a fitted model")
    sp.add_argument("model")
    sp.add_argument("--count", type=_positive_int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("-o", "--output", help="EQ table (CSV); stdout if omitted")

    sp = add("design-filter", cmd_design_filter, "design a 511-tap EQ filter and dump its taps")
    sp.add_argument("--gains", type=lambda s: _floats(s, len(EQ_FREQUENCIES)), required=True,
                    help="8 comma-separated dB gains, 62.5 Hz to 8 kHz")
    sp.add_argument("-o", "--output", help="tap file; stdout if omitted")

    sp = add("simulate-ir", cmd_simulate_ir, "simulate shoebox-room IRs")
    sp.add_argument("rooms", nargs="?", help="JSON-lines room specs "
                    "({id, dims, source, mic, t60?})")
    sp.add_argument("--random", type=int, default=0, metavar="N",
                    help="also simulate N randomly drawn rooms")
    sp.add_argument("--t60-range", type=_pair, default=(0.2, 2.0),
                    help="T60 range in seconds for rooms without t60 (default 0.2,2.0)")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int, default=0)
    workers(sp)

    sp = add("compensate", cmd_compensate, "EQ-compensate simulated IRs against a model")
    sp.add_argument("manifest")
    sp.add_argument("model")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int, default=0)
    workers(sp)

    sp = add("augment", cmd_augment, "build a reverberant, noisy copy of a speech corpus")
    sp.add_argument("--speech", required=True, help="speech manifest")
    sp.add_argument("--irs", required=True, help="IR manifest")
    sp.add_argument("--noises", help="noise manifest")
    sp.add_argument("--snr-range", type=_pair, default=(5.0, 25.0), help="default 5,25 dB")
    sp.add_argument("--snr", type=float, help="fixed SNR in dB (overrides --snr-range)")
    sp.add_argument("--point-noises", type=int, default=0,
                    help="noise sources convolved with an IR, per utterance")
    sp.add_argument("--no-ambient", action="store_true", help="no unconvolved ambient noise")
    sp.add_argument("--format", choices=("pcm16", "float32"), default="pcm16")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int, default=0)
    workers(sp)

    sp = add("split", cmd_split, "seeded train/dev/test split of a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--counts", type=_ints, required=True, help="e.g. 773,194,242")
    sp.add_argument("--names", type=lambda s: s.split(","), help="output names (default train,dev,test)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", required=True)

    sp = add("scan", cmd_scan, "build a manifest from a directory of WAVE files")
    sp.add_argument("root")
    sp.add_argument("--kind", choices=("speech", "ir", "noise"), required=True)
    sp.add_argument("--exclude", help="file listing ids to leave out, one per line")
    sp.add_argument("-o", "--output", help="manifest file; stdout if omitted")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="roomeq: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ManifestError, ModelError, AudioFileError, ValueError, OSError) as exc:
        print(f"roomeq {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
