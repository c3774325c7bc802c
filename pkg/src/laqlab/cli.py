"""Command-line entry point.

::

    laqlab run <config.json>
    laqlab pack <ckpt> [-o OUT]
    laqlab unpack <ckpt> [-o OUT]
    laqlab bench-gemv <ckpt> [--repeats N] [--tiles 64,128,256]

Runs write into ``$LAQLAB_OUTPUT_ROOT/<output_dir>`` (default root
``./runs``). Exit status: 0 success, 1 invalid config or arguments,
2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import traceback
from pathlib import Path

import torch

from laqlab import __version__
from laqlab import checkpoint as ckpt_io
from laqlab import experiments as ex

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("laqlab")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    if hasattr(value, "item"):
        return _fmt(value.item())
    return str(value)


def csv_bytes(rows: list[dict], header: list[str] | None = None) -> bytes:
    """RFC 4180 CSV: CRLF line ends, minimal quoting, fixed header row."""
    if header is None:
        header = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(header)
    for row in rows:
        missing = [h for h in header if h not in row]
        if missing:
            raise KeyError(f"row is missing columns {missing}")
        w.writerow([_fmt(row[h]) for h in header])
    return buf.getvalue().encode("utf-8")


def write_csv(path: Path, rows: list[dict], header: list[str] | None = None) -> str:
    data = csv_bytes(rows, header)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _input_hash(cfg: ex.ExperimentConfig) -> str:
    h = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    for key in ("checkpoint",):
        path = cfg.options.get(key)
        if path and Path(path).exists():
            h.update(Path(path).read_bytes())
    if cfg.teacher.checkpoint and Path(cfg.teacher.checkpoint).exists():
        h.update(Path(cfg.teacher.checkpoint).read_bytes())
    return h.hexdigest()


def run_config(path) -> int:
    try:
        cfg = ex.load_config(path)
    except ex.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    name = cfg.output_dir or Path(path).stem
    out = ex.output_root() / name
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "laqlab_version": __version__,
        "config": cfg.to_dict(),
        "input_sha256": _input_hash(cfg),
        "status": "running",
        "outputs": {},
    }
    torch.set_num_threads(cfg.workers)
    status = EXIT_OK
    try:
        teacher = ex.teacher_for(cfg) if cfg.kind in ex.NEEDS_TEACHER else None
        tables = ex.RUNNERS[cfg.kind](cfg, out, teacher)
        for fname, rows in tables.items():
            manifest["outputs"][fname] = write_csv(out / fname, rows)
        manifest["status"] = "ok"
    except ex.ConfigError as e:
        manifest.update(status="error", error=f"config error: {e}")
        print(f"config error: {e}", file=sys.stderr)
        status = EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - every failure must land in the manifest
        manifest.update(status="error", error=f"{type(e).__name__}: {e}", traceback=traceback.format_exc())
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        status = EXIT_RUNTIME
    for p in sorted(out.glob("*.laq")):
        manifest["outputs"][p.name] = _sha256_file(p)
    manifest["outputs"] = dict(sorted(manifest["outputs"].items()))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if status == EXIT_OK:
        print(out)
    return status


def _default_out(src: Path, suffix: str) -> Path:
    return src.with_name(src.stem + suffix + src.suffix)


def cmd_pack(args) -> int:
    src = Path(args.ckpt)
    ck = ckpt_io.read_checkpoint(src)
    packed = ckpt_io.pack_checkpoint(ck)
    dst = Path(args.output) if args.output else _default_out(src, ".packed")
    ckpt_io.write_checkpoint(packed, dst)
    print(dst)
    return EXIT_OK


def cmd_unpack(args) -> int:
    src = Path(args.ckpt)
    ck = ckpt_io.unpack_checkpoint(ckpt_io.read_checkpoint(src))
    dst = Path(args.output) if args.output else _default_out(src, ".unpacked")
    ckpt_io.write_checkpoint(ck, dst)
    print(dst)
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        tiles = tuple(int(t) for t in args.tiles.split(","))
    except ValueError:
        print(f"argument error: --tiles must be comma-separated integers, got {args.tiles!r}", file=sys.stderr)
        return EXIT_CONFIG
    bad = [t for t in tiles if t not in ex.TILES]
    if bad or args.repeats < 1:
        print(f"argument error: tiles must be in {ex.TILES} and repeats >= 1", file=sys.stderr)
        return EXIT_CONFIG
    ck = ckpt_io.read_checkpoint(args.ckpt)
    rows = ex.bench_gemv(ck, args.repeats, tiles, args.seed)
    data = csv_bytes(rows)
    if args.output:
        Path(args.output).write_bytes(data)
    else:
        sys.stdout.write(data.decode())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="laqlab", description="Lookahead layer-wise QAT laboratory")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    for name, helptext in (("pack", "pack code records into 32-bit words"), ("unpack", "expand packed code records")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("ckpt")
        s.add_argument("-o", "--output")
    b = sub.add_parser("bench-gemv", help="time packed vs dense GEMV for every quantized layer")
    b.add_argument("ckpt")
    b.add_argument("--repeats", type=int, default=50)
    b.add_argument("--tiles", default="64,128,256")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("-o", "--output")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "run":
        return run_config(args.config)
    handlers = {"pack": cmd_pack, "unpack": cmd_unpack, "bench-gemv": cmd_bench}
    try:
        return handlers[args.command](args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ckpt_io.CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
