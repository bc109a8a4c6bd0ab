"""Command-line entry points: ``compbin`` and ``pgfuse``."""
from __future__ import annotations

import argparse
import logging
import signal
import sys

from .cache import DEFAULT_BLOCK_SIZE, CacheConfig
from .convert import BIN64, TEXT, EdgeListSource, convert, stats, verify
from .errors import BusyError, CompBinError

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


def _size(text: str) -> int:
    """Parse a byte count with an optional K/M/G (binary) suffix."""
    units = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}
    text = text.strip().lower().removesuffix("ib").removesuffix("b")
    try:
        if text and text[-1] in units:
            return int(float(text[:-1]) * units[text[-1]])
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a byte count: {text!r}") from None


def compbin_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="compbin", description="CompBin graph tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert an edge list into a CompBin file")
    p.add_argument("--sort", action="store_true", help="sort each vertex's neighbors")
    p.add_argument("--vertices", type=int, help="vertex count (default: 1 + largest ID)")
    p.add_argument("--format", choices=[TEXT, BIN64], default=TEXT)
    p.add_argument("input")
    p.add_argument("output")

    p = sub.add_parser("verify", help="check every invariant of a CompBin file")
    p.add_argument("file")

    p = sub.add_parser("stats", help="print size and degree statistics")
    p.add_argument("file")

    args = parser.parse_args(argv)
    try:
        if args.command == "convert":
            header = convert(EdgeListSource(args.input, args.format), args.output,
                             sort_neighbors=args.sort, vertex_count=args.vertices)
            print(f"vertices={header.vertex_count}")
            print(f"edges={header.edge_count}")
            print(f"bytes_per_id={header.bytes_per_id}")
            print(f"file_bytes={header.file_size}")
            return EXIT_OK
        if args.command == "verify":
            report = verify(args.file)
            for line in report.lines():
                print(line)
            return EXIT_OK if report.ok else EXIT_INVALID
        if args.command == "stats":
            for key, value in stats(args.file).items():
                print(f"{key}={value:.6f}" if isinstance(value, float) else f"{key}={value}")
            return EXIT_OK
    except (CompBinError, OSError) as exc:
        print(f"compbin {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_USAGE


def pgfuse_main(argv=None) -> int:
    from . import fusefs

    parser = argparse.ArgumentParser(prog="pgfuse",
                                     description="read-only block-caching filesystem")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("mount", help="export files and serve until unmounted")
    p.add_argument("--block-size", type=_size, default=DEFAULT_BLOCK_SIZE)
    p.add_argument("--budget", type=_size, default=4 * DEFAULT_BLOCK_SIZE)
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("mountpoint")
    p.add_argument("files", nargs="+")
    p = sub.add_parser("umount", help="unmount a pgfuse mountpoint")
    p.add_argument("mountpoint")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        if args.command == "umount":
            fusefs.sys_umount(args.mountpoint)
            return EXIT_OK
        try:
            config = CacheConfig(block_size=args.block_size, memory_budget=args.budget)
        except ValueError as exc:
            parser.error(str(exc))
        session = fusefs.mount(args.files, args.mountpoint, config, threads=args.threads)

        def stop(signum, frame):
            try:
                session.unmount()
            except BusyError as exc:
                print(f"pgfuse: {exc}", file=sys.stderr)

        signal.signal(signal.SIGINT, stop)
        signal.signal(signal.SIGTERM, stop)
        while session.mounted:
            session.wait(timeout=0.5)
        for name, counters in session.counters().items():
            fields = " ".join(f"{k}={v}" for k, v in counters.as_dict().items())
            print(f"{name} {fields}")
        return EXIT_OK
    except BusyError as exc:
        print(f"pgfuse {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CompBinError, OSError, ValueError) as exc:
        print(f"pgfuse {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


def _entry(fn):
    def run():
        sys.exit(fn())
    return run


compbin = _entry(compbin_main)
pgfuse = _entry(pgfuse_main)


if __name__ == "__main__":
    compbin()
