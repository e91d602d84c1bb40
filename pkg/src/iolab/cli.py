"""Command-line entry point: ``iolab bound|pebble|factor|sweep``.

Exit status: 0 on success, 1 on domain errors (invalid program, rule
violation, singular panel, infeasible grid), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .bounds import program_bound
from .conflux import GridError, SingularPanelError, factorize, select_grid
from .daap import DaapError, parse_program
from .models import MODELS, parse_ranks, sweep, to_csv
from .netsim import MemoryCapError, SimulationError
from .pebble import CDag, CDagError, Schedule, ScheduleError, gen_lu_cdag, min_io_search, validate_schedule


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _read_json(path: str):
    try:
        return json.loads(_read(path))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None


def _write(out: str | None, text: str, args: argparse.Namespace, extra: Sequence[str] = ()) -> None:
    if out is None or out == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    Path(out).write_text(text)
    write_manifest(out, args, [out, *extra])


def write_manifest(out: str, args: argparse.Namespace, files: Sequence[str]) -> Path:
    """Record the invocation and output digests next to ``out``."""
    arguments = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "tool": "iolab",
        "version": __version__,
        "subcommand": args.command if not getattr(args, "action", None) else f"{args.command} {args.action}",
        "arguments": arguments,
        "seed": arguments.get("seed"),
        "outputs": {f: hashlib.sha256(Path(f).read_bytes()).hexdigest() for f in files},
    }
    path = Path(str(out) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- subcommands ---------------------------------------------------------------


def _params(items: Sequence[str]) -> dict[str, int]:
    out = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--param expects NAME=VALUE, got {item!r}")
        try:
            out[name.strip()] = int(value)
        except ValueError:
            raise UsageError(f"--param {name}: {value!r} is not an integer") from None
    return out


def cmd_bound(args) -> int:
    source = _read(args.program)
    try:
        program = parse_program(source)
        params = _params(args.param)
        missing = [p for p in program.parameters if p not in params]
        if missing:
            raise UsageError(f"missing --param for {', '.join(missing)}")
        report = program_bound(program, args.memory, args.ranks, params)
    except DaapError as exc:
        raise DomainError(f"bound: {exc}") from None
    _write(args.out, report.to_json() + "\n", args)
    return 0


def cmd_pebble(args) -> int:
    if args.action == "gen-lu":
        try:
            cdag = gen_lu_cdag(args.n)
        except CDagError as exc:
            raise DomainError(f"pebble gen-lu: {exc}") from None
        _write(args.out, json.dumps(cdag.to_dict(), indent=1) + "\n", args)
        return 0
    try:
        cdag = CDag.from_dict(_read_json(args.cdag))
    except (KeyError, TypeError) as exc:
        raise UsageError(f"malformed cDAG file: {exc}") from None
    except CDagError as exc:
        raise DomainError(f"pebble: {exc}") from None
    if args.action == "validate":
        schedule = Schedule.from_dict(_read_json(args.schedule))
        try:
            replay = validate_schedule(cdag, schedule, args.memory, args.hues)
        except ScheduleError as exc:
            raise DomainError(f"pebble validate: rule {exc.rule} violated at move {exc.index}: {exc}") from None
        result = {"q": replay.q, "loads": replay.loads, "stores": replay.stores,
                  "per_hue_io": replay.per_hue_io, "peak_red": replay.peak_red}
    else:
        try:
            found = min_io_search(cdag, args.memory, limit=args.limit)
        except ValueError as exc:
            raise DomainError(f"pebble search: {exc}") from None
        result = {"q": found.q, "optimal": found.optimal, "feasible": found.feasible,
                  "expanded": found.expanded, "note": found.note,
                  "schedule": None if found.schedule is None else found.schedule.to_dict()}
    _write(args.out, json.dumps(result, indent=2, sort_keys=True) + "\n", args)
    return 0


def cmd_factor(args) -> int:
    try:
        grid = select_grid(args.ranks, args.n, args.memory, c=args.layers, v=args.block)
        res = factorize(args.n, args.ranks, args.memory, grid=grid, seed=args.seed, strict_memory=args.strict_memory)
    except (GridError, SingularPanelError, MemoryCapError, SimulationError) as exc:
        raise DomainError(f"factor: {exc}") from None
    summary = res.summary(c2=args.c2)
    summary["seed"] = args.seed
    summary_text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    Path(args.out).write_text(res.ledger.to_csv())
    extra = []
    if args.summary:
        Path(args.summary).write_text(summary_text)
        extra.append(args.summary)
    else:
        sys.stdout.write(summary_text)
    write_manifest(args.out, args, [args.out, *extra])
    if args.verify and not res.residual < 1e-10:
        raise DomainError(f"factor: residual {res.residual:.3e} exceeds 1e-10")
    return 0


def cmd_sweep(args) -> int:
    names = [m.strip() for m in args.models.split(",") if m.strip()]
    unknown = [m for m in names if m not in MODELS]
    if unknown:
        raise UsageError(f"unknown models {unknown}; choose from {sorted(MODELS)}")
    try:
        ranks = parse_ranks(args.p)
    except ValueError:
        raise UsageError(f"--p expects LO:HI or a comma list, got {args.p!r}") from None
    if args.mem_policy == "fixed" and args.memory is None:
        raise UsageError("--mem-policy fixed needs --memory")
    memory = "fig5" if args.mem_policy == "fig5" else args.memory
    rows = sweep(names, ranks, n=args.n, weak=args.weak, memory=memory)
    Path(args.out).write_text(to_csv(rows))
    write_manifest(args.out, args, [args.out])
    return 0


# -- parser --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iolab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"iolab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("bound", help="I/O lower bound of a loop-nest program")
    b.add_argument("--program", required=True)
    b.add_argument("--memory", type=float, required=True)
    b.add_argument("--ranks", type=int, default=1)
    b.add_argument("--param", action="append", default=[], metavar="NAME=VALUE")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bound)

    pb = sub.add_parser("pebble", help="red-blue pebble game tools")
    psub = pb.add_subparsers(dest="action", required=True, parser_class=_Parser)
    v = psub.add_parser("validate")
    v.add_argument("--cdag", required=True)
    v.add_argument("--schedule", required=True)
    v.add_argument("--memory", type=int, required=True)
    v.add_argument("--hues", type=int, default=1)
    v.add_argument("--out")
    s = psub.add_parser("search")
    s.add_argument("--cdag", required=True)
    s.add_argument("--memory", type=int, required=True)
    s.add_argument("--limit", type=int, default=3_000_000)
    s.add_argument("--out")
    g = psub.add_parser("gen-lu")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out")
    pb.set_defaults(func=cmd_pebble)

    f = sub.add_parser("factor", help="COnfLUX on the simulated machine")
    f.add_argument("--n", type=int, required=True)
    f.add_argument("--ranks", type=int, required=True)
    f.add_argument("--memory", type=int, required=True)
    f.add_argument("--block", type=int)
    f.add_argument("--layers", type=int, help="pin the replication depth c")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--strict-memory", action="store_true")
    f.add_argument("--verify", action="store_true")
    f.add_argument("--c2", type=float, default=None, help="lower-order constant for the per-step model column")
    f.add_argument("--summary")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_factor)

    w = sub.add_parser("sweep", help="model scaling table")
    w.add_argument("--models", default="conflux,candmc,2d")
    size = w.add_mutually_exclusive_group(required=True)
    size.add_argument("--n", type=float)
    size.add_argument("--weak", type=float)
    w.add_argument("--p", required=True)
    w.add_argument("--mem-policy", choices=["fig5", "fixed"], default="fig5")
    w.add_argument("--memory", type=float)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
