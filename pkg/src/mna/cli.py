"""``mna`` command line: build, dissect and validate stacks, run scenarios.

Exit codes: 0 success, 2 usage or input error, 1 internal error.
"""

from __future__ import annotations

import argparse
import re
import sys
import traceback
from pathlib import Path
from typing import Optional, Sequence

from .codec import CodecError, bytes_to_words, decode_stack, dissect_text, encode_stack
from .composer import ComposeError, compose, validate_stack
from .simulator import ScenarioInvalid, run_scenario, stream_stacks, validate_scenario
from .textfmt import BUNDLED, load_scenario, parse_stack_description

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _read(arg: str) -> tuple[str, str]:
    if arg == "-":
        return sys.stdin.read(), "<stdin>"
    p = Path(arg)
    if not p.is_file():
        raise InputError(f"{arg}: no such file")
    return p.read_text(), str(p)


def parse_hex(text: str) -> bytes:
    cleaned = re.sub(r"\s+", "", text)
    if cleaned.lower().startswith("0x"):
        cleaned = cleaned[2:]
    if not cleaned:
        raise InputError("no hex input")
    if not re.fullmatch(r"[0-9a-fA-F]*", cleaned) or len(cleaned) % 2:
        raise InputError("input is not an even-length hex string")
    return bytes.fromhex(cleaned)


def cmd_build(args) -> int:
    text, source = _read(args.file)
    stack = parse_stack_description(text, source)
    print(encode_stack(stack).hex())
    return EXIT_OK


def cmd_dissect(args) -> int:
    text = args.hex if args.hex is not None else sys.stdin.read()
    data = parse_hex(text)
    if args.rld is not None and args.rld < 1:
        raise InputError("--rld must be positive")
    print(dissect_text(data, args.rld))
    return EXIT_OK


def cmd_validate(args) -> int:
    sc = load_scenario(args.scenario)
    for opt in args.option or ():
        _apply_option(sc, opt)
    validate_scenario(sc)
    caps = {n: s.capabilities() for n, s in sc.nodes.items()}
    bad = 0
    if args.stack is not None:
        if args.path is None or args.path not in sc.paths:
            raise InputError("--stack needs --path naming a path of the scenario")
        try:
            parsed = decode_stack(parse_hex(args.stack))
        except CodecError as e:
            raise InputError(f"stack does not decode: {e}") from None
        report = validate_stack(parsed.stack, sc.paths[args.path].spec(), caps,
                                unit_nas=sc.options.unit_nas)
        for issue in report.issues:
            print(f"path {args.path}: {issue}")
        print(f"path {args.path}: {'ok' if report.ok else 'INVALID'}")
        return EXIT_OK if report.ok else EXIT_INPUT
    for st in sc.streams:
        stacks = stream_stacks(sc, st)
        lses = len(bytes_to_words(stacks[0]))
        if st.path is None:
            print(f"stream {st.name}: ok ({lses} LSEs, explicit labels)")
            continue
        path = sc.paths[st.path]
        reqs = list(path.requests) + list(st.requests)
        comp = compose(path.spec(), reqs, caps, unit_nas=sc.options.unit_nas,
                       ttl=st.ttl, tc=st.tc)
        report = validate_stack(comp.stack, path.spec(), caps, unit_nas=sc.options.unit_nas)
        copies = ", ".join(path.hops[i][0] for i in comp.hbh_slots) or "none"
        state = "ok" if report.ok else "INVALID"
        print(f"stream {st.name}: {state} ({lses} LSEs, HBH copies below labels of: {copies})")
        for issue in report.issues:
            print(f"  {issue}")
        bad += not report.ok
    return EXIT_INPUT if bad else EXIT_OK


def _apply_option(sc, opt: str) -> None:
    if "=" not in opt:
        raise InputError(f"--option {opt!r} needs key=value")
    k, v = opt.split("=", 1)
    try:
        sc.options.set(k, v)
    except ValueError as e:
        raise InputError(str(e)) from None


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    for opt in args.option or ():
        _apply_option(sc, opt)
    report = run_scenario(sc, seed=args.seed, mode=args.mode)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    if args.exports:
        Path(args.exports).write_text("".join(r.to_line() + "\n" for r in report.exports))
    print(report.summary())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mna", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="encode a stack description file as hex")
    p.add_argument("file", help="stack description ('-' reads standard input)")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("dissect", help="annotate a hex-encoded stack")
    p.add_argument("hex", nargs="?", help="hex string (default: standard input)")
    p.add_argument("--rld", type=int, help="stop parsing after this many LSEs")
    p.set_defaults(func=cmd_dissect)

    p = sub.add_parser("validate", help="check composed stacks against node capabilities")
    p.add_argument("scenario", help=f"scenario file or bundled name ({', '.join(BUNDLED)})")
    p.add_argument("--stack", help="validate this hex stack instead of the streams")
    p.add_argument("--path", help="path the --stack travels")
    p.add_argument("--option", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="run a scenario")
    p.add_argument("scenario", help=f"scenario file or bundled name ({', '.join(BUNDLED)})")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--exports", help="write AMM export records (CSV lines) here")
    p.add_argument("--mode", choices=("batch", "packet"), help="execution mode")
    p.add_argument("--option", action="append", metavar="KEY=VALUE",
                   help="override a scenario option, e.g. enforcement=off")
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors, 0 on --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except (InputError, ScenarioInvalid, ComposeError, CodecError, OSError) as e:
        print(f"mna: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
