"""Command line front end.

Verbs: obfuscate, detect, deobfuscate, compare, iocheck, dot.  Exit status
is 0 on success, 1 when an analysis step fails and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .deobf.cff import deobfuscate_function, recovered_function
from .detect import detect_obfuscations
from .ir.asm import parse_program, serialize_program
from .ir.cfg import build_cfg, emit_dot
from .ir.interp import ExecutionError
from .ir.model import IRError, Program
from .metrics import IoProtocol, cfg_similarity, euclidean_distance, io_equivalence
from .obfuscator import DEFAULT_SEED, PASS_NAMES, ObfConfig, obfuscate
from .symexec import SymExecError

ANALYSIS_ERRORS = (IRError, ExecutionError, SymExecError, OSError, ValueError, KeyError)


def _load(path: str) -> Program:
    return parse_program(Path(path).read_text())


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def _pick(p: Program, name: str | None) -> str:
    if name is None:
        return next(iter(p.functions))
    if name not in p.functions:
        raise KeyError(f"no function {name!r}")
    return name


def _passes(text: str) -> tuple[str, ...]:
    names = tuple(x.strip() for x in text.split(",") if x.strip())
    if names == ("all",):
        return PASS_NAMES
    bad = [n for n in names if n not in PASS_NAMES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"passes must come from {', '.join(PASS_NAMES)} or 'all'")
    return names


def cmd_obfuscate(a: argparse.Namespace) -> int:
    cfg = ObfConfig(passes=a.passes, seed=a.seed, bcf_prob=a.bcf_prob, bcf_loop=a.bcf_loop,
                    split_num=a.split_num)
    out, gt = obfuscate(_load(a.input), cfg)
    _write(a.output, serialize_program(out))
    if a.ground_truth:
        _write(a.ground_truth, _dump(gt.to_json()))
    return 0


def cmd_detect(a: argparse.Namespace) -> int:
    p = _load(a.input)
    _write(a.output, _dump({n: detect_obfuscations(f).to_json() for n, f in p.functions.items()}))
    return 0


def cmd_deobfuscate(a: argparse.Namespace) -> int:
    p = _load(a.input)
    funcs, reports, dots = {}, [], []
    for name, f in p.functions.items():
        r = deobfuscate_function(f, saved_states=a.saved_states)
        funcs[name] = recovered_function(f, r.recovered) if r.recovery else r.function
        reports.append(r.report)
        dots.append(emit_dot(r.recovered, name))
    _write(a.output, serialize_program(Program(funcs, dict(p.globals))))
    if a.cfg:
        _write(a.cfg, "".join(dots))
    if a.report:
        _write(a.report, _dump(reports))
    failed = any(r["stages"]["cff"] and r["stages"]["cff"]["partial"] for r in reports)
    return 1 if failed else 0


def cmd_compare(a: argparse.Namespace) -> int:
    pa, pb = _load(a.a), _load(a.b)
    fa = _pick(pa, a.fn)
    fb = _pick(pb, a.fn if a.fn else (fa if fa in pb.functions else None))
    if a.metric == "euclid":
        value = euclidean_distance(pa.function(fa), pb.function(fb))
        out = {"metric": "euclid", "value": value}
    else:
        out = cfg_similarity(build_cfg(pa.function(fa)), build_cfg(pb.function(fb))).to_json()
        if not a.mapping:
            out.pop("mapping")
    _write(None, _dump(out))
    return 0


def cmd_iocheck(a: argparse.Namespace) -> int:
    pa, pb = _load(a.a), _load(a.b)
    fn = _pick(pa, a.fn)
    third = a.n // 3
    proto = IoProtocol(third, third, a.n - 2 * third, a.seed)
    print(f"{io_equivalence(pa, fn, pb, fn, proto):.1f}")
    return 0


def cmd_dot(a: argparse.Namespace) -> int:
    p = _load(a.input)
    names = [_pick(p, a.fn)] if a.fn else list(p.functions)
    _write(a.output, "".join(emit_dot(build_cfg(p.function(n)), n) for n in names))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deobflab", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON file supplying default option values")
    sub = ap.add_subparsers(dest="verb", required=True, metavar="verb")

    o = sub.add_parser("obfuscate", help="apply obfuscation passes")
    o.add_argument("input")
    o.add_argument("-o", "--output")
    o.add_argument("--passes", type=_passes, default=PASS_NAMES, help="comma list or 'all'")
    o.add_argument("--seed", type=lambda s: int(s, 0), default=DEFAULT_SEED)
    o.add_argument("--bcf-prob", type=int, default=30)
    o.add_argument("--bcf-loop", type=int, default=1)
    o.add_argument("--split-num", type=int, default=0)
    o.add_argument("--ground-truth", help="write what the passes did as JSON")
    o.set_defaults(run=cmd_obfuscate)

    d = sub.add_parser("detect", help="report which obfuscations are present")
    d.add_argument("input")
    d.add_argument("-o", "--output")
    d.set_defaults(run=cmd_detect)

    x = sub.add_parser("deobfuscate", help="undo substitution, bogus flow and flattening")
    x.add_argument("input")
    x.add_argument("-o", "--output")
    x.add_argument("--cfg", help="DOT file for the recovered CFGs")
    x.add_argument("--saved-states", type=int, default=1)
    x.add_argument("--report", help="JSON report path")
    x.set_defaults(run=cmd_deobfuscate)

    c = sub.add_parser("compare", help="distance or similarity of two functions")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--metric", choices=("sim", "euclid"), default="sim")
    c.add_argument("--fn")
    c.add_argument("--mapping", action="store_true", help="include the node pairing")
    c.set_defaults(run=cmd_compare)

    i = sub.add_parser("iocheck", help="percentage of identical outputs")
    i.add_argument("a")
    i.add_argument("b")
    i.add_argument("--fn")
    i.add_argument("--n", type=int, default=1500)
    i.add_argument("--seed", type=lambda s: int(s, 0), default=DEFAULT_SEED)
    i.set_defaults(run=cmd_iocheck)

    g = sub.add_parser("dot", help="render CFGs as DOT")
    g.add_argument("input")
    g.add_argument("-o", "--output")
    g.add_argument("--fn")
    g.set_defaults(run=cmd_dot)
    return ap


def _config_defaults(argv: list[str]) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    data = json.loads(Path(known.config).read_text())
    return {k.replace("-", "_"): v for k, v in data.items()}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        defaults = _config_defaults(argv)
    except (OSError, ValueError) as exc:
        print(f"deobflab: bad config: {exc}", file=sys.stderr)
        return 2
    ap = build_parser()
    for action in ap._subparsers._group_actions[0].choices.values():
        known = {k: v for k, v in defaults.items() if any(a.dest == k for a in action._actions)}
        if "passes" in known and isinstance(known["passes"], str):
            known["passes"] = _passes(known["passes"])
        action.set_defaults(**known)
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verb == "iocheck" and args.n < 3:
        print("deobflab: --n must be at least 3", file=sys.stderr)
        return 2
    try:
        return args.run(args)
    except ANALYSIS_ERRORS as exc:
        print(f"deobflab: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
