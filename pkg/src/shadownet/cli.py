"""``shadownet`` command line: analyze, rewrite, run, compare, gen-weights, eval.

Exit codes: 0 success, 1 error, 2 selector matched nothing (rewrite).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .costmodel import CostParams, network_cost
from .engine import run_party, run_secure
from .errors import SelectorMissError, ShadownetError
from .netgraph.blocks import load_shipped
from .netgraph.graph import load_graph
from .netgraph.oracle import eval_plaintext, ulp_budget
from .netgraph.rewrite import apply_passes, parse_pass
from .netgraph.weights import gen_weights, load_input, load_weights, save_weights
from .ring import RingParams, generator
from .transport import P0, P1, parse_endpoints

EXIT_OK, EXIT_ERROR, EXIT_SELECTOR_MISS = 0, 1, 2


def _graph(ref: str):
    """A graph file path, or the name of a shipped graph."""
    if os.path.exists(ref):
        return load_graph(ref)
    name = ref if ref.endswith(".json") else ref + ".json"
    try:
        return load_shipped(name)
    except FileNotFoundError:
        raise FileNotFoundError(f"no graph file or shipped graph named {ref!r}") from None


def _ring(args) -> RingParams:
    return RingParams(l=args.bits, p=args.field, f_scale=args.scale)


def _emit(args, text: str, doc) -> None:
    body = json.dumps(doc, indent=2) if args.format == "json" else text
    if args.out:
        Path(args.out).write_text(body + "\n")
    else:
        print(body)


def _modeled(graph, ring: RingParams) -> dict:
    rep = network_cost(graph, CostParams(l=ring.l, p=ring.p))
    return {"rounds": rep.rounds, "bytes": rep.bytes, "mb": rep.mb}


def _measured(transcript) -> dict:
    rounds, nbytes = transcript.measured_cost()
    on_rounds, on_bytes = transcript.measured_cost(exclude="offline")
    return {"rounds": rounds, "bytes": nbytes, "online_rounds": on_rounds,
            "online_bytes": on_bytes}


# -- subcommands ----------------------------------------------------------

def cmd_analyze(args) -> int:
    graph = _graph(args.graph)
    ring = _ring(args)
    report = network_cost(graph, CostParams(l=ring.l, p=ring.p))
    if args.measure:
        weights = gen_weights(graph, args.seed)
        x = generator(args.seed, "analyze-input").uniform(-1, 1, graph.input_shape)
        report.measured = _measured(run_secure(graph, weights, x, args.seed, ring).transcript)
    _emit(args, report.to_text(only_costly=args.brief), report.to_dict())
    return EXIT_OK


def cmd_rewrite(args) -> int:
    src = Path(args.graph)
    passes = [parse_pass(p) for p in args.passes or []]
    if not passes and src.exists():
        out = src.read_bytes()
    else:
        graph = apply_passes(_graph(args.graph), passes)
        out = graph.to_json().encode()
    if args.out:
        Path(args.out).write_bytes(out)
    else:
        sys.stdout.write(out.decode())
    return EXIT_OK


def cmd_gen_weights(args) -> int:
    if not args.out:
        raise ValueError("gen-weights needs --out")
    graph = _graph(args.graph)
    save_weights(gen_weights(graph, args.seed), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    graph = _graph(args.graph)
    weights = load_weights(args.weights, graph)
    x = load_input(args.input)
    y = eval_plaintext(graph, weights, x, args.mode, _ring(args))
    doc = {"mode": args.mode, "output": np.asarray(y).tolist()}
    _emit(args, f"output ({args.mode}): {np.array2string(np.asarray(y), precision=6)}", doc)
    return EXIT_OK


def cmd_run(args) -> int:
    graph = _graph(args.graph)
    ring = _ring(args)
    if args.transport == "inproc":
        if args.party is not None:
            raise ValueError("--party is only meaningful with --transport tcp")
        weights = load_weights(args.weights, graph)
        x = load_input(args.input)
        res = run_secure(graph, weights, x, args.seed, ring)
        out, transcript = res.output, res.transcript
    else:
        if args.party is None:
            raise ValueError("--transport tcp needs --party (one process per party)")
        endpoints = parse_endpoints(args.endpoints)
        weights = load_weights(args.weights, graph) if args.party == P0 else None
        x = load_input(args.input) if args.party == P1 else None
        raw, transcript = run_party(args.party, graph, endpoints, args.seed, ring, weights, x)
        out = ring.decode(raw) if raw is not None else None
    if args.transcript:
        Path(args.transcript).write_text(transcript.to_jsonl())
    measured, modeled = _measured(transcript), _modeled(graph, ring)
    doc = {"output": None if out is None else np.asarray(out).tolist(),
           "measured": measured, "modeled": modeled}
    if args.party is not None:
        doc["party"] = args.party
    lines = []
    if out is not None:
        lines.append(f"output: {np.array2string(np.asarray(out), precision=6)}")
    who = "" if args.party is None else f" (sent by party {args.party})"
    lines.append(f"measured{who}: {measured['rounds']} rounds, {measured['bytes']} bytes "
                 f"(online {measured['online_rounds']} rounds, {measured['online_bytes']} bytes)")
    lines.append(f"modeled: {modeled['rounds']} rounds, {modeled['mb']:.4f} MB")
    _emit(args, "\n".join(lines), doc)
    return EXIT_OK


def cmd_compare(args) -> int:
    graph = _graph(args.graph)
    ring = _ring(args)
    weights = load_weights(args.weights, graph)
    budget = ulp_budget(graph, weights, ring)
    worst, rows = 0, []
    for i in range(args.n):
        x = generator(args.seed, "compare", i).uniform(-1, 1, graph.input_shape)
        secure = run_secure(graph, weights, x, args.seed + i, ring)
        oracle = eval_plaintext(graph, weights, x, "fixed", ring, raw=True)
        dev = int(np.max(np.abs(ring.signed(secure.raw).astype(np.int64) - oracle)))
        worst = max(worst, dev)
        rows.append(dev)
    ok = worst <= budget
    doc = {"n": args.n, "max_deviation_ulp": worst, "budget_ulp": budget,
           "per_input_ulp": rows, "pass": ok}
    text = (f"{'PASS' if ok else 'FAIL'}: max deviation {worst} ULP over {args.n} inputs "
            f"(budget {budget} ULP, 1 ULP = 2^-{ring.f_scale})")
    _emit(args, text, doc)
    return EXIT_OK if ok else EXIT_ERROR


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--graph", required=True,
                        help="graph JSON file, or a shipped graph name such as "
                             "mobilenetv2_cifar.crypto")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--bits", type=int, default=64, help="ring width l")
    common.add_argument("--field", type=int, default=67, help="comparison field size p")
    common.add_argument("--scale", type=int, default=13, help="fixed-point fractional bits")
    common.add_argument("--format", choices=("text", "json"), default="text")
    common.add_argument("--out", help="write the result here instead of stdout")

    ap = argparse.ArgumentParser(prog="shadownet",
                                 description="Three-party secure CNN inference and cost analysis.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="per-layer modeled cost")
    p.add_argument("--measure", action="store_true",
                   help="also run in-process with seeded weights and input; adds measured totals")
    p.add_argument("--brief", action="store_true", help="hide zero-cost local layers")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("rewrite", parents=[common], help="apply rewrite passes")
    p.add_argument("--pass", dest="passes", action="append", metavar="NAME[:SELECTOR[:RATIO]]",
                   help="e.g. remove_activation:first, pa_replace:second:0.5, relu6_to_relu")
    p.set_defaults(fn=cmd_rewrite)

    p = sub.add_parser("gen-weights", parents=[common], help="seeded uniform(-0.5, 0.5) weights")
    p.set_defaults(fn=cmd_gen_weights)

    p = sub.add_parser("eval", parents=[common], help="plaintext evaluation")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mode", choices=("float", "fixed"), default="fixed")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("run", parents=[common], help="secure three-party inference")
    p.add_argument("--weights", help="weight container (read by party 0)")
    p.add_argument("--input", help="input container with one 'input' entry (read by party 1)")
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--party", type=int, choices=(0, 1, 2))
    p.add_argument("--endpoints", help="host:port,host:port,host:port for parties 0,1,2 "
                                       "(default: SHADOWNET_P0/P1/P2)")
    p.add_argument("--transcript", help="write this party's (or the merged) transcript as JSON lines")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("compare", parents=[common], help="secure vs fixed-point oracle")
    p.add_argument("--weights", required=True)
    p.add_argument("--n", type=int, default=4, help="number of random inputs")
    p.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run" and args.transport == "inproc":
        missing = [f for f in ("weights", "input") if getattr(args, f) is None]
        if missing:
            print(f"shadownet: error: run needs --{' and --'.join(missing)}", file=sys.stderr)
            return EXIT_ERROR
    try:
        return args.fn(args)
    except SelectorMissError as e:
        print(f"shadownet: warning: {e}", file=sys.stderr)
        return EXIT_SELECTOR_MISS
    except (ShadownetError, ValueError, OSError, KeyError) as e:
        print(f"shadownet: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
