"""Command-line front end.

Every subcommand writes its outputs plus a ``manifest.json`` into
``--out-dir``.  A manifest's ``config`` block holds the resolved option
values, so ``--config manifest.json`` re-runs the same stage.  TOML config
files set options by their long-flag names (dashes or underscores); keys at
the top level apply to every subcommand and a ``[<subcommand>]`` table to one.
Command-line flags always win.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import ScalingFit, doubling_ratios, run_grid, scaling_regression
from .core import MembershipMatrix, PRESETS, SimulationConfig, SimulationError, preset, sample_network
from .data import (FORMATS, LogFormatError, baseline_from_log, format_log, holdout_split, load_log,
                   ordered_adjacency, to_counts, to_socio)
from .inference import INITS, FitConfig, FittedModel, fit
from .metrics import (group_summaries, predicted_frequency_matrix, rank_at_full_recall,
                      select_k, soft_bcubed)

THREADS_ENV = "TMMSB_THREADS"
logger = logging.getLogger("tmmsb")


class UsageError(Exception):
    """Bad option values found after argument parsing; exits with status 2."""


# --------------------------------------------------------------------------
# option parsing helpers
# --------------------------------------------------------------------------

def _int_list(text: str) -> list:
    """``"2..7"`` or ``"2,4,8"`` to a list of ints."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 2..7 or a list like 2,4,8, got {text!r}")


def _matrix(text: str) -> np.ndarray:
    """``B`` as a scalar, a JSON nested list, or rows split by ``;`` and columns by ``,``."""
    text = str(text).strip()
    try:
        if text.startswith("["):
            arr = np.array(json.loads(text), dtype=np.float64)
        else:
            arr = np.array([[float(v) for v in row.split(",")] for row in text.split(";")])
    except (ValueError, json.JSONDecodeError):
        raise argparse.ArgumentTypeError(f"cannot read a matrix from {text!r}")
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise argparse.ArgumentTypeError(f"B must be square, got shape {arr.shape}")
    return arr


def _vector(text: str) -> np.ndarray:
    text = str(text).strip()
    try:
        return np.array(json.loads(text) if text.startswith("[") else [float(v) for v in text.split(",")],
                        dtype=np.float64)
    except (ValueError, json.JSONDecodeError):
        raise argparse.ArgumentTypeError(f"cannot read a vector from {text!r}")


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file, or a previous run's manifest.json")
    p.add_argument("--seed", type=int, default=None, help="RNG seed")
    p.add_argument("--out-dir", default=".", help="directory for outputs (default: .)")
    p.add_argument("--format", choices=FORMATS, default=None,
                   help="transaction log format (default: from file suffix, jsonl for output)")
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help=f"E-step worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("--nodes", default=None,
                   help="file with one node name per line, fixing node indices (see split)")
    p.add_argument("-v", "--verbose", action="store_true")


def _fit_options(p: argparse.ArgumentParser, need_k: bool = True) -> None:
    if need_k:
        p.add_argument("--k", type=int, default=None, help="number of groups")
    p.add_argument("--alpha-value", type=float, default=0.1)
    p.add_argument("--max-outer-iters", type=int, default=100)
    p.add_argument("--max-inner-iters", type=int, default=20)
    p.add_argument("--rel-tol", type=float, default=1e-6)
    p.add_argument("--init", choices=INITS, default="spectral")
    p.add_argument("--jitter-scale", type=float, default=0.5)
    p.add_argument("--n-restarts", type=int, default=1)
    p.add_argument("--clamp-eps", type=float, default=1e-9)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tmmsb", description="Transactional mixed-membership block-model")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", help="sample a transaction log from the generative model")
    _common(p)
    p.add_argument("--preset", choices=PRESETS, default=None)
    p.add_argument("--m", type=int, default=None, help="number of nodes")
    p.add_argument("--n", type=int, default=None, help="number of transactions")
    p.add_argument("--poisson-rate", type=float, default=None, help="draw N ~ Poisson(rate) instead of --n")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None, help="Dirichlet concentration (scalar)")
    p.add_argument("--b", type=_matrix, default=None, help="interaction matrix, e.g. '0.3,0.02;0.02,0.3'")
    p.add_argument("--sender-weights", type=_vector, default=None)
    p.add_argument("--max-redraws", type=int, default=None)

    p = sub.add_parser("fit", help="variational EM for a fixed number of groups")
    _common(p)
    p.add_argument("--log", required=False, help="transaction log")
    p.add_argument("--truth", default=None, help="JSON with 'pi' for --init ground-truth")
    _fit_options(p)

    p = sub.add_parser("select", help="BIC scan over the number of groups")
    _common(p)
    p.add_argument("--log")
    p.add_argument("--k-range", type=_int_list, default=None, help="e.g. 2..7 or 2,3,5")
    _fit_options(p, need_k=False)

    p = sub.add_parser("evaluate", help="soft-clustering and link-prediction scores")
    _common(p)
    p.add_argument("--model", help="fitted model or baseline JSON")
    p.add_argument("--truth", default=None, help="JSON with ground-truth 'pi'")
    p.add_argument("--heldout", default=None, help="held-out transaction log")

    p = sub.add_parser("summarize", help="per-group summaries of a fitted model")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--log")

    p = sub.add_parser("split", help="hold out messages of the most active senders")
    _common(p)
    p.add_argument("--log")
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--top-senders", type=int, default=10)

    p = sub.add_parser("reduce", help="count matrix and thresholded socio-matrix")
    _common(p)
    p.add_argument("--log")
    p.add_argument("--threshold", type=int, default=1)

    p = sub.add_parser("baseline", help="hierarchical clustering of symmetrized counts")
    _common(p)
    p.add_argument("--log")
    p.add_argument("--k", type=int, default=None)

    p = sub.add_parser("bench", help="time fits over an (M, N, K) grid and fit scaling exponents")
    _common(p)
    p.add_argument("--m-values", type=_int_list, default=[60, 120])
    p.add_argument("--n-values", type=_int_list, default=[400, 800])
    p.add_argument("--k-values", type=_int_list, default=[2, 4, 8])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--fixed-iters", type=int, default=0,
                   help="time this many single-sweep iterations instead of fitting to convergence")
    _fit_options(p, need_k=False)
    return parser


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------

_CONVERTERS = {"b": _matrix, "sender_weights": _vector, "k_range": _int_list,
               "m_values": _int_list, "n_values": _int_list, "k_values": _int_list}


def _read_config(path: str, command: str) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}")
    if path.suffix == ".json":
        doc = json.loads(raw)
        if doc.get("subcommand") not in (None, command):
            raise UsageError(f"manifest {path} is for '{doc['subcommand']}', not '{command}'")
        values = dict(doc.get("config", {}))
    else:
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            doc = tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"bad TOML in {path}: {exc}")
        values = {k: v for k, v in doc.items() if not isinstance(v, dict)}
        values.update(doc.get(command, {}))
    return {key.replace("-", "_"): val for key, val in values.items()}


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv, command: str):
    """Second parse with config values installed as defaults."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    values = _read_config(args.config, command)
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(values) - known - {"command"})
    if unknown:
        raise UsageError(f"unknown config keys for '{command}': {', '.join(unknown)}")
    values.pop("command", None)
    values.pop("config", None)
    for key, val in values.items():
        if key in _CONVERTERS and val is not None:
            values[key] = _CONVERTERS[key](json.dumps(val) if isinstance(val, list) else val)
    sub.set_defaults(**values)
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------

class Run:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.start = time.perf_counter()

    def path(self, name: str) -> Path:
        return self.out / name

    def text(self, name: str, content: str) -> Path:
        p = self.path(name)
        p.write_text(content, encoding="utf-8")
        self.outputs[name] = str(p)
        return p

    def json(self, name: str, doc) -> Path:
        return self.text(name, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def matrix_csv(self, name: str, a: np.ndarray, header=None) -> Path:
        buf = []
        if header is not None:
            buf.append(",".join(map(str, header)))
        for row in np.atleast_2d(a):
            buf.append(",".join(repr(float(x)) if isinstance(x, (float, np.floating)) else str(x) for x in row))
        return self.text(name, "\n".join(buf) + "\n")

    def manifest(self) -> dict:
        config = {}
        for key, val in vars(self.args).items():
            if key in ("config", "out_dir", "verbose", "command"):
                continue
            config[key] = val.tolist() if isinstance(val, np.ndarray) else val
        hashes = {}
        for name, p in sorted(self.outputs.items()):
            hashes[name] = {"path": p, "sha256": hashlib.sha256(Path(p).read_bytes()).hexdigest()}
        doc = {
            "subcommand": self.command,
            "version": __version__,
            "config": config,
            "seed": getattr(self.args, "seed", None),
            "inputs": self.inputs,
            "outputs": hashes,
            "duration_seconds": time.perf_counter() - self.start,
        }
        self.path("manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return doc


def _need(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _load(run: Run, path: str, key: str = "log", nodes=None):
    run.inputs[key] = path
    if nodes is None and run.args.nodes is not None:
        run.inputs["nodes"] = run.args.nodes
        nodes = Path(run.args.nodes).read_text(encoding="utf-8").splitlines()
    log = load_log(path, run.args.format, nodes=nodes)
    if nodes is not None and log.num_nodes != len(nodes):
        raise ValueError(f"{path} names {log.num_nodes - len(nodes)} node(s) missing from the node list")
    return log


def _names(log) -> list:
    return list(log.node_labels) if log.node_labels else [str(i) for i in range(log.num_nodes)]


def _read_json(run: Run, path: str, key: str) -> dict:
    run.inputs[key] = path
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _fit_config(args, k: int) -> FitConfig:
    try:
        return FitConfig(k=k, alpha_value=args.alpha_value, max_outer_iters=args.max_outer_iters,
                         max_inner_iters=args.max_inner_iters, rel_tol=args.rel_tol, init=args.init,
                         jitter_scale=args.jitter_scale, seed=0 if args.seed is None else args.seed,
                         n_restarts=args.n_restarts, clamp_eps=args.clamp_eps, threads=args.threads)
    except ValueError as exc:
        raise UsageError(str(exc))


def _log_suffix(args) -> str:
    return args.format or "jsonl"


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(run: Run) -> None:
    a = run.args
    fields = ("m", "n", "poisson_rate", "k", "alpha", "b", "sender_weights", "max_redraws", "seed")
    given = {f: getattr(a, f) for f in fields if getattr(a, f) is not None}
    try:
        if a.preset:
            base = preset(a.preset)
            if "poisson_rate" in given and "n" not in given:
                given["n"] = None
            cfg = replace(base, **given)
        else:
            _need(a, "m", "k", "b")
            given.setdefault("alpha", 0.1)
            cfg = SimulationConfig(**given)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))
    a.seed = cfg.seed
    result = sample_network(cfg)
    fmt = _log_suffix(a)
    run.text(f"log.{fmt}", format_log(result.log, fmt))
    run.json("truth.json", {"pi": result.memberships.pi.tolist(), "nodes": _names(result.log), "b": np.asarray(cfg.b).tolist(),
                            "alpha": cfg.alpha_vector.tolist(), "k": cfg.k, "seed": cfg.seed})
    run.matrix_csv("z.csv", result.labels.astype(np.int64))
    print(f"simulated {len(result.log)} transactions over {result.log.num_nodes} nodes "
          f"({result.log.total_recipients} recipients, {result.redraws} redraws)")


def _truth_rows(doc: dict, nodes: list, what: str) -> np.ndarray:
    """Ground-truth ``pi`` rows reordered to ``nodes`` by node name."""
    pi = np.asarray(doc["pi"], dtype=np.float64)
    names = doc.get("nodes")
    if names is None:
        if pi.shape[0] != len(nodes):
            raise ValueError(f"{what} has {pi.shape[0]} rows for {len(nodes)} nodes")
        return pi
    index = {str(name): i for i, name in enumerate(names)}
    missing = [n for n in nodes if n not in index]
    if missing:
        raise ValueError(f"{what} has no row for node(s) {missing[:5]}")
    return pi[[index[n] for n in nodes]]


def _model_from_doc(doc: dict):
    """Fitted-model JSON or baseline JSON to ``(memberships, b)``."""
    if "labels" in doc:
        k = int(doc["k"])
        return MembershipMatrix.from_labels(np.asarray(doc["labels"]), k).pi, np.asarray(doc["crude_b"])
    model = FittedModel.from_dict(doc)
    return model.pi, model.b


def cmd_fit(run: Run) -> None:
    a = run.args
    _need(a, "log", "k")
    log = _load(run, a.log)
    cfg = _fit_config(a, a.k)
    init_pi = None
    if a.init == "ground-truth":
        _need(a, "truth")
        init_pi = _truth_rows(_read_json(run, a.truth, "truth"), _names(log), "--truth")
    model = fit(log, cfg, init_pi=init_pi)
    run.json("model.json", {**model.to_dict(), "nodes": _names(log)})
    run.text("trace.csv", "iteration,elbo\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(model.trace)))
    counts = to_counts(log).counts
    reordered, order, bounds = ordered_adjacency(counts, model.memberships)
    run.matrix_csv("ordered_adjacency.csv", reordered)
    run.json("ordered_adjacency.json", {"order": order.tolist(), "boundaries": bounds,
                                        "matrix": reordered.tolist()})
    run.matrix_csv("predicted_frequency.csv", predicted_frequency_matrix(model, log))
    if not model.converged:
        print(f"warning: not converged after {model.iterations} outer iterations", file=sys.stderr)
    print(f"K={cfg.k} elbo={model.trace[-1]:.4f} iterations={model.iterations} converged={model.converged}")


def cmd_select(run: Run) -> None:
    a = run.args
    _need(a, "log", "k_range")
    log = _load(run, a.log)
    report = select_k(log, a.k_range, _fit_config(a, a.k_range[0]))
    run.json("bic.json", report.to_dict())
    run.text("bic.txt", report.table() + "\n")
    for r in report.records:
        if not r.converged:
            print(f"warning: K={r.k} did not converge", file=sys.stderr)
    print(report.table())


def cmd_evaluate(run: Run) -> None:
    a = run.args
    _need(a, "model")
    if a.truth is None and a.heldout is None:
        raise UsageError("give --truth and/or --heldout")
    doc = _read_json(run, a.model, "model")
    pi, b = _model_from_doc(doc)
    report = {}
    if a.truth is not None:
        nodes = doc.get("nodes") or [str(i) for i in range(pi.shape[0])]
        truth = _truth_rows(_read_json(run, a.truth, "truth"), nodes, "--truth")
        score = soft_bcubed(pi, truth)
        report.update(precision=score.precision, recall=score.recall, f_measure=score.f_measure)
        print(f"precision={score.precision:.4f} recall={score.recall:.4f} F={score.f_measure:.4f}")
    if a.heldout is not None:
        heldout = _load(run, a.heldout, "heldout", nodes=doc.get("nodes"))
        rank = rank_at_full_recall(pi, heldout, b=b)
        report.update(mean_rank=rank, heldout_messages=len(heldout),
                      mean_recipients=heldout.total_recipients / len(heldout))
        print(f"mean rank at full recall={rank:.4f} over {len(heldout)} messages")
    run.json("eval.json", report)


def cmd_summarize(run: Run) -> None:
    a = run.args
    _need(a, "model", "log")
    doc = _read_json(run, a.model, "model")
    pi, b = _model_from_doc(doc)
    log = _load(run, a.log, nodes=doc.get("nodes"))
    summary = group_summaries(pi, log, b=b)
    run.json("summary.json", summary.to_dict())
    run.text("summary.txt", summary.table() + "\n")
    run.matrix_csv("weighted_b.csv", summary.weighted_b)
    print(summary.table())


def cmd_split(run: Run) -> None:
    a = run.args
    _need(a, "log")
    log = _load(run, a.log)
    try:
        train, test = holdout_split(log, a.n_test, a.top_senders, seed=0 if a.seed is None else a.seed)
    except ValueError as exc:
        raise UsageError(str(exc))
    fmt = _log_suffix(a)
    run.text(f"train.{fmt}", format_log(train, fmt))
    run.text(f"test.{fmt}", format_log(test, fmt))
    # pass to later stages with --nodes so both halves keep the same indices
    run.text("nodes.txt", "".join(f"{name}\n" for name in _names(log)))
    print(f"train {len(train)} / test {len(test)} transactions")


def cmd_reduce(run: Run) -> None:
    a = run.args
    _need(a, "log")
    log = _load(run, a.log)
    if a.threshold < 1:
        raise UsageError("--threshold must be >= 1")
    counts = to_counts(log)
    socio = to_socio(counts, a.threshold)
    names = _names(log)
    run.matrix_csv("counts.csv", counts.counts, header=names)
    run.matrix_csv("socio.csv", socio.adj, header=names)
    print(f"{log.num_nodes} nodes, {int(counts.counts.sum())} recipient slots, "
          f"{int(socio.adj.sum())} edges at threshold {a.threshold}")


def cmd_baseline(run: Run) -> None:
    a = run.args
    _need(a, "log", "k")
    log = _load(run, a.log)
    if not 1 <= a.k <= log.num_nodes:
        raise UsageError("need 1 <= --k <= number of nodes")
    labels, crude_b = baseline_from_log(log, a.k)
    run.json("baseline.json", {"k": a.k, "labels": labels.tolist(), "crude_b": crude_b.tolist(),
                               "nodes": _names(log)})
    print(f"baseline cluster sizes: {np.bincount(labels, minlength=a.k).tolist()}")


def cmd_bench(run: Run) -> None:
    a = run.args
    cfg = _fit_config(a, 1)
    if not a.verbose:
        # unconverged bench fits are expected and not worth a line each
        logging.getLogger("tmmsb.inference").setLevel(logging.ERROR)
    try:
        points = run_grid(a.m_values, a.n_values, a.k_values, cfg, a.repeats,
                          seed=0 if a.seed is None else a.seed, fixed_iters=a.fixed_iters,
                          progress=lambda p: print(f"M={p.m} N={p.n} K={p.k} {p.seconds:.3f}s "
                                                   f"({p.iterations} it)", flush=True))
    except ValueError as exc:
        raise UsageError(str(exc))
    reg: ScalingFit = scaling_regression(points)
    run.text("bench.csv", "m,n,k,seconds,iterations\n"
             + "".join(f"{p.m},{p.n},{p.k},{p.seconds!r},{p.iterations}\n" for p in points))
    run.json("scaling.json", {**reg.to_dict(), "doubling_ratio": doubling_ratios(points)})
    e = reg.exponents
    print(f"time ~ M^{e['M']:.2f} N^{e['N']:.2f} K^{e['K']:.2f}  (R^2 = {reg.r2:.3f})")


COMMANDS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "select": cmd_select, "evaluate": cmd_evaluate,
    "summarize": cmd_summarize, "split": cmd_split, "reduce": cmd_reduce, "baseline": cmd_baseline,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        args = _apply_config(parser, sub, argv, args.command)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s: %(message)s")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        run = Run(args.command, args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](run)
        run.manifest()
    except UsageError as exc:
        sub.print_usage(sys.stderr)
        print(f"tmmsb {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, LogFormatError, SimulationError, ValueError, KeyError) as exc:
        print(f"tmmsb {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
