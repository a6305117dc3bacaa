"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 malformed input, 3 internal
consistency fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import fileio
from .evaluation import (f1_report, gamma_candidates, heldout_protocol,
                         lambda_candidates, mode_levels)
from .generative import REGIMES, BRegime, SimulationConfig, generate_network
from .gibbs import ChainConfig, SamplerState, complete_log_likelihood
from .model import (ConsistencyError, Hyperparams, count_branches, recount_stats)
from .pipeline import infer

log = logging.getLogger("hmmsb")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_FAULT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# settings: defaults < config file < command line
# ---------------------------------------------------------------------------

HYPER_KEYS = {"K": ("max_depth", int), "gamma": ("gamma", float), "m": ("m", float),
              "pi": ("pi", float), "lambda1": ("lambda1", float),
              "lambda2": ("lambda2", float)}
CHAIN_DEFAULTS = {"burnin": 1000, "samples": 100, "lag": 5}


def _add_hyper_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--K", type=int, help="maximum hierarchy depth (default 2)")
    g.add_argument("--gamma", type=float, help="nCRP concentration (default 1.0)")
    g.add_argument("--m", type=float, help="level-prior mean (default 0.5)")
    g.add_argument("--pi", type=float, help="level-prior concentration (default 0.5)")
    g.add_argument("--lambda1", type=float, help="Beta prior shape for edges (default 0.5)")
    g.add_argument("--lambda2", type=float, help="Beta prior shape for non-edges (default 0.5)")


def _add_common(p):
    p.add_argument("--config", type=Path, help="flat key=value file; flags override it")
    p.add_argument("--seed", type=int, help="random seed (fallback: $HMMSB_SEED, then 0)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_chain_flags(p):
    g = p.add_argument_group("chain")
    g.add_argument("--burnin", type=int, help="burn-in sweeps (default 1000)")
    g.add_argument("--samples", type=int, help="retained samples (default 100)")
    g.add_argument("--lag", type=int, help="sweeps between retained samples (default 5)")
    g.add_argument("--check-every", type=int,
                   help="recount statistics every n sweeps (0 disables)")


def _add_search_flags(p, default_grid):
    g = p.add_argument_group("hyperparameter search")
    g.add_argument("--grid", choices=("none", "gamma", "lambda", "both"),
                   help=f"candidate set scored by marginal likelihood (default {default_grid})")
    g.add_argument("--is-samples", type=int, help="importance samples per grid cell (default 10000)")
    g.add_argument("--threads", type=int, help="grid cells evaluated concurrently (default 1)")


def _settings(args, keys) -> dict:
    """Merge config-file values under command-line values for ``keys``."""
    from_file = fileio.load_config(args.config) if getattr(args, "config", None) else {}
    names = {key: key.replace("-", "_") for key in keys}
    unknown = set(from_file) - {n.lower() for n in names.values()} - {"seed"}
    if unknown:
        raise fileio.InputError(f"{args.config}: unknown keys {sorted(unknown)}")
    out = {}
    for key, name in names.items():
        value = getattr(args, name, None)
        if value is None:
            value = from_file.get(name.lower())
        out[key] = value
    seed = args.seed
    if seed is None and "seed" in from_file:
        seed = from_file["seed"]
    if seed is None:
        seed = os.environ.get("HMMSB_SEED", 0)
    try:
        out["seed"] = int(seed)
    except ValueError:
        raise UsageError(f"seed must be an integer, got {seed!r}") from None
    return out


def _typed(settings: dict, key: str, cast, default=None):
    value = settings.get(key)
    if value is None:
        return default
    try:
        return cast(value)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {value!r}") from None


def _hyper(settings: dict) -> Hyperparams:
    values = {}
    for flag, (field, cast) in HYPER_KEYS.items():
        v = _typed(settings, flag, cast)
        if v is not None:
            values[field] = v
    try:
        return Hyperparams(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _chain_config(settings: dict) -> ChainConfig:
    try:
        return ChainConfig(burn_in=_typed(settings, "burnin", int, CHAIN_DEFAULTS["burnin"]),
                           n_samples=_typed(settings, "samples", int, CHAIN_DEFAULTS["samples"]),
                           lag=_typed(settings, "lag", int, CHAIN_DEFAULTS["lag"]),
                           check_every=_typed(settings, "check-every", int, 0))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _candidates(grid: str, base: Hyperparams):
    if grid == "none":
        return None
    if grid == "gamma":
        return gamma_candidates(base)
    if grid == "lambda":
        return lambda_candidates(base)
    return [c for g in gamma_candidates(base) for c in lambda_candidates(g)]


def _manifest(command: str, settings: dict, inputs=()) -> dict:
    return {"program": "hmmsb", "version": __version__, "command": command,
            "settings": {k: v for k, v in sorted(settings.items()) if v is not None},
            "inputs": [str(p) for p in inputs]}


def _floats(text: str, what: str) -> tuple:
    try:
        return tuple(float(x) for x in str(text).split(","))
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def _grid_rows(cells, selected):
    return [(c.hyper.gamma, c.hyper.m, c.hyper.pi, c.hyper.lambda1, c.hyper.lambda2,
             repr(c.estimate.log_ml), repr(c.estimate.se), repr(c.estimate.ess),
             int(c.hyper == selected)) for c in cells]


GRID_HEADER = ["gamma", "m", "pi", "lambda1", "lambda2", "log_ml", "se", "ess", "selected"]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    keys = list(HYPER_KEYS) + ["n-actors", "regime", "theta", "b-on", "b-off"]
    s = _settings(args, keys)
    hyper = _hyper(s)
    n = _typed(s, "n-actors", int, 150)
    theta = _floats(s["theta"], "theta") if s.get("theta") else None
    regime = None
    if s.get("regime"):
        r = _typed(s, "regime", int)
        if r not in REGIMES:
            raise UsageError(f"regime must be one of {sorted(REGIMES)}")
        regime = REGIMES[r]
    if s.get("b-on") or s.get("b-off"):
        if not (s.get("b-on") and s.get("b-off")):
            raise UsageError("b-on and b-off must be given together")
        regime = BRegime(_floats(s["b-on"], "b-on"), _floats(s["b-off"], "b-off"))
    try:
        config = SimulationConfig(n, hyper, theta, regime, s["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sim = generate_network(config)
    manifest = _manifest("simulate", s)
    prefix = args.out
    joint = complete_log_likelihood(SamplerState.from_assignment(sim.network, hyper,
                                                                 sim.paths, sim.levels))
    with fileio.output_set() as out:
        fileio.save_edge_list(out.path(f"{prefix}.edges.tsv"), sim.network, manifest)
        fileio.save_hierarchy(out.path(f"{prefix}.truth.json"), sim.paths, manifest=manifest)
        truth = [fileio.SampleRecord(0, sim.paths, sim.levels, joint)]
        fileio.write_samples(out.path(f"{prefix}.truth_levels.jsonl"), truth, n, hyper,
                             s["seed"], manifest)
        fileio.save_csv(out.path(f"{prefix}.b_map.csv"), fileio.B_MAP_HEADER,
                        fileio.b_map_rows(sim.b_values), manifest)
        summary = {"manifest": manifest, "seed": s["seed"], "n_actors": n,
                   "n_edges": sim.network.n_edges, "density": sim.network.density(),
                   "branches_size_ge_5": count_branches(sim.paths, 5),
                   "theta": sim.theta.tolist() if theta is None else list(theta)}
        fileio._write_text(out.path(f"{prefix}.manifest.json"),
                           json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"wrote {n} actors, {sim.network.n_edges} edges to {prefix}.*")
    return EXIT_OK


def cmd_infer(args) -> int:
    keys = list(HYPER_KEYS) + ["burnin", "samples", "lag", "check-every", "grid",
                               "is-samples", "threads", "min-community-size"]
    s = _settings(args, keys)
    network = fileio.load_edge_list(args.edges, args.labels)
    base = _hyper(s)
    chain_cfg = _chain_config(s)
    grid = s.get("grid") or "none"
    if grid not in ("none", "gamma", "lambda", "both"):
        raise UsageError(f"grid must be none, gamma, lambda or both, got {grid!r}")
    min_size = _typed(s, "min-community-size", int, 5)
    result = infer(network, base, chain_cfg, seed=s["seed"],
                   candidates=_candidates(grid, base),
                   n_is_samples=_typed(s, "is-samples", int, 10_000),
                   threads=_typed(s, "threads", int, 1), min_community_size=min_size)
    manifest = _manifest("infer", s, [args.edges])
    prefix = args.out
    hyper = result.hyper
    modes = result.consensus.level_modes
    stats, _ = recount_stats(network, result.summary_paths, modes)
    with fileio.output_set() as out:
        if result.grid is not None:
            fileio.save_csv(out.path(f"{prefix}.grid.csv"), GRID_HEADER,
                            _grid_rows(result.grid, hyper), manifest)
        fileio.write_samples(out.path(f"{prefix}.samples.jsonl"), result.chain.samples,
                             network.n_actors, hyper, s["seed"], manifest)
        fileio.save_csv(out.path(f"{prefix}.trace.csv"), ["iteration", "log_likelihood"],
                        [(t + 1, repr(float(v))) for t, v in enumerate(result.chain.trace)],
                        manifest)
        fileio.save_hierarchy(out.path(f"{prefix}.hierarchy.json"), result.summary_paths,
                              stats, hyper, network.node_labels, manifest)
        fileio._write_text(out.path(f"{prefix}.hierarchy.dot"),
                           fileio.hierarchy_dot(result.summary_paths, network.node_labels,
                                                manifest))
        if args.network_dot:
            fileio._write_text(out.path(f"{prefix}.network.dot"),
                               fileio.network_dot(network, result.summary_paths, modes,
                                                  manifest))
    print(f"selected {hyper}; final log-likelihood {result.chain.trace[-1]:.3f}")
    return EXIT_OK


def cmd_eval_f1(args) -> int:
    predicted = fileio.load_hierarchy(args.predicted)
    truth = fileio.load_hierarchy(args.truth)
    if predicted.shape[0] != truth.shape[0]:
        raise fileio.InputError("predicted and truth hierarchies cover different actor counts")
    report = f1_report(predicted, truth)
    rows = [(c.level, repr(c.precision), repr(c.recall), repr(c.f1), c.tp, c.fp, c.fn, c.tn)
            for c in report.per_level]
    rows.append(("total", "", "", repr(report.total), "", "", "", ""))
    header = ["level", "precision", "recall", "f1", "tp", "fp", "fn", "tn"]
    manifest = {"program": "hmmsb", "version": __version__, "command": "eval-f1",
                "inputs": [str(args.predicted), str(args.truth)]}
    text = fileio.format_csv(header, rows, manifest)
    if args.out:
        with fileio.output_set() as out:
            fileio._write_text(out.path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_heldout(args) -> int:
    keys = list(HYPER_KEYS) + ["splits", "grid", "is-samples", "threads"]
    s = _settings(args, keys)
    network = fileio.load_edge_list(args.edges)
    base = _hyper(s)
    grid = s.get("grid") or "lambda"
    candidates = _candidates(grid, base) or [base]
    splits = _typed(s, "splits", int, 5)
    if splits < 1:
        raise UsageError("splits must be at least 1")
    if network.n_actors < 2:
        raise fileio.InputError(f"{args.edges}: held-out splits need at least 2 actors")
    result = heldout_protocol(network, base, splits, candidates,
                              _typed(s, "is-samples", int, 10_000), s["seed"],
                              _typed(s, "threads", int, 1))
    manifest = _manifest("heldout", s, [args.edges])
    rows = [(r.split, len(r.train_actors), len(r.test_actors), r.selected.gamma,
             r.selected.lambda1, r.selected.lambda2, repr(r.test.log_ml), repr(r.test.se),
             " ".join(map(str, r.test_actors.tolist())))
            for r in result.splits]
    header = ["split", "n_train", "n_test", "gamma", "lambda1", "lambda2",
              "test_log_ml", "test_se", "test_actors"]
    summary = {"manifest": manifest, "splits": splits,
               "mean_test_log_ml": result.mean_test_log_ml}
    with fileio.output_set() as out:
        fileio.save_csv(out.path(f"{args.out}.heldout.csv"), header, rows, manifest)
        for r in result.splits:
            fileio.save_csv(out.path(f"{args.out}.split{r.split}.grid.csv"), GRID_HEADER,
                            _grid_rows(r.train_cells, r.selected), manifest)
        fileio._write_text(out.path(f"{args.out}.heldout_summary.json"),
                           json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"mean test log marginal likelihood {result.mean_test_log_ml:.4f}")
    return EXIT_OK


def cmd_export_dot(args) -> int:
    paths = fileio.load_hierarchy(args.hierarchy)
    manifest = {"program": "hmmsb", "version": __version__, "command": "export-dot",
                "inputs": [str(p) for p in (args.hierarchy, args.edges, args.samples) if p]}
    network = levels = None
    if args.edges:
        network = fileio.load_edge_list(args.edges, args.labels)
        if network.n_actors != paths.shape[0]:
            raise fileio.InputError("edge list and hierarchy cover different actor counts")
    if args.samples:
        _, records = fileio.read_samples(args.samples)
        if not records:
            raise fileio.InputError(f"{args.samples}: no sample records")
        levels = mode_levels([r.levels for r in records])
    labels = network.node_labels if network is not None else None
    with fileio.output_set() as out:
        fileio._write_text(out.path(f"{args.out}.hierarchy.dot"),
                           fileio.hierarchy_dot(paths, labels, manifest))
        if network is not None:
            fileio._write_text(out.path(f"{args.out}.network.dot"),
                               fileio.network_dot(network, paths, levels, manifest))
            fileio.save_permuted_adjacency(out.path(f"{args.out}.adjacency.csv"),
                                           out.path(f"{args.out}.permutation.csv"),
                                           network, paths, manifest)
    return EXIT_OK


def cmd_recount_check(args) -> int:
    """Rebuild the sampler's bookkeeping for every stored sample and compare
    it against an independent recount and the stored log-likelihood."""
    network = fileio.load_edge_list(args.edges)
    header, records = fileio.read_samples(args.samples)
    if header["n_actors"] != network.n_actors:
        raise fileio.InputError("samples file and edge list disagree on the number of actors")
    hyper = header["hyper"]
    failures = 0
    for rec in records:
        try:
            rec.levels.validate(hyper.K)
        except ValueError as exc:
            raise fileio.InputError(f"{args.samples}: iteration {rec.iteration}: {exc}") from None
        state = SamplerState.from_assignment(network, hyper, rec.paths, rec.levels)
        expected, _ = recount_stats(network, rec.paths, rec.levels)
        problems = []
        if state.stats != expected:
            problems.append("counts differ from recount")
        if state.n_incompatible_edges():
            problems.append("edge with zero probability")
        ll = complete_log_likelihood(state)
        if not np.isclose(ll, rec.log_likelihood, rtol=0, atol=1e-6 * max(1.0, abs(ll))):
            problems.append(f"log-likelihood {ll!r} != stored {rec.log_likelihood!r}")
        status = "ok" if not problems else "; ".join(problems)
        failures += bool(problems)
        print(f"{rec.iteration}\t{status}")
    if failures:
        raise ConsistencyError(f"{failures} of {len(records)} samples failed the recount check")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hmmsb", description="Hierarchical mixed membership blockmodel toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a synthetic network and its ground truth")
    _add_common(p)
    _add_hyper_flags(p)
    p.add_argument("--n-actors", type=int, help="number of actors (default 150)")
    p.add_argument("--regime", type=int, help="benchmark edge-probability regime 1-4")
    p.add_argument("--theta", help="fixed level proportions, comma-separated")
    p.add_argument("--b-on", help="per-level same-community probabilities, comma-separated")
    p.add_argument("--b-off", help="per-level cross-community probabilities, comma-separated")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="sample hierarchies for an observed network")
    _add_common(p)
    _add_hyper_flags(p)
    _add_chain_flags(p)
    _add_search_flags(p, "none")
    p.add_argument("--min-community-size", type=int,
                   help="merge bottom-level communities up to this size (default 5, 0 disables)")
    p.add_argument("--labels", type=Path, help="actor label sidecar (id<TAB>label)")
    p.add_argument("--network-dot", action="store_true", help="also render the network as DOT")
    p.add_argument("edges", type=Path)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval-f1", help="score a hierarchy against ground truth")
    p.add_argument("predicted", type=Path)
    p.add_argument("truth", type=Path)
    p.add_argument("--out", help="CSV destination (default stdout)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_eval_f1)

    p = sub.add_parser("heldout", help="train/test marginal-likelihood evaluation")
    _add_common(p)
    _add_hyper_flags(p)
    _add_search_flags(p, "lambda")
    p.add_argument("--splits", type=int, help="number of random splits (default 5)")
    p.add_argument("edges", type=Path)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_heldout)

    p = sub.add_parser("export-dot", help="render a hierarchy (and network) as DOT")
    p.add_argument("hierarchy", type=Path)
    p.add_argument("--edges", type=Path, help="edge list to render alongside")
    p.add_argument("--labels", type=Path, help="actor label sidecar")
    p.add_argument("--samples", type=Path, help="samples file supplying level modes")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("recount-check", help="verify stored samples against a full recount")
    p.add_argument("samples", type=Path)
    p.add_argument("edges", type=Path)
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_recount_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hmmsb: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (fileio.InputError, OSError) as exc:
        print(f"hmmsb: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConsistencyError as exc:
        print(f"hmmsb: consistency fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
