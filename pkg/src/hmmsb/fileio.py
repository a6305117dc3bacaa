"""Reading and writing networks, samples, hierarchies and reports.

Every writer takes a ``manifest`` dict describing the invocation and embeds
it in the file: as ``# manifest: {...}`` comment lines in TSV/CSV, as a
``manifest`` key in JSON, and as a ``//`` comment in DOT.  Readers skip it.
"""
from __future__ import annotations

import csv
import io
import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .model import (BEntryKey, CompatibilityStats, DirectedNetwork, Hyperparams,
                    LevelAssignments, canonicalize_paths)


class InputError(ValueError):
    """Malformed input file; the message names the file and line."""


def _manifest_line(manifest: Optional[dict], prefix: str = "#") -> str:
    if not manifest:
        return ""
    return f"{prefix} manifest: {json.dumps(manifest, sort_keys=True)}\n"


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# atomic output sets
# ---------------------------------------------------------------------------

class OutputSet:
    """Collects output files under temporary names and publishes them all at
    once.  On error every temporary file is removed, so a failed command
    leaves nothing behind."""

    def __init__(self):
        self._pending: list[tuple[Path, Path]] = []

    def path(self, final) -> Path:
        final = Path(final)
        tmp = final.with_name(f".{final.name}.partial-{os.getpid()}")
        self._pending.append((tmp, final))
        return tmp

    @property
    def final_paths(self) -> list[Path]:
        return [f for _, f in self._pending]

    def commit(self) -> None:
        for tmp, final in self._pending:
            os.replace(tmp, final)
        self._pending.clear()

    def discard(self) -> None:
        for tmp, _ in self._pending:
            try:
                tmp.unlink()
            except FileNotFoundError:
                pass
        self._pending.clear()


@contextmanager
def output_set():
    out = OutputSet()
    try:
        yield out
    except BaseException:
        out.discard()
        raise
    out.commit()


# ---------------------------------------------------------------------------
# edge lists
# ---------------------------------------------------------------------------

def _int_field(text: str, where: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise InputError(f"{where}: expected an integer, got {text!r}") from None


def parse_edge_list(lines: Iterable[str], n_actors: Optional[int] = None,
                    source: str = "<edges>") -> DirectedNetwork:
    """Parse ``src<TAB>dst[<TAB>0|1]`` lines with 0-based ids.

    A ``# n_actors=N`` comment fixes the actor count; otherwise it is one
    more than the largest id seen.  The first non-comment line may be a
    header.  Self-loops, duplicate pairs and out-of-range ids are errors.
    """
    pairs: dict[tuple[int, int], int] = {}
    declared = n_actors
    seen_data = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        where = f"{source}:{lineno}"
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("n_actors="):
                value = _int_field(body.split("=", 1)[1].strip(), where)
                if value < 1:
                    raise InputError(f"{where}: n_actors must be positive")
                if declared is not None and declared != value:
                    raise InputError(f"{where}: n_actors={value} conflicts with {declared}")
                declared = value
            continue
        fields = line.split("\t")
        if not seen_data:
            seen_data = True
            if not fields[0].strip().lstrip("-").isdigit():
                continue   # header row
        if len(fields) not in (2, 3):
            raise InputError(f"{where}: expected 2 or 3 tab-separated fields, got {len(fields)}")
        src = _int_field(fields[0].strip(), where)
        dst = _int_field(fields[1].strip(), where)
        value = 1
        if len(fields) == 3:
            if fields[2].strip() not in ("0", "1"):
                raise InputError(f"{where}: edge value must be 0 or 1, got {fields[2]!r}")
            value = int(fields[2])
        if src < 0 or dst < 0:
            raise InputError(f"{where}: negative actor id")
        if src == dst:
            raise InputError(f"{where}: self-loop on actor {src}")
        if (src, dst) in pairs:
            raise InputError(f"{where}: duplicate pair {src}->{dst}")
        if declared is not None and max(src, dst) >= declared:
            raise InputError(f"{where}: actor id {max(src, dst)} out of range for n_actors={declared}")
        pairs[(src, dst)] = value
    if declared is None:
        if not pairs:
            raise InputError(f"{source}: no edges and no n_actors declaration")
        declared = 1 + max(max(p) for p in pairs)
    edges = np.zeros((declared, declared), dtype=np.uint8)
    for (src, dst), value in pairs.items():
        edges[src, dst] = value
    return DirectedNetwork(edges)


def load_labels(path) -> dict[int, str]:
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t", 1)
            where = f"{path}:{lineno}"
            if len(fields) != 2:
                raise InputError(f"{where}: expected 'id<TAB>label'")
            if lineno == 1 and not fields[0].strip().isdigit():
                continue
            actor = _int_field(fields[0].strip(), where)
            if actor in labels:
                raise InputError(f"{where}: duplicate label for actor {actor}")
            labels[actor] = fields[1]
    return labels


def load_edge_list(path, labels_path=None) -> DirectedNetwork:
    with open(path, encoding="utf-8") as fh:
        net = parse_edge_list(fh, source=str(path))
    if labels_path is not None:
        labels = load_labels(labels_path)
        bad = [a for a in labels if not 0 <= a < net.n_actors]
        if bad:
            raise InputError(f"{labels_path}: label for unknown actor {bad[0]}")
        net = DirectedNetwork(net.edges, [labels.get(i, str(i)) for i in range(net.n_actors)])
    return net


def format_edge_list(network: DirectedNetwork, manifest: Optional[dict] = None) -> str:
    out = [_manifest_line(manifest), f"# n_actors={network.n_actors}\n", "src\tdst\n"]
    src, dst = np.nonzero(network.edges)
    out.extend(f"{s}\t{d}\n" for s, d in zip(src.tolist(), dst.tolist()))
    return "".join(out)


def save_edge_list(path, network: DirectedNetwork, manifest: Optional[dict] = None) -> None:
    _write_text(path, format_edge_list(network, manifest))


def save_labels(path, labels) -> None:
    _write_text(path, "id\tlabel\n" + "".join(f"{i}\t{lab}\n" for i, lab in enumerate(labels)))


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

def _off_diagonal(z: np.ndarray) -> np.ndarray:
    n = z.shape[0]
    return z[~np.eye(n, dtype=bool)]


def rle_encode(values: np.ndarray) -> list[list[int]]:
    v = np.asarray(values).ravel()
    if v.size == 0:
        return []
    starts = np.flatnonzero(np.r_[True, v[1:] != v[:-1]])
    lengths = np.diff(np.r_[starts, v.size])
    return [[int(v[s]), int(n)] for s, n in zip(starts, lengths)]


def rle_decode(runs) -> np.ndarray:
    if not runs:
        return np.zeros(0, dtype=np.int64)
    values, lengths = zip(*runs)
    return np.repeat(np.asarray(values, dtype=np.int64), np.asarray(lengths, dtype=np.int64))


def _levels_from_runs(donor_runs, receiver_runs, n: int) -> LevelAssignments:
    mask = ~np.eye(n, dtype=bool)
    out = []
    for runs in (donor_runs, receiver_runs):
        flat = rle_decode(runs)
        if flat.size != n * (n - 1):
            raise InputError(f"level record holds {flat.size} entries, expected {n * (n - 1)}")
        z = np.zeros((n, n), dtype=np.int64)
        z[mask] = flat
        out.append(z)
    return LevelAssignments(*out)


def sample_record(iteration: int, paths, levels: LevelAssignments, log_likelihood: float) -> dict:
    return {
        "iteration": int(iteration),
        "paths": [",".join(str(int(x)) for x in row) for row in np.asarray(paths)],
        "donor": rle_encode(_off_diagonal(levels.donor)),
        "receiver": rle_encode(_off_diagonal(levels.receiver)),
        "log_likelihood": float(log_likelihood),
    }


def write_samples(path, samples, n_actors: int, hyper: Hyperparams, seed=None,
                  manifest: Optional[dict] = None) -> None:
    """One JSON header line, then one line per sample.  ``samples`` yields
    objects with ``iteration``, ``paths``, ``levels`` and ``log_likelihood``."""
    header = {"format": "hmmsb-samples", "version": 1, "n_actors": int(n_actors),
              "max_depth": hyper.K, "hyper": hyper.as_dict(), "seed": seed,
              "manifest": manifest or {}}
    lines = [json.dumps(header, sort_keys=True)]
    for s in samples:
        lines.append(json.dumps(sample_record(s.iteration, s.paths, s.levels, s.log_likelihood)))
    _write_text(path, "\n".join(lines) + "\n")


class SampleRecord:
    __slots__ = ("iteration", "paths", "levels", "log_likelihood")

    def __init__(self, iteration, paths, levels, log_likelihood):
        self.iteration = iteration
        self.paths = paths
        self.levels = levels
        self.log_likelihood = log_likelihood


def read_samples(path) -> tuple[dict, list[SampleRecord]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines()]
    if not lines:
        raise InputError(f"{path}: empty samples file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:1: bad header ({exc.msg})") from None
    if header.get("format") != "hmmsb-samples":
        raise InputError(f"{path}:1: not a samples file")
    n, K = int(header["n_actors"]), int(header["max_depth"])
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            rec = json.loads(line)
            paths = np.array([[int(x) for x in p.split(",")] for p in rec["paths"]],
                             dtype=np.int64).reshape(n, K)
            levels = _levels_from_runs(rec["donor"], rec["receiver"], n)
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise InputError(f"{where}: malformed sample record ({exc})") from None
        records.append(SampleRecord(int(rec["iteration"]), paths, levels,
                                    float(rec["log_likelihood"])))
    header["hyper"] = Hyperparams(**header["hyper"])
    return header, records


# ---------------------------------------------------------------------------
# hierarchy JSON
# ---------------------------------------------------------------------------

def _b_summaries(stats: CompatibilityStats, prefix: tuple, l1: float, l2: float) -> list:
    rows = []
    for key, (ones, zeros) in sorted(stats.items()):
        if key.parent == prefix:
            rows.append({"donor_child": key.donor_child, "receiver_child": key.receiver_child,
                         "ones": ones, "zeros": zeros,
                         "estimate": (ones + l1) / (ones + zeros + l1 + l2)})
    return rows


def hierarchy_dict(paths, stats: Optional[CompatibilityStats] = None,
                   hyper: Optional[Hyperparams] = None) -> dict:
    """Nested ``{path_prefix, actor_ids, size, children}`` nodes rooted at the
    empty prefix.  With ``stats``, each node lists the B entries it parents."""
    p = np.asarray(paths, dtype=np.int64)
    K = p.shape[1]
    l1, l2 = (hyper.lambda1, hyper.lambda2) if hyper is not None else (1.0, 1.0)

    def build(prefix: tuple, members: np.ndarray) -> dict:
        node = {"path_prefix": list(prefix), "actor_ids": members.tolist(), "size": int(len(members))}
        if stats is not None:
            node["b"] = _b_summaries(stats, prefix, l1, l2)
        children = []
        if len(prefix) < K:
            col = p[members, len(prefix)]
            for c in np.unique(col):
                children.append(build(prefix + (int(c),), members[col == c]))
        node["children"] = children
        return node

    return build((), np.arange(len(p)))


def save_hierarchy(path, paths, stats=None, hyper=None, labels=None,
                   manifest: Optional[dict] = None) -> None:
    p = np.asarray(paths)
    doc = {"format": "hmmsb-hierarchy", "n_actors": int(p.shape[0]),
           "max_depth": int(p.shape[1]), "manifest": manifest or {},
           "root": hierarchy_dict(p, stats, hyper)}
    if labels is not None:
        doc["labels"] = list(labels)
    _write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def paths_from_hierarchy(doc: dict) -> np.ndarray:
    n, K = int(doc["n_actors"]), int(doc["max_depth"])
    paths = np.zeros((n, K), dtype=np.int64)
    seen = np.zeros(n, dtype=bool)

    def visit(node, depth):
        prefix = node["path_prefix"]
        ids = node["actor_ids"]
        if len(prefix) != depth or node["size"] != len(ids):
            raise InputError("hierarchy node is inconsistent with its depth or size")
        kids = node.get("children", [])
        if depth == K:
            if kids:
                raise InputError("hierarchy deeper than max_depth")
            for a in ids:
                if not 0 <= a < n or seen[a]:
                    raise InputError(f"actor {a} missing from range or listed twice")
                seen[a] = True
                paths[a] = prefix
            return
        if sum(c["size"] for c in kids) != node["size"]:
            raise InputError(f"children sizes do not sum to parent size at {prefix}")
        for c in kids:
            if c["path_prefix"][:depth] != prefix:
                raise InputError(f"child {c['path_prefix']} is not under {prefix}")
            visit(c, depth + 1)

    visit(doc["root"], 0)
    if not seen.all():
        raise InputError("hierarchy does not place every actor")
    return paths


def load_hierarchy(path) -> np.ndarray:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return paths_from_hierarchy(doc)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: missing or malformed field {exc}") from None
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# CSV reports
# ---------------------------------------------------------------------------

def format_csv(header: list, rows: Iterable, manifest: Optional[dict] = None) -> str:
    buf = io.StringIO()
    buf.write(_manifest_line(manifest))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def save_csv(path, header, rows, manifest=None) -> None:
    _write_text(path, format_csv(header, rows, manifest))


def read_csv(path) -> tuple[list, list]:
    with open(path, encoding="utf-8") as fh:
        body = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(body))
    return rows[0], rows[1:]


def _prefix_text(prefix) -> str:
    return ".".join(str(x) for x in prefix)


def b_map_rows(b_values: dict) -> list:
    return [(_prefix_text(k.parent), k.level, k.donor_child, k.receiver_child, repr(float(v)))
            for k, v in sorted(b_values.items())]


B_MAP_HEADER = ["parent", "level", "donor_child", "receiver_child", "probability"]


def read_b_map(path) -> dict:
    _, rows = read_csv(path)
    out = {}
    for parent, _, d, r, prob in rows:
        prefix = tuple(int(x) for x in parent.split(".")) if parent else ()
        out[BEntryKey(prefix, int(d), int(r))] = float(prob)
    return out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def parse_config(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment.  Keys use the long
    flag names with dashes or underscores."""
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InputError(f"{source}:{lineno}: empty key")
        out[key.replace("-", "_").lower()] = value
    return out


def load_config(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh, source=str(path))


# ---------------------------------------------------------------------------
# DOT and adjacency exports
# ---------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")
LEVEL_STYLE = {1: "solid", 2: "dashed"}


def _node_id(prefix) -> str:
    return "n_root" if not prefix else "n_" + "_".join(str(x) for x in prefix)


def hierarchy_dot(paths, labels=None, manifest: Optional[dict] = None) -> str:
    """Tree of communities; each node shows its prefix and size, leaves list
    their members."""
    root = hierarchy_dict(paths)
    out = [_manifest_line(manifest, "//"), "digraph hierarchy {\n",
           "  node [shape=box];\n"]

    def visit(node):
        prefix = tuple(node["path_prefix"])
        name = _prefix_text(prefix) or "root"
        text = f"{name}\\nn={node['size']}"
        if not node["children"]:
            members = [labels[a] if labels is not None else str(a) for a in node["actor_ids"]]
            text += "\\n" + " ".join(members)
        text = text.replace('"', '\\"')
        out.append(f'  {_node_id(prefix)} [label="{text}", width={0.5 + 0.05 * node["size"]:.2f}];\n')
        for child in node["children"]:
            out.append(f"  {_node_id(prefix)} -> {_node_id(tuple(child['path_prefix']))};\n")
            visit(child)

    visit(root)
    out.append("}\n")
    return "".join(out)


def network_dot(network: DirectedNetwork, paths, levels: Optional[LevelAssignments] = None,
                manifest: Optional[dict] = None) -> str:
    """Actors coloured by bottom-level community.  Each edge is drawn half in
    the donor's colour and half in the receiver's; its style encodes the
    coarsened interaction level (1 solid, 2 dashed, deeper dotted)."""
    p = np.asarray(paths, dtype=np.int64)
    leaves = {tuple(row): idx for idx, row in enumerate(np.unique(p, axis=0))}
    colour = [PALETTE[leaves[tuple(row)] % len(PALETTE)] for row in p]
    out = [_manifest_line(manifest, "//"), "digraph network {\n",
           "  node [shape=circle, style=filled];\n"]
    for a in range(network.n_actors):
        label = (network.node_labels[a] if network.node_labels is not None else str(a))
        label = label.replace('"', '\\"')
        out.append(f'  a{a} [label="{label}", fillcolor="{colour[a]}"];\n')
    src, dst = np.nonzero(network.edges)
    for s, d in zip(src.tolist(), dst.tolist()):
        level = 1
        if levels is not None:
            level = int(min(levels.donor[s, d], levels.receiver[s, d]))
        style = LEVEL_STYLE.get(level, "dotted")
        out.append(f'  a{s} -> a{d} [color="{colour[s]};0.5:{colour[d]}", style={style}];\n')
    out.append("}\n")
    return "".join(out)


def permutation_by_paths(paths) -> np.ndarray:
    p = np.asarray(paths, dtype=np.int64)
    # lexsort keys: last key is primary
    return np.lexsort(tuple(p[:, k] for k in range(p.shape[1] - 1, -1, -1)))


def adjacency_rows(network: DirectedNetwork, perm: np.ndarray) -> list:
    m = network.edges[np.ix_(perm, perm)]
    return m.astype(int).tolist()


def save_permuted_adjacency(matrix_path, perm_path, network: DirectedNetwork, paths,
                            manifest: Optional[dict] = None) -> np.ndarray:
    perm = permutation_by_paths(paths)
    save_csv(matrix_path, [f"a{a}" for a in perm], adjacency_rows(network, perm), manifest)
    p = np.asarray(paths)
    save_csv(perm_path, ["position", "actor", "path"],
             [(pos, int(a), _prefix_text(p[a])) for pos, a in enumerate(perm)], manifest)
    return perm


def canonical_paths_or_error(paths) -> np.ndarray:
    p = np.asarray(paths, dtype=np.int64)
    if p.ndim != 2 or (p < 1).any():
        raise InputError("paths must be an N x K array of positive integers")
    return canonicalize_paths(p)
