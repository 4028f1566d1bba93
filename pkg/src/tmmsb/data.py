"""Transaction-log I/O, count and socio-matrix reductions, holdout splits and
the hierarchical-clustering baseline."""
from __future__ import annotations

import csv
import io
import json
import warnings
from importlib import resources
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage
from scipy.cluster.vq import kmeans2
from scipy.spatial.distance import pdist

from .core import MembershipMatrix, Transaction, TransactionLog

FORMATS = ("jsonl", "csv")


class LogFormatError(ValueError):
    """A transaction record violates the log format or transaction rules."""

    def __init__(self, line: int, rule: str):
        super().__init__(f"line {line}: {rule}")
        self.line = line
        self.rule = rule


@dataclass(frozen=True)
class CountMatrix:
    counts: np.ndarray


@dataclass(frozen=True)
class SocioMatrix:
    adj: np.ndarray
    threshold: int


def _infer_format(path: Path, fmt: Optional[str]) -> str:
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower()
    if fmt not in FORMATS:
        raise ValueError(f"unknown log format {fmt!r}; expected one of {FORMATS}")
    return fmt


def _records(text: str, fmt: str):
    if fmt == "jsonl":
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogFormatError(lineno, f"malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or "sender" not in rec or "recipients" not in rec:
                raise LogFormatError(lineno, "record needs 'sender' and 'recipients'")
            if not isinstance(rec["recipients"], list):
                raise LogFormatError(lineno, "'recipients' must be an array")
            yield lineno, str(rec["sender"]), [str(r) for r in rec["recipients"]]
    else:
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or not {"sender", "recipients"} <= set(reader.fieldnames):
            raise LogFormatError(1, "CSV header needs 'sender' and 'recipients' columns")
        for row in reader:
            lineno = reader.line_num
            if row["sender"] is None or row["recipients"] is None:
                raise LogFormatError(lineno, "malformed CSV row")
            recips = [r for r in row["recipients"].split(";") if r != ""]
            yield lineno, row["sender"], recips


def parse_log(text: str, fmt: str = "jsonl", nodes: Optional[list] = None) -> TransactionLog:
    """Parse log text; node names get dense indices in first-appearance order.

    ``nodes`` pre-seeds the index (e.g. to include nodes that never appear).
    """
    index: dict = {}
    for name in nodes or ():
        index.setdefault(str(name), len(index))
    raw = []
    for lineno, sender, recips in _records(text, fmt):
        if not recips:
            raise LogFormatError(lineno, "empty recipient list")
        if sender in recips:
            raise LogFormatError(lineno, f"self-send by {sender!r}")
        if len(set(recips)) != len(recips):
            raise LogFormatError(lineno, "duplicate recipient")
        for name in [sender, *recips]:
            index.setdefault(name, len(index))
        raw.append((index[sender], [index[r] for r in recips]))
    names = list(index)
    return TransactionLog(len(names), [Transaction(s, frozenset(r)) for s, r in raw], names)


def load_log(path, fmt: Optional[str] = None, nodes: Optional[list] = None) -> TransactionLog:
    path = Path(path)
    return parse_log(path.read_text(encoding="utf-8"), _infer_format(path, fmt), nodes)


def format_log(log: TransactionLog, fmt: str = "jsonl") -> str:
    names = log.node_labels or tuple(str(i) for i in range(log.num_nodes))
    if fmt == "jsonl":
        lines = [json.dumps({"sender": names[t.sender],
                             "recipients": [names[r] for r in sorted(t.recipients)]})
                 for t in log.transactions]
        return "".join(line + "\n" for line in lines)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sender", "recipients"])
        for t in log.transactions:
            writer.writerow([names[t.sender], ";".join(names[r] for r in sorted(t.recipients))])
        return buf.getvalue()
    raise ValueError(f"unknown log format {fmt!r}")


def save_log(log: TransactionLog, path, fmt: Optional[str] = None) -> None:
    path = Path(path)
    path.write_text(format_log(log, _infer_format(path, fmt)), encoding="utf-8")


def to_counts(log: TransactionLog) -> CountMatrix:
    counts = np.zeros((log.num_nodes, log.num_nodes), dtype=np.int64)
    for t in log.transactions:
        counts[t.sender, list(t.recipients)] += 1
    return CountMatrix(counts)


def to_socio(counts, threshold: int = 1) -> SocioMatrix:
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    c = counts.counts if isinstance(counts, CountMatrix) else np.asarray(counts)
    adj = (c >= threshold).astype(np.int64)
    np.fill_diagonal(adj, 0)
    return SocioMatrix(adj, threshold)


def holdout_split(log: TransactionLog, n_test: int, top_senders: int = 10, seed: int = 0):
    """Hold out ``n_test`` messages sent by the ``top_senders`` most active nodes.

    Sender activity ties are broken by node index.  Returns ``(train, test)``;
    both keep the original transaction order and node indexing.
    """
    if n_test == 0:
        return log, TransactionLog(log.num_nodes, [], log.node_labels)
    sent = log.sent_counts()
    order = np.lexsort((np.arange(log.num_nodes), -sent))
    top = set(order[:top_senders].tolist())
    eligible = [i for i, t in enumerate(log.transactions) if t.sender in top]
    if n_test > len(eligible) or n_test < 0:
        raise ValueError(f"need {n_test} test messages but only {len(eligible)} are eligible")
    rng = np.random.default_rng(seed)
    test_idx = set(rng.choice(eligible, size=n_test, replace=False).tolist())
    train = [i for i in range(len(log)) if i not in test_idx]
    return log.subset(train), log.subset(sorted(test_idx))


def _hard_b(counts: np.ndarray, sent: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    h = np.eye(k)[labels]
    hits = h.T @ counts @ h
    sizes = h.sum(axis=0)
    # a group-k sender exposes every non-sender node, so subtract the sender itself
    exposure = (h * sent[:, None]).T @ (np.ones_like(h) * sizes[None, :] - h)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(exposure > 0, hits / np.where(exposure > 0, exposure, 1.0), 0.0)


def baseline_hierarchical(counts, k: int, sent: Optional[np.ndarray] = None):
    """Average-linkage clustering of the symmetrized count matrix.

    Rows of ``counts + counts.T`` are compared by Euclidean distance and the
    tree is cut at exactly ``k`` clusters.  Labels are renumbered in order of
    first appearance.

    Returns
    -------
    labels : ndarray of int, shape (M,)
    crude_b : ndarray, shape (k, k)
        Messages from label-``k`` senders received by label-``l`` nodes over
        exposed sender/receiver pairs.  Exposure needs the number of messages
        each node sent; without ``sent`` it falls back to the largest
        per-receiver count of each row, a lower bound.
    """
    c = counts.counts if isinstance(counts, CountMatrix) else np.asarray(counts)
    m = c.shape[0]
    if not 1 <= k <= m:
        raise ValueError("need 1 <= k <= M")
    sym = (c + c.T).astype(np.float64)
    if k == m:
        raw = np.arange(m)
    elif k == 1:
        raw = np.zeros(m, dtype=np.int64)
    else:
        tree = linkage(pdist(sym, metric="euclidean"), method="average")
        raw = cut_tree(tree, n_clusters=k).ravel()
    _, first = np.unique(raw, return_index=True)
    remap = {old: new for new, old in enumerate(raw[np.sort(first)])}
    labels = np.array([remap[x] for x in raw], dtype=np.int64)
    if sent is None:
        sent = c.max(axis=1)
    return labels, _hard_b(c, np.asarray(sent, dtype=np.float64), labels, k)


def baseline_from_log(log: TransactionLog, k: int):
    """:func:`baseline_hierarchical` with exact exposures from ``log``."""
    return baseline_hierarchical(to_counts(log), k, sent=log.sent_counts())


def spectral_clusters(counts, k: int, seed=0, n_init: int = 10) -> np.ndarray:
    """Hard labels from k-means on the leading singular vectors of the count matrix.

    Each node is embedded by its sending (left) and receiving (right)
    singular-vector coordinates, scaled by the singular values and
    row-normalized, so nodes with the same send/receive profile across groups
    land together even when they rarely message each other.
    """
    c = counts.counts if isinstance(counts, CountMatrix) else np.asarray(counts)
    c = c.astype(np.float64)
    m = c.shape[0]
    if not 1 <= k <= m:
        raise ValueError("need 1 <= k <= M")
    if k == 1:
        return np.zeros(m, dtype=np.int64)
    u, sv, vt = np.linalg.svd(c)
    x = np.hstack([u[:, :k] * sv[:k], vt[:k].T * sv[:k]])
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    x /= np.where(norm > 0, norm, 1.0)
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(n_init):
        with warnings.catch_warnings():
            # an empty cluster only costs this restart; the best inertia wins
            warnings.simplefilter("ignore", UserWarning)
            centers, labels = kmeans2(x, k, minit="++", seed=rng)
        inertia = ((x - centers[labels]) ** 2).sum()
        if inertia < best_inertia:
            best, best_inertia = labels, inertia
    return best.astype(np.int64)


def ordered_adjacency(matrix, memberships):
    """Reorder a node-by-node matrix by dominant group.

    Nodes are sorted by (argmax membership, descending max membership, node
    index).  Returns ``(reordered, order, boundaries)`` where ``boundaries``
    are the positions at which a new group block starts (excluding 0).
    """
    a = matrix.counts if isinstance(matrix, CountMatrix) else (
        matrix.adj if isinstance(matrix, SocioMatrix) else np.asarray(matrix))
    pi = memberships.pi if isinstance(memberships, MembershipMatrix) else np.asarray(memberships)
    if a.shape != (pi.shape[0], pi.shape[0]):
        raise ValueError("matrix and memberships disagree on the number of nodes")
    group = np.argmax(pi, axis=1)
    strength = pi.max(axis=1)
    order = np.lexsort((np.arange(len(group)), -strength, group))
    sorted_groups = group[order]
    boundaries = (np.flatnonzero(np.diff(sorted_groups)) + 1).tolist()
    return a[np.ix_(order, order)], order, boundaries


def load_reddit_like():
    """The bundled synthetic forum log and its ground-truth memberships.

    248 nodes and 6222 messages drawn from the ``reddit-like`` preset of
    :func:`tmmsb.core.preset`; regenerate with ``tmmsb simulate --preset
    reddit-like``.
    """
    root = resources.files("tmmsb") / "datasets"
    log = parse_log((root / "reddit_like.jsonl").read_text(encoding="utf-8"), "jsonl",
                    nodes=[str(i) for i in range(248)])
    truth = json.loads((root / "reddit_like_truth.json").read_text(encoding="utf-8"))
    return log, MembershipMatrix(np.asarray(truth["pi"], dtype=np.float64))
