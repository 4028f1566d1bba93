"""Factorized storage of the per-(transaction, node) membership posteriors.

After a sweep, every node that neither sends nor receives transaction ``n``
has ``phi[n, m] ∝ node_w[m] * txn_w[n]``: its logits are the node's expected
log-membership plus a term that depends on the transaction only.  So the full
``N x M x K`` tensor is held as

* ``node_w`` (M, K) and ``txn_w`` (N, K) for the implicit entries,
* ``sender_phi`` (N, K) for each transaction's sender,
* ``recip_phi`` (R, K) for the ``R`` (transaction, recipient) pairs.

Sums over the implicit entries reduce to products with the ``N x M`` matrix
``1 / (txn_w @ node_w.T)`` minus the contribution the formula would assign
to the explicit positions.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import TransactionLog


@dataclass(frozen=True)
class Layout:
    """Index arrays shared by every state fitted on one log."""

    num_nodes: int
    senders: np.ndarray  # (N,)
    rn: np.ndarray  # (R,) transaction of each recipient pair, non-decreasing
    rm: np.ndarray  # (R,) node of each recipient pair

    @classmethod
    def from_log(cls, log: TransactionLog) -> "Layout":
        rn, rm = np.nonzero(log.recipient_matrix())
        return cls(log.num_nodes, log.senders, rn, rm)

    @property
    def num_transactions(self) -> int:
        return len(self.senders)


@dataclass(frozen=True)
class CompactPhi:
    layout: Layout
    node_w: np.ndarray
    txn_w: np.ndarray
    sender_phi: np.ndarray
    recip_phi: np.ndarray

    @classmethod
    def from_node_probs(cls, layout: Layout, probs: np.ndarray) -> "CompactPhi":
        """State with ``phi[n, m] = probs[m]`` for every transaction."""
        return cls(layout, probs, np.ones((layout.num_transactions, probs.shape[1])),
                   probs[layout.senders].copy(), probs[layout.rm].copy())

    def dense(self) -> np.ndarray:
        lay = self.layout
        phi = self.node_w[None, :, :] * self.txn_w[:, None, :]
        phi /= phi.sum(axis=2, keepdims=True)
        phi[lay.rn, lay.rm] = self.recip_phi
        phi[np.arange(lay.num_transactions), lay.senders] = self.sender_phi
        return phi


@dataclass(frozen=True)
class Stats:
    recv: np.ndarray  # (N, K) recipient mass per transaction
    rest: np.ndarray  # (N, K) non-recipient, non-sender mass per transaction
    node_totals: np.ndarray  # (M, K) sum over transactions
    entropy: float  # -sum phi log phi


def _xlogx(p: np.ndarray) -> float:
    return float((p * np.log(np.maximum(p, 1e-300))).sum())


def _chunks(n: int, parts: int):
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def statistics(cp: CompactPhi, threads: int = 1) -> Stats:
    """Aggregates of the full tensor without materializing it.

    Transaction chunks may run on ``threads`` workers; their node totals and
    entropy terms are added in chunk order, so a given thread count always
    gives the same result.
    """
    lay = cp.layout
    a, w = cp.node_w, cp.txn_w
    n_txn, k = w.shape
    log_a = np.log(a)

    def work(sl: slice):
        q = 1.0 / (w[sl] @ a.T)  # (n, M)
        ws = w[sl]
        row = q @ a  # (n, K): sum_m a_m q_nm
        col = q.T @ ws  # (M, K): sum_n w_n q_nm
        log_q_sum = float(np.log(q).sum())
        # explicit positions inside this chunk
        s_lo, s_hi = sl.start, sl.stop
        r_lo, r_hi = np.searchsorted(lay.rn, [s_lo, s_hi])
        idx_n = np.concatenate([np.arange(s_lo, s_hi), lay.rn[r_lo:r_hi]])
        idx_m = np.concatenate([lay.senders[s_lo:s_hi], lay.rm[r_lo:r_hi]])
        qe = q[idx_n - s_lo, idx_m]
        np.subtract.at(row, idx_n - s_lo, a[idx_m] * qe[:, None])
        np.subtract.at(col, idx_m, w[idx_n] * qe[:, None])
        log_q_sum -= float(np.log(qe).sum())
        return row, col, log_q_sum

    parts = _chunks(n_txn, threads)
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, parts))
    else:
        results = [work(sl) for sl in parts]

    row = np.concatenate([r[0] for r in results])
    col = results[0][1]
    log_q = results[0][2]
    for r in results[1:]:
        col = col + r[1]
        log_q += r[2]

    rest = np.maximum(w * row, 0.0)
    implicit_totals = np.maximum(a * col, 0.0)
    recv = np.zeros((n_txn, k))
    np.add.at(recv, lay.rn, cp.recip_phi)
    totals = implicit_totals.copy()
    np.add.at(totals, lay.senders, cp.sender_phi)
    np.add.at(totals, lay.rm, cp.recip_phi)

    # implicit entries: log phi = log a_m + log w_n + log q_nm
    implicit = (log_a * implicit_totals).sum() + (np.log(w) * rest).sum() + log_q
    entropy = -(implicit + _xlogx(cp.sender_phi) + _xlogx(cp.recip_phi))
    return Stats(recv, rest, totals, float(entropy))


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = logits - logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits


def sweep(cp: CompactPhi, stats: Stats, e_log_pi: np.ndarray, log_b: np.ndarray,
          log_1b: np.ndarray) -> CompactPhi:
    """Senders first, then every other slice, as in the dense sweep."""
    lay = cp.layout
    s = lay.senders
    sender_phi = _softmax_rows(e_log_pi[s] + stats.recv @ log_b.T + stats.rest @ log_1b.T)
    hit = sender_phi @ log_b
    miss = sender_phi @ log_1b
    node_w = np.exp(e_log_pi - e_log_pi.max(axis=1, keepdims=True))
    txn_w = np.exp(miss - miss.max(axis=1, keepdims=True))
    recip_phi = _softmax_rows(e_log_pi[lay.rm] + hit[lay.rn])
    return CompactPhi(lay, node_w, txn_w, sender_phi, recip_phi)


def b_statistics(cp: CompactPhi, stats: Stats):
    hits = cp.sender_phi.T @ stats.recv
    exposure = cp.sender_phi.T @ (stats.recv + stats.rest)
    return hits, exposure


def data_term(cp: CompactPhi, stats: Stats, log_b: np.ndarray, log_1b: np.ndarray) -> float:
    return float(((cp.sender_phi @ log_b) * stats.recv).sum()
                 + ((cp.sender_phi @ log_1b) * stats.rest).sum())
