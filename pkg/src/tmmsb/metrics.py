"""Predictive likelihood, BIC model selection, soft-clustering scores, link
prediction ranks and group summaries."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .core import MembershipMatrix, TransactionLog, receive_probabilities
from .inference import CLAMP_EPS, FitConfig, FittedModel, fit

logger = logging.getLogger(__name__)


def _pi(x) -> np.ndarray:
    if isinstance(x, (MembershipMatrix, FittedModel)):
        return x.pi
    return np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# likelihood and BIC
# --------------------------------------------------------------------------

def predictive_log_likelihood(pi, b, log: TransactionLog, clamp_eps: float = CLAMP_EPS) -> float:
    """Log-likelihood of the recipient sets with ``p_ij = pi_i B pi_j^T``.

    Each message contributes ``M - 1`` Bernoulli terms, one per non-sender.
    """
    p = np.clip(receive_probabilities(_pi(pi), b), clamp_eps, 1.0 - clamp_eps)
    log_p, log_1p = np.log(p), np.log1p(-p)
    senders = log.senders
    y = log.recipient_matrix()
    hit = (y * log_p[senders]).sum()
    miss_all = log_1p[senders].sum() - log_1p[senders, senders].sum()
    miss_hit = (y * log_1p[senders]).sum()
    return float(hit + miss_all - miss_hit)


def bic(log_l: float, k: int, total_recipients: int) -> float:
    if total_recipients < 1:
        raise ValueError("total_recipients must be >= 1")
    return 2.0 * log_l - (k * k + k) * math.log(total_recipients)


@dataclass
class BicRecord:
    k: int
    log_predictive_likelihood: float
    bic: float
    converged: bool = True
    iterations: int = 0


@dataclass
class BicReport:
    records: list
    total_recipients: int
    best_k: int
    models: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "best_k": self.best_k,
            "total_recipients": self.total_recipients,
            "records": [vars(r).copy() for r in self.records],
        }

    def table(self) -> str:
        lines = [f"{'K':>4} {'log L':>14} {'BIC':>14} {'BIC (x1e4)':>11}  conv"]
        for r in self.records:
            mark = "*" if r.k == self.best_k else " "
            lines.append(f"{r.k:>4} {r.log_predictive_likelihood:>14.4f} {r.bic:>14.4f} "
                         f"{r.bic / 1e4:>11.4f}  {'yes' if r.converged else 'no'} {mark}")
        return "\n".join(lines)


def derived_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def select_k(log: TransactionLog, k_range: Iterable[int], fit_config: FitConfig,
             keep_models: bool = False) -> BicReport:
    """Fit every ``K`` in ``k_range`` and score the training log by BIC.

    Each fit uses a seed derived from ``fit_config.seed`` and ``K``.  The best
    ``K`` maximizes BIC, ties going to the smaller ``K``.
    """
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("k_range is empty")
    total = log.total_recipients
    records, models = [], {}
    for k in ks:
        cfg = replace(fit_config, k=k, seed=derived_seed(fit_config.seed, k))
        model = fit(log, cfg)
        ll = predictive_log_likelihood(model.pi, model.b, log, cfg.clamp_eps)
        records.append(BicRecord(k, ll, bic(ll, k, total), model.converged, model.iterations))
        if not model.converged:
            logger.warning("K=%d did not converge; scored anyway", k)
        if keep_models:
            models[k] = model
    best = max(records, key=lambda r: (r.bic, -r.k))
    return BicReport(records, total, best.k, models)


# --------------------------------------------------------------------------
# soft clustering
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SoftClusterScore:
    precision: float
    recall: float
    f_measure: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> "SoftClusterScore":
        f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        return cls(float(precision), float(recall), float(f))


def soft_bcubed(estimated, truth) -> SoftClusterScore:
    """Extended BCubed precision/recall for two soft clusterings of the same nodes.

    Pairwise similarity is the dot product of membership vectors.  Every
    ordered pair of nodes (self-pairs included) with a positive estimated
    similarity contributes to precision; pairs with a positive true
    similarity contribute to recall.  The two matrices may use different
    numbers of groups.
    """
    est, tru = _pi(estimated), _pi(truth)
    if est.shape[0] != tru.shape[0]:
        raise ValueError("estimated and truth cover different numbers of nodes")
    if np.any(est.sum(axis=1) <= 0) or np.any(tru.sum(axis=1) <= 0):
        raise ValueError("membership rows must not be all zero")
    s_est = est @ est.T
    s_tru = tru @ tru.T
    low = np.minimum(s_est, s_tru)
    p_mask = s_est > 0
    r_mask = s_tru > 0
    precision = (low[p_mask] / s_est[p_mask]).mean()
    recall = (low[r_mask] / s_tru[r_mask]).mean()
    return SoftClusterScore.from_pr(precision, recall)


# --------------------------------------------------------------------------
# link prediction
# --------------------------------------------------------------------------

def message_ranks(p: np.ndarray, log: TransactionLog) -> np.ndarray:
    """Rank of the worst-ranked true recipient of every message.

    Candidates are all non-senders ordered by descending ``p[sender]``; tied
    candidates all take the worst rank of their tie block.
    """
    out = np.empty(len(log), dtype=np.int64)
    for n, t in enumerate(log.transactions):
        if not t.recipients:
            raise ValueError(f"held-out message {n} has no recipients")
        row = np.delete(p[t.sender], t.sender)
        worst = min(p[t.sender, r] for r in t.recipients)
        out[n] = int((row >= worst).sum())
    return out


def rank_at_full_recall(model, heldout: TransactionLog, b: Optional[np.ndarray] = None) -> float:
    """Mean over held-out messages of the rank at which every recipient is found.

    ``model`` is a :class:`FittedModel`, or a membership matrix together with
    an interaction matrix ``b`` (e.g. one-hot baseline labels and crude B).
    """
    if len(heldout) == 0:
        raise ValueError("no held-out messages")
    pi = _pi(model)
    b = model.b if b is None else np.asarray(b)
    if heldout.num_nodes != pi.shape[0]:
        raise ValueError("held-out log and model disagree on the number of nodes")
    return float(message_ranks(receive_probabilities(pi, b), heldout).mean())


# --------------------------------------------------------------------------
# group summaries
# --------------------------------------------------------------------------

@dataclass
class GroupSummary:
    n_sent: np.ndarray  # NaN marks an empty group
    n_recv: np.ndarray
    expected_size: np.ndarray
    hard_size: np.ndarray
    b: np.ndarray
    weighted_b: np.ndarray

    def to_dict(self) -> dict:
        def clean(a):
            return [None if isinstance(x, float) and math.isnan(x) else x for x in a.tolist()]
        return {
            "n_sent": clean(self.n_sent),
            "n_recv": clean(self.n_recv),
            "expected_size": self.expected_size.tolist(),
            "hard_size": self.hard_size.tolist(),
            "b": self.b.tolist(),
            "weighted_b": self.weighted_b.tolist(),
        }

    def table(self) -> str:
        k = len(self.n_sent)
        head = f"{'n_sent':>8} {'n_recv':>8} {'E(m)':>7} {'m_hat':>6} |"
        head += "".join(f"{j + 1:>7}" for j in range(k)) + " | group"
        lines = [" " * 33 + "100 x B", head]
        for g in range(k):
            fmt = lambda x: "     -" if math.isnan(x) else f"{x:8.1f}"
            row = f"{fmt(self.n_sent[g])} {fmt(self.n_recv[g])} {self.expected_size[g]:7.1f} "
            row += f"{self.hard_size[g]:6d} |" + "".join(f"{100 * v:7.1f}" for v in self.b[g])
            lines.append(row + f" | {g + 1}")
        return "\n".join(lines)


def weight_by_group_size(b, expected_size) -> np.ndarray:
    """Scale column ``j`` of ``b`` by the expected size of group ``j``."""
    return np.asarray(b, dtype=np.float64) * np.asarray(expected_size, dtype=np.float64)[None, :]


def group_summaries(model, log: TransactionLog, b: Optional[np.ndarray] = None) -> GroupSummary:
    pi = _pi(model)
    b = model.b if b is None else np.asarray(b)
    if pi.shape[0] != log.num_nodes:
        raise ValueError("model and log disagree on the number of nodes")
    sent = log.sent_counts().astype(np.float64)
    recv = log.received_counts().astype(np.float64)
    size = pi.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        n_sent = np.where(size > 0, (pi * sent[:, None]).sum(axis=0) / size, np.nan)
        n_recv = np.where(size > 0, (pi * recv[:, None]).sum(axis=0) / size, np.nan)
    hard = np.bincount(np.argmax(pi, axis=1), minlength=pi.shape[1])
    return GroupSummary(n_sent, n_recv, size, hard, b, weight_by_group_size(b, size))


def predicted_frequency_matrix(model, log: TransactionLog, b: Optional[np.ndarray] = None) -> np.ndarray:
    """Expected message counts ``s_i * p_ij`` with ``s_i`` the messages sent by ``i``."""
    pi = _pi(model)
    b = model.b if b is None else np.asarray(b)
    return log.sent_counts()[:, None] * receive_probabilities(pi, b)
