"""Coordinate-ascent variational EM for the transactional block-model.

The variational family factorizes over per-node Dirichlets ``q(pi_m | gamma_m)``
and per-(transaction, node) categoricals ``q(z_nm | phi_nm)``.  The outer loop
sets ``B`` to its closed-form maximizer; the inner loop alternates ``phi``
sweeps and the ``gamma`` update.

Within one ``phi`` sweep the sender slices of all transactions are updated
first, then every non-sender slice.  Given the sender slice, non-sender slices
of a transaction do not interact in the bound, and slices of different
transactions only interact through ``gamma``, so each half-sweep is an exact
block maximization and the bound never decreases.
"""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import digamma, gammaln, logsumexp

from . import compact
from .compact import CompactPhi, Layout
from .core import MembershipMatrix, ModelParams, TransactionLog
from .data import baseline_hierarchical, spectral_clusters, to_counts

logger = logging.getLogger(__name__)

CLAMP_EPS = 1e-9
INITS = ("spectral", "uniform-jitter", "baseline-clusters", "ground-truth")


class EmptyCellWarning(UserWarning):
    """A group pair received zero soft exposure while estimating ``B``."""


class VariationalState:
    """Dirichlet parameters ``gamma`` (M, K), categorical parameters ``phi``
    (N, M, K) and the current interaction matrix ``b`` (K, K).

    ``phi`` may be given densely or as a :class:`~tmmsb.compact.CompactPhi`;
    the dense tensor is built on first access to :attr:`phi`.
    """

    def __init__(self, gamma, phi, b):
        self.gamma = np.asarray(gamma, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        if isinstance(phi, CompactPhi):
            self.compact, self._phi = phi, None
        else:
            self.compact, self._phi = None, np.asarray(phi, dtype=np.float64)

    @property
    def phi(self) -> np.ndarray:
        if self._phi is None:
            self._phi = self.compact.dense()
        return self._phi

    def check(self, atol: float = 1e-9) -> None:
        if np.any(self.gamma <= 0):
            raise ValueError("gamma entries must be positive")
        if np.any(self.phi < 0) or not np.allclose(self.phi.sum(axis=2), 1.0, rtol=0, atol=atol):
            raise ValueError("phi slices must be probability vectors")


@dataclass
class FitConfig:
    k: int
    alpha_value: float = 0.1
    max_outer_iters: int = 100
    max_inner_iters: int = 20
    rel_tol: float = 1e-6
    init: str = "spectral"
    jitter_scale: float = 0.5
    seed: int = 0
    n_restarts: int = 1
    clamp_eps: float = CLAMP_EPS
    threads: int = 1

    def __post_init__(self):
        if min(self.k, self.max_outer_iters, self.max_inner_iters, self.threads, self.n_restarts) < 1:
            raise ValueError("k, iteration caps, threads and n_restarts must be >= 1")
        if self.rel_tol <= 0 or self.alpha_value <= 0 or self.jitter_scale < 0:
            raise ValueError("rel_tol and alpha_value must be positive, jitter_scale non-negative")
        if not 0 < self.clamp_eps < 0.5:
            raise ValueError("clamp_eps must lie in (0, 0.5)")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FittedModel:
    params: ModelParams
    memberships: MembershipMatrix
    state: VariationalState
    trace: tuple
    converged: bool
    iterations: int
    config: Optional[FitConfig] = None

    @property
    def b(self) -> np.ndarray:
        return self.params.b

    @property
    def pi(self) -> np.ndarray:
        return self.memberships.pi

    @property
    def k(self) -> int:
        return self.params.k

    def permuted(self, perm) -> "FittedModel":
        """Relabel groups so that new group ``k`` is old group ``perm[k]``."""
        perm = np.asarray(perm)
        b = self.params.b[np.ix_(perm, perm)]
        st = self.state
        if st.compact is not None:
            c = st.compact
            phi = CompactPhi(c.layout, c.node_w[:, perm], c.txn_w[:, perm],
                             c.sender_phi[:, perm], c.recip_phi[:, perm])
        else:
            phi = st.phi[:, :, perm]
        state = VariationalState(st.gamma[:, perm], phi, b)
        return FittedModel(ModelParams(self.k, b, self.params.alpha[perm]),
                           MembershipMatrix(self.memberships.pi[:, perm]), state,
                           self.trace, self.converged, self.iterations, self.config)

    def to_dict(self) -> dict:
        cfg = self.config.to_dict() if self.config is not None else None
        return {
            "k": self.k,
            "alpha": self.params.alpha.tolist(),
            "b": self.params.b.tolist(),
            "gamma": self.state.gamma.tolist(),
            "pi": self.memberships.pi.tolist(),
            "trace": list(self.trace),
            "converged": self.converged,
            "iterations": self.iterations,
            "seed": cfg["seed"] if cfg else None,
            "config": cfg,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FittedModel":
        """Rebuild a model from :meth:`to_dict` output.

        ``phi`` is not serialized; the returned state carries an empty
        ``(0, M, K)`` tensor.
        """
        k = int(doc["k"])
        b = np.asarray(doc["b"], dtype=np.float64)
        gamma = np.asarray(doc["gamma"], dtype=np.float64)
        cfg = FitConfig(**doc["config"]) if doc.get("config") else None
        state = VariationalState(gamma, np.zeros((0,) + gamma.shape), b)
        return cls(ModelParams(k, b, np.asarray(doc["alpha"])),
                   MembershipMatrix(np.asarray(doc["pi"], dtype=np.float64)), state,
                   tuple(doc.get("trace", ())), bool(doc.get("converged", False)),
                   int(doc.get("iterations", 0)), cfg)


# --------------------------------------------------------------------------
# single-coordinate operations
# --------------------------------------------------------------------------

def expected_log_pi(gamma) -> np.ndarray:
    """E_q[log pi] under Dirichlet(gamma); works row-wise on 2-d input."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma <= 0):
        raise ValueError("Dirichlet parameters must be positive")
    return digamma(gamma) - digamma(gamma.sum(axis=-1, keepdims=True))


def _log_b(b: np.ndarray, clamp_eps: float = CLAMP_EPS):
    b = np.clip(b, clamp_eps, 1.0 - clamp_eps)
    return np.log(b), np.log1p(-b)


def update_phi(state: VariationalState, log: TransactionLog, n: int, m: int,
               clamp_eps: float = CLAMP_EPS) -> np.ndarray:
    """Optimal ``phi[n, m]`` holding every other variational factor fixed."""
    t = log.transactions[n]
    s = t.sender
    log_b, log_1b = _log_b(state.b, clamp_eps)
    logits = expected_log_pi(state.gamma[m]).copy()
    if m != s:
        rows = log_b if m in t.recipients else log_1b
        logits += state.phi[n, s] @ rows
    else:
        phi_n = state.phi[n]
        recv = np.zeros(state.b.shape[0])
        other = np.zeros(state.b.shape[0])
        for j in range(log.num_nodes):
            if j == s:
                continue
            if j in t.recipients:
                recv += phi_n[j]
            else:
                other += phi_n[j]
        logits += log_b @ recv + log_1b @ other
    return np.exp(logits - logsumexp(logits))


def update_gamma(alpha, phi, m: int) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    return np.asarray(alpha, dtype=np.float64) + phi[:, m, :].sum(axis=0)


def _node_sum(phi: np.ndarray) -> np.ndarray:
    """Sum of ``phi`` over the node axis, shape ``(N, K)``."""
    return np.matmul(np.ones((1, phi.shape[1])), phi)[:, 0]


def _b_statistics(phi: np.ndarray, senders: np.ndarray, y: np.ndarray):
    """Soft counts of received (``hits``) and exposed (``exposure``) group pairs."""
    n_idx = np.arange(len(senders))
    phi_s = phi[n_idx, senders]  # (N, K)
    recv = np.matmul(y[:, None, :], phi)[:, 0]
    total = _node_sum(phi) - phi_s
    hits = phi_s.T @ recv
    exposure = phi_s.T @ total
    return hits, exposure


def estimate_b(phi, log: TransactionLog, clamp_eps: float = CLAMP_EPS,
               y: Optional[np.ndarray] = None) -> np.ndarray:
    """Closed-form maximizer of the bound with respect to ``B``.

    Cells with zero soft exposure are set to ``clamp_eps`` and reported with
    an :class:`EmptyCellWarning`.
    """
    phi = np.asarray(phi, dtype=np.float64)
    y = log.recipient_matrix() if y is None else y
    return _b_from_counts(*_b_statistics(phi, log.senders, y), clamp_eps)


def _b_from_counts(hits: np.ndarray, exposure: np.ndarray, clamp_eps: float) -> np.ndarray:
    empty = exposure <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        b = np.where(empty, clamp_eps, hits / np.where(empty, 1.0, exposure))
    if empty.any():
        cells = [tuple(map(int, c)) for c in np.argwhere(empty)]
        warnings.warn(f"no soft exposure for group pairs {cells}; set to {clamp_eps}",
                      EmptyCellWarning, stacklevel=3)
    return np.clip(b, clamp_eps, 1.0 - clamp_eps)


def _dirichlet_log_norm(a: np.ndarray) -> np.ndarray:
    return gammaln(a.sum(axis=-1)) - gammaln(a).sum(axis=-1)


def elbo(state: VariationalState, log: TransactionLog, alpha, clamp_eps: float = CLAMP_EPS,
         y: Optional[np.ndarray] = None) -> float:
    """Evidence lower bound of the mean-field family, conditioning on senders."""
    gamma, phi = state.gamma, state.phi
    k = gamma.shape[1]
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (k,))
    y = log.recipient_matrix() if y is None else y
    senders = log.senders
    e_log_pi = expected_log_pi(gamma)

    m = gamma.shape[0]
    prior_pi = m * _dirichlet_log_norm(alpha) + ((alpha - 1.0) * e_log_pi).sum()
    entropy_pi = -(_dirichlet_log_norm(gamma).sum() + ((gamma - 1.0) * e_log_pi).sum())
    node_totals = phi.sum(axis=0)
    prior_z = (node_totals * e_log_pi).sum()
    entropy_z = -(phi * np.log(np.maximum(phi, 1e-300))).sum()

    log_b, log_1b = _log_b(state.b, clamp_eps)
    n_idx = np.arange(len(senders))
    phi_s = phi[n_idx, senders]
    recv = np.matmul(y[:, None, :], phi)[:, 0]
    rest = _node_sum(phi) - phi_s - recv
    data = ((phi_s @ log_b) * recv).sum() + ((phi_s @ log_1b) * rest).sum()
    return float(prior_pi + entropy_pi + prior_z + entropy_z + data)


# --------------------------------------------------------------------------
# vectorized sweeps
# --------------------------------------------------------------------------

def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = logits - logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits


def sweep_phi(phi: np.ndarray, gamma: np.ndarray, b: np.ndarray, senders: np.ndarray,
              y: np.ndarray, clamp_eps: float = CLAMP_EPS) -> np.ndarray:
    """One block-coordinate pass over a dense ``phi``; returns a new tensor.

    All sender slices are updated first, then every other slice given the new
    sender slices.  :func:`fit` runs the same pass on the factorized state.
    """
    log_b, log_1b = _log_b(b, clamp_eps)
    e_log_pi = expected_log_pi(gamma)
    idx = np.arange(len(senders))
    recv = np.matmul(y[:, None, :], phi)[:, 0]
    rest = _node_sum(phi) - phi[idx, senders] - recv
    sender_phi = _softmax_rows(e_log_pi[senders] + recv @ log_b.T + rest @ log_1b.T)
    hit = sender_phi @ log_b
    miss = sender_phi @ log_1b
    logits = e_log_pi[None, :, :] + np.where(y[:, :, None] > 0, hit[:, None, :], miss[:, None, :])
    new = _softmax_rows(logits)
    new[idx, senders] = sender_phi
    return new


def gamma_from_phi(alpha: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return alpha[None, :] + phi.sum(axis=0)


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

def initial_node_probs(log: TransactionLog, config: FitConfig, rng: np.random.Generator,
                       init_pi: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-node starting distribution shared by all of a node's ``phi`` slices."""
    m, k = log.num_nodes, config.k
    if config.init == "uniform-jitter":
        base = np.full((m, k), 1.0 / k)
    else:
        if init_pi is None:
            if config.init == "ground-truth":
                raise ValueError("init='ground-truth' needs init_pi")
            counts = to_counts(log)
            if config.init == "spectral":
                labels = spectral_clusters(counts, k, seed=rng)
            else:
                labels, _ = baseline_hierarchical(counts, k)
            init_pi = np.eye(k)[labels]
        init_pi = np.asarray(init_pi, dtype=np.float64)
        if init_pi.shape != (m, k):
            raise ValueError(f"init_pi must be {m}x{k}")
        # keep every group reachable from every node
        base = 0.8 * init_pi / init_pi.sum(axis=1, keepdims=True) + 0.2 / k
    if config.jitter_scale > 0 and k > 1:
        # one factor per (node, group): independent per-transaction noise would
        # average out of gamma and leave the symmetric fixed point intact
        base = base * rng.uniform(1.0 - config.jitter_scale, 1.0 + config.jitter_scale, size=(m, k))
    return base / base.sum(axis=1, keepdims=True)


def _rel_change(new: float, old: float) -> float:
    return abs(new - old) / max(abs(old), 1e-300)


def fit(log: TransactionLog, config: FitConfig, init_pi: Optional[np.ndarray] = None) -> FittedModel:
    """Fit memberships and the interaction matrix for a fixed number of groups.

    Parameters
    ----------
    log : TransactionLog
        Training transactions.
    config : FitConfig
        Group count, hyperparameters, stopping rules and initialization.
    init_pi : ndarray, optional
        ``M x K`` memberships seeding ``phi`` for the ``baseline-clusters``
        and ``ground-truth`` initializations.

    Returns
    -------
    FittedModel
        ``trace`` holds the bound after each outer iteration.  When
        ``max_outer_iters`` is exhausted the model comes back with
        ``converged=False``.  With ``n_restarts > 1`` the run reaching the
        highest final bound is returned; restart ``r`` is seeded from
        ``(seed, r)``.
    """
    if len(log) < 1:
        raise ValueError("cannot fit an empty log")
    best = None
    for r in range(config.n_restarts):
        seed = config.seed if r == 0 else np.random.SeedSequence([config.seed, r])
        model = _fit_once(log, config, np.random.default_rng(seed), init_pi)
        if best is None or model.trace[-1] > best.trace[-1]:
            best = model
    if not best.converged:
        logger.warning("variational EM did not converge in %d outer iterations", config.max_outer_iters)
    return best


def _estimate_b_compact(cp: CompactPhi, stats: compact.Stats, clamp_eps: float) -> np.ndarray:
    return _b_from_counts(*compact.b_statistics(cp, stats), clamp_eps)


def _elbo_compact(cp: CompactPhi, stats: compact.Stats, gamma: np.ndarray, alpha: np.ndarray,
                  b: np.ndarray, clamp_eps: float) -> float:
    e_log_pi = expected_log_pi(gamma)
    m = gamma.shape[0]
    prior_pi = m * _dirichlet_log_norm(alpha) + ((alpha - 1.0) * e_log_pi).sum()
    entropy_pi = -(_dirichlet_log_norm(gamma).sum() + ((gamma - 1.0) * e_log_pi).sum())
    prior_z = (stats.node_totals * e_log_pi).sum()
    log_b, log_1b = _log_b(b, clamp_eps)
    data = compact.data_term(cp, stats, log_b, log_1b)
    return float(prior_pi + entropy_pi + prior_z + stats.entropy + data)


def _fit_once(log: TransactionLog, config: FitConfig, rng: np.random.Generator,
              init_pi: Optional[np.ndarray]) -> FittedModel:
    k = config.k
    alpha = np.full(k, float(config.alpha_value))
    eps = config.clamp_eps
    threads = config.threads

    cp = CompactPhi.from_node_probs(Layout.from_log(log), initial_node_probs(log, config, rng, init_pi))
    stats = compact.statistics(cp, threads)
    # equals N/K + alpha for unperturbed phi; keeps the jitter visible to the first sweep
    gamma = alpha[None, :] + stats.node_totals
    b = np.full((k, k), 0.5)
    trace = []
    converged = False
    outer = 0
    for outer in range(1, config.max_outer_iters + 1):
        b = _estimate_b_compact(cp, stats, eps)
        log_b, log_1b = _log_b(b, eps)
        prev = _elbo_compact(cp, stats, gamma, alpha, b, eps)
        for _ in range(config.max_inner_iters):
            cp = compact.sweep(cp, stats, expected_log_pi(gamma), log_b, log_1b)
            stats = compact.statistics(cp, threads)
            gamma = alpha[None, :] + stats.node_totals
            cur = _elbo_compact(cp, stats, gamma, alpha, b, eps)
            done = _rel_change(cur, prev) < config.rel_tol
            prev = cur
            if done:
                break
        trace.append(prev)
        logger.debug("outer %d: elbo %.6f", outer, prev)
        if len(trace) > 1 and _rel_change(trace[-1], trace[-2]) < config.rel_tol:
            converged = True
            break

    pi_hat = gamma / gamma.sum(axis=1, keepdims=True)
    state = VariationalState(gamma, cp, b)
    return FittedModel(ModelParams(k, b, alpha), MembershipMatrix(pi_hat), state,
                       tuple(trace), converged, outer, config)


# --------------------------------------------------------------------------
# label alignment
# --------------------------------------------------------------------------

def _alignment_cost(reference: np.ndarray, candidate: np.ndarray) -> np.ndarray:
    # cost[k, j]: error from mapping reference group k to candidate group j
    return np.abs(reference[:, :, None] - candidate[:, None, :]).sum(axis=0)


def align_labels(reference, candidate) -> np.ndarray:
    """Permutation ``perm`` with ``candidate.pi[:, perm]`` closest to ``reference``.

    Exhaustive search for ``K <= 8``; larger ``K`` solves the equivalent
    linear assignment problem.
    """
    ref = reference.pi if isinstance(reference, MembershipMatrix) else np.asarray(reference)
    cand = candidate.pi if isinstance(candidate, (FittedModel, MembershipMatrix)) else np.asarray(candidate)
    if ref.shape != cand.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {cand.shape}")
    k = ref.shape[1]
    cost = _alignment_cost(ref, cand)
    if k <= 8:
        best, best_cost = None, math.inf
        rows = np.arange(k)
        for perm in itertools.permutations(range(k)):
            c = cost[rows, perm].sum()
            if c < best_cost:
                best, best_cost = perm, c
        return np.array(best)
    _, cols = linear_sum_assignment(cost)
    return cols
