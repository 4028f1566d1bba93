"""Domain types for transactional networks and the generative sampler.

A transaction is one sender plus a non-empty set of recipients.  Every node
carries a mixed-membership vector over ``K`` groups; for each transaction all
nodes draw a group label, and each non-sender node receives the message with
probability ``B[z_sender, z_node]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MEMBERSHIP_ATOL = 1e-9


class SimulationError(RuntimeError):
    """Raised when the sampler cannot produce a transaction with recipients."""


@dataclass(frozen=True)
class Transaction:
    sender: int
    recipients: frozenset

    def __post_init__(self):
        object.__setattr__(self, "recipients", frozenset(int(r) for r in self.recipients))
        if not self.recipients:
            raise ValueError("transaction has an empty recipient set")
        if self.sender in self.recipients:
            raise ValueError(f"sender {self.sender} cannot be its own recipient")


@dataclass(frozen=True)
class TransactionLog:
    """An ordered list of transactions over ``num_nodes`` nodes."""

    num_nodes: int
    transactions: tuple
    node_labels: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "transactions", tuple(self.transactions))
        if self.node_labels is not None:
            object.__setattr__(self, "node_labels", tuple(str(x) for x in self.node_labels))
            if len(self.node_labels) != self.num_nodes:
                raise ValueError("node_labels length does not match num_nodes")
        if self.num_nodes < 2:
            raise ValueError("a transaction log needs at least 2 nodes")
        for n, t in enumerate(self.transactions):
            if not 0 <= t.sender < self.num_nodes:
                raise ValueError(f"transaction {n}: sender {t.sender} out of range")
            if any(not 0 <= r < self.num_nodes for r in t.recipients):
                raise ValueError(f"transaction {n}: recipient out of range")

    def __len__(self):
        return len(self.transactions)

    @property
    def senders(self) -> np.ndarray:
        return np.fromiter((t.sender for t in self.transactions), dtype=np.int64,
                           count=len(self.transactions))

    def recipient_matrix(self) -> np.ndarray:
        """Binary ``N x M`` matrix ``Y`` with ``Y[n, m] = 1`` iff ``m`` received ``n``."""
        y = np.zeros((len(self.transactions), self.num_nodes), dtype=np.float64)
        for n, t in enumerate(self.transactions):
            y[n, list(t.recipients)] = 1.0
        return y

    @property
    def total_recipients(self) -> int:
        return sum(len(t.recipients) for t in self.transactions)

    def sent_counts(self) -> np.ndarray:
        return np.bincount(self.senders, minlength=self.num_nodes)

    def received_counts(self) -> np.ndarray:
        out = np.zeros(self.num_nodes, dtype=np.int64)
        for t in self.transactions:
            out[list(t.recipients)] += 1
        return out

    def subset(self, indices: Sequence[int]) -> "TransactionLog":
        return TransactionLog(self.num_nodes, [self.transactions[i] for i in indices],
                              self.node_labels)


@dataclass(frozen=True)
class ModelParams:
    k: int
    b: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=np.float64)
        alpha = np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), (self.k,)).copy()
        if b.shape != (self.k, self.k):
            raise ValueError(f"B must be {self.k}x{self.k}, got {b.shape}")
        if np.any(b < 0) or np.any(b > 1):
            raise ValueError("B entries must lie in [0, 1]")
        if np.any(alpha <= 0):
            raise ValueError("alpha entries must be positive")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "alpha", alpha)


@dataclass(frozen=True)
class MembershipMatrix:
    pi: np.ndarray

    def __post_init__(self):
        pi = np.atleast_2d(np.asarray(self.pi, dtype=np.float64))
        if np.any(pi < 0):
            raise ValueError("membership probabilities must be non-negative")
        if not np.allclose(pi.sum(axis=1), 1.0, rtol=0, atol=MEMBERSHIP_ATOL):
            raise ValueError("membership rows must sum to 1")
        object.__setattr__(self, "pi", pi)

    @property
    def num_nodes(self) -> int:
        return self.pi.shape[0]

    @property
    def k(self) -> int:
        return self.pi.shape[1]

    def hard_labels(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the smallest group index
        return np.argmax(self.pi, axis=1)

    @classmethod
    def from_labels(cls, labels, k: Optional[int] = None) -> "MembershipMatrix":
        labels = np.asarray(labels, dtype=np.int64)
        k = int(labels.max()) + 1 if k is None else k
        return cls(np.eye(k)[labels])


@dataclass
class SimulationConfig:
    m: int
    k: int
    b: np.ndarray
    alpha: float | np.ndarray
    n: Optional[int] = None
    poisson_rate: Optional[float] = None
    sender_weights: Optional[np.ndarray] = None
    seed: int = 0
    max_redraws: int = 1000

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        ModelParams(self.k, self.b, self.alpha)  # validates B and alpha
        if self.m < 2:
            raise ValueError("need at least 2 nodes")
        if self.n is None and self.poisson_rate is None:
            raise ValueError("either n or poisson_rate must be given")
        if self.n is not None and self.n < 1:
            raise ValueError("n must be >= 1")
        if self.poisson_rate is not None and self.poisson_rate <= 0:
            raise ValueError("poisson_rate must be positive")
        if self.sender_weights is not None:
            w = np.asarray(self.sender_weights, dtype=np.float64)
            if w.shape != (self.m,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise ValueError("sender_weights must be a length-m probability vector")
            self.sender_weights = w

    @property
    def alpha_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), (self.k,)).copy()


@dataclass
class SimulationResult:
    log: TransactionLog
    memberships: MembershipMatrix
    labels: np.ndarray  # (N, M) int group labels per transaction and node
    redraws: int = 0


def receive_probability(pi, b, i: int, j: int) -> float:
    """Probability that node ``j`` receives a message sent by node ``i``."""
    if i == j:
        raise ValueError("sender and receiver must differ")
    pi = pi.pi if isinstance(pi, MembershipMatrix) else np.asarray(pi)
    return float(pi[i] @ np.asarray(b) @ pi[j])


def receive_probabilities(pi, b) -> np.ndarray:
    """All pairwise ``pi_i B pi_j^T`` as an ``M x M`` matrix with zero diagonal."""
    pi = pi.pi if isinstance(pi, MembershipMatrix) else np.asarray(pi)
    p = pi @ np.asarray(b) @ pi.T
    np.fill_diagonal(p, 0.0)
    return p


def sample_memberships(m: int, alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    pi = rng.dirichlet(alpha, size=m)
    # tiny alpha can underflow every component to 0; fall back to a one-hot draw
    bad = ~np.isfinite(pi).all(axis=1) | (pi.sum(axis=1) <= 0)
    if bad.any():
        pi[bad] = np.eye(len(alpha))[rng.choice(len(alpha), size=int(bad.sum()), p=alpha / alpha.sum())]
    return pi / pi.sum(axis=1, keepdims=True)


def sample_network(config: SimulationConfig, rng: Optional[np.random.Generator] = None,
                   pi: Optional[np.ndarray] = None) -> SimulationResult:
    """Draw a transaction log from the generative model.

    Parameters
    ----------
    config : SimulationConfig
        Network size, groups, interaction matrix and hyperparameters.
    rng : numpy.random.Generator, optional
        Source of randomness.  Defaults to ``default_rng(config.seed)``.
    pi : array_like, optional
        Fixed ``M x K`` memberships.  When omitted they are drawn from the
        Dirichlet prior.

    Returns
    -------
    SimulationResult
        The log, the ground-truth memberships and the ``N x M`` label draws.

    Notes
    -----
    A transaction whose Bernoulli draws select nobody is redrawn (labels and
    recipients, same sender) up to ``config.max_redraws`` times.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    k, m = config.k, config.m
    b = config.b
    if pi is None:
        pi = sample_memberships(m, config.alpha_vector, rng)
    else:
        pi = MembershipMatrix(pi).pi
        if pi.shape != (m, k):
            raise ValueError(f"pi must be {m}x{k}")
    n = config.n if config.n is not None else int(rng.poisson(config.poisson_rate))
    if n < 1:
        raise SimulationError("Poisson draw produced zero transactions")
    weights = config.sender_weights if config.sender_weights is not None else np.full(m, 1.0 / m)
    cum_pi = np.cumsum(pi, axis=1)
    cum_pi[:, -1] = 1.0

    senders = rng.choice(m, size=n, p=weights)
    transactions = []
    labels = np.empty((n, m), dtype=np.int64)
    redraws = 0
    others = np.arange(m)
    for idx in range(n):
        s = int(senders[idx])
        for attempt in range(config.max_redraws + 1):
            z = (rng.random(m)[:, None] > cum_pi).sum(axis=1)
            p = b[z[s], z]
            hit = rng.random(m) < p
            hit[s] = False
            if hit.any():
                break
            redraws += 1
        else:
            raise SimulationError(
                f"transaction {idx}: no recipient after {config.max_redraws} redraws; "
                f"sender {s} has pi={np.round(pi[s], 4).tolist()} and B row sums "
                f"{np.round(b.sum(axis=1), 4).tolist()} are too small")
        labels[idx] = z
        transactions.append(Transaction(s, frozenset(others[hit].tolist())))
    if redraws:
        logger.debug("sample_network redrew %d empty transactions", redraws)
    log = TransactionLog(m, transactions)
    return SimulationResult(log, MembershipMatrix(pi), labels, redraws)


# Interaction matrix reported for the K=4 simulation study.
TABLE_B_K4 = np.array([
    [0.01, 0.20, 0.01, 0.01],
    [0.01, 0.30, 0.20, 0.10],
    [0.10, 0.01, 0.01, 0.30],
    [0.10, 0.01, 0.01, 0.30],
])

_B_K3 = np.array([
    [0.30, 0.02, 0.10],
    [0.02, 0.01, 0.40],
    [0.25, 0.02, 0.02],
])


def _b_k9() -> np.ndarray:
    b = np.full((9, 9), 0.01)
    for g in range(9):
        b[g, g] = 0.25 if g % 3 else 0.02
        b[g, (g + 1) % 9] = 0.20 if g % 3 == 0 else 0.05
    return b


def preset(name: str) -> SimulationConfig:
    """Named simulation configurations.

    ``table1:1`` .. ``table1:4`` are the four simulated networks of the
    simulation study; ``reddit-like`` is a sparse 248-node, 6222-transaction
    forum-style network with skewed sender activity.
    """
    if name == "table1:1":
        return SimulationConfig(m=50, n=500, k=3, alpha=0.05, b=_B_K3.copy(), seed=1)
    if name == "table1:2":
        return SimulationConfig(m=65, n=650, k=4, alpha=0.05, b=TABLE_B_K4.copy(), seed=2)
    if name == "table1:3":
        return SimulationConfig(m=65, n=650, k=4, alpha=0.25, b=TABLE_B_K4.copy(), seed=3)
    if name == "table1:4":
        return SimulationConfig(m=150, n=1500, k=9, alpha=0.05, b=_b_k9(), seed=4)
    if name == "reddit-like":
        m = 248
        rng = np.random.default_rng(248)
        activity = rng.lognormal(mean=0.0, sigma=1.2, size=m)
        # sparse enough for about 1.15 recipients per message
        b = np.full((6, 6), 0.0001)
        np.fill_diagonal(b, 0.0042)
        b[0, 5] = b[1, 2] = b[3, 4] = b[4, 2] = 0.0025
        return SimulationConfig(m=m, n=6222, k=6, alpha=0.1, b=b,
                                sender_weights=activity / activity.sum(), seed=6222)
    raise KeyError(f"unknown preset {name!r}")


PRESETS = ("table1:1", "table1:2", "table1:3", "table1:4", "reddit-like")
