"""
Geometry and generative process of the distance dependent Indian buffet process.
Distances, decay functions, proximity, prior sampling, reachability and prior density.

Customers are indexed 0..n-1 throughout the package.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.stats import poisson

from .errors import DomainError


logger = logging.getLogger(__name__)

# Sentinel for an infinite distance; decay functions map it to 0 without evaluating exp/log.
INF = np.inf

ROW_SUM_TOLERANCE = 1e-12


@dataclass(frozen=True)
class DistanceMatrix:
    """Square matrix of nonnegative extended-real distances between customers."""

    d: np.ndarray

    def __post_init__(self):
        d = np.array(self.d, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise DomainError("Distance matrix must be square", detail=f"shape {d.shape}")
        if np.isnan(d).any():
            raise DomainError("Distance matrix contains NaN")
        if (d < 0).any():
            raise DomainError("Distances must be nonnegative")
        if not np.all(np.diag(d) == 0):
            raise DomainError("Self-distances must be 0")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @property
    def n(self) -> int:
        return self.d.shape[0]

    def is_sequential(self) -> bool:
        """True iff every customer is infinitely far from all later customers."""
        upper = np.triu_indices(self.n, k=1)
        return bool(np.all(np.isinf(self.d[upper])))

    def permuted(self, perm: np.ndarray) -> "DistanceMatrix":
        """Relabel customer i as perm[i] in both rows and columns."""
        perm = check_permutation(perm, self.n)
        d = np.empty_like(self.d)
        d[np.ix_(perm, perm)] = self.d
        return DistanceMatrix(d)

    @classmethod
    def sequential(cls, n: int) -> "DistanceMatrix":
        """Temporal distance d_ij = i - j for j <= i, infinite for j > i."""
        idx = np.arange(n)
        d = (idx[:, None] - idx[None, :]).astype(float)
        d[d < 0] = INF
        return cls(d)

    @classmethod
    def unconnected(cls, n: int) -> "DistanceMatrix":
        """All off-diagonal distances infinite."""
        d = np.full((n, n), INF)
        np.fill_diagonal(d, 0.0)
        return cls(d)


class DecayKind(str, Enum):
    CONSTANT = "constant"
    EXPONENTIAL = "exponential"
    LOGISTIC = "logistic"
    WINDOW = "window"


@dataclass(frozen=True)
class DecayFunction:
    """
    Nonincreasing map from distance to proximity in [0, 1].

    f(0) = 1 and f(inf) = 0 for every kind. For the logistic kind the formula
    value is used for d > 0 and self-distance is pinned to 1.
    """

    kind: DecayKind = DecayKind.CONSTANT
    beta: float = 1.0
    nu: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", DecayKind(self.kind))
        if self.kind in (DecayKind.EXPONENTIAL, DecayKind.LOGISTIC) and not (self.beta >= 0):
            raise DomainError(f"{self.kind.value} decay requires beta >= 0", detail=f"beta={self.beta}")
        if self.kind is DecayKind.WINDOW and not (self.nu > 0):
            raise DomainError("window decay requires nu > 0", detail=f"nu={self.nu}")

    def __call__(self, d: Union[float, np.ndarray]) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        if np.isnan(d).any() or (d < 0).any():
            raise DomainError("Decay functions are defined for d >= 0 or d = inf")

        out = np.zeros(d.shape)
        finite = np.isfinite(d)
        x = d[finite]

        if self.kind is DecayKind.CONSTANT:
            values = np.ones_like(x)
        elif self.kind is DecayKind.EXPONENTIAL:
            values = np.exp(-self.beta * x)
        elif self.kind is DecayKind.LOGISTIC:
            values = 0.5 * (1.0 - np.tanh(0.5 * (self.beta * x - self.nu)))
        else:
            values = (x < self.nu).astype(float)

        out[finite] = values
        out[d == 0] = 1.0
        return out

    def describe(self) -> str:
        if self.kind is DecayKind.CONSTANT:
            return "constant"
        if self.kind is DecayKind.EXPONENTIAL:
            return f"exponential(beta={self.beta:g})"
        if self.kind is DecayKind.LOGISTIC:
            return f"logistic(beta={self.beta:g}, nu={self.nu:g})"
        return f"window(nu={self.nu:g})"


def decay_eval(f: DecayFunction, d: float) -> float:
    """Evaluate a decay function at a single distance."""
    return float(f(d))


@dataclass(frozen=True)
class ProximityMatrix:
    """Row-stochastic connection probabilities a_ij = f(d_ij) / h_i."""

    a: np.ndarray
    h: np.ndarray

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def inv_h(self) -> np.ndarray:
        return 1.0 / self.h

    @classmethod
    def from_weights(cls, weights: np.ndarray) -> "ProximityMatrix":
        """
        Normalise an unnormalised proximity matrix (decay values) row by row.

        Args:
            weights: n x n matrix of values in [0, 1] with unit diagonal

        Returns:
            ProximityMatrix
        """
        w = np.array(weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DomainError("Proximity weights must be square", detail=f"shape {w.shape}")
        if (w < 0).any() or (w > 1).any():
            raise DomainError("Proximity weights must lie in [0, 1]")
        if not np.all(np.diag(w) == 1):
            raise DomainError("Self-proximity must be 1")
        h = w.sum(axis=1)
        a = w / h[:, None]
        a.setflags(write=False)
        h.setflags(write=False)
        return cls(a=a, h=h)


def build_proximity(D: DistanceMatrix, f: DecayFunction) -> ProximityMatrix:
    """Apply the decay function to every pair and normalise by customer."""
    prox = ProximityMatrix.from_weights(f(D.d))
    logger.debug(f"Built proximity for n={D.n} with {f.describe()}; h={prox.h}")
    return prox


def check_permutation(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.issubdtype(perm.dtype, np.integer):
        raise DomainError("Permutation must be an integer vector of length n", detail=f"n={n}")
    if not np.array_equal(np.sort(perm), np.arange(n)):
        raise DomainError("Permutation is not a bijection", detail=f"perm={perm.tolist()}")
    return perm.astype(np.int64)


@dataclass
class PriorState:
    """
    Ownership vector c* and connectivity matrix C.

    Columns are kept grouped by owner in customer order, creation order within
    an owner. The owner's own connection is stored but never affects Z.
    """

    n: int
    owner: np.ndarray = None
    connections: np.ndarray = None

    def __post_init__(self):
        if self.owner is None:
            self.owner = np.zeros(0, dtype=np.int64)
        if self.connections is None:
            self.connections = np.zeros((self.n, 0), dtype=np.int64)
        self.owner = np.asarray(self.owner, dtype=np.int64)
        self.connections = np.asarray(self.connections, dtype=np.int64)
        if self.connections.ndim != 2:
            self.connections = self.connections.reshape(self.n, self.owner.shape[0])

    @property
    def K(self) -> int:
        return self.owner.shape[0]

    @property
    def lam(self) -> np.ndarray:
        """Dish counts per owner."""
        return np.bincount(self.owner, minlength=self.n)

    @property
    def owned_sets(self) -> List[np.ndarray]:
        return [np.flatnonzero(self.owner == i) for i in range(self.n)]

    def copy(self) -> "PriorState":
        return PriorState(self.n, self.owner.copy(), self.connections.copy())

    def validate(self) -> None:
        """Raise DomainError if the state breaks its structural invariants."""
        if self.connections.shape != (self.n, self.K):
            raise DomainError("Connectivity matrix shape mismatch", detail=f"{self.connections.shape} vs ({self.n}, {self.K})")
        if self.K and (self.owner.min() < 0 or self.owner.max() >= self.n):
            raise DomainError("Owner index out of range")
        if self.K and (self.connections.min() < 0 or self.connections.max() >= self.n):
            raise DomainError("Connection index out of range")
        if np.any(np.diff(self.owner) < 0):
            raise DomainError("Dishes are not grouped by owner")


@dataclass
class FeatureMatrix:
    """Binary feature matrix Z (customers x dishes)."""

    z: np.ndarray
    groups: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        z = np.asarray(self.z).astype(bool)
        self.z = z[:, None] if z.ndim == 1 else z

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def K(self) -> int:
        return self.z.shape[1]

    @property
    def active_columns(self) -> np.ndarray:
        return np.flatnonzero(self.z.any(axis=0))

    def active(self) -> np.ndarray:
        """Active columns as a float matrix, ready for the likelihood."""
        return self.z[:, self.active_columns].astype(float)


def draw_connections(A: ProximityMatrix, n_cols: int, rng: np.random.Generator,
                     rows: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Draw c_ik = j with probability a_ij, independently for every row and column.

    Args:
        A: Proximity matrix
        n_cols: Number of dishes to draw connections for
        rng: Random generator
        rows: Customers to draw for (default all, in order)

    Returns:
        len(rows) x n_cols integer matrix
    """
    if rows is None:
        rows = np.arange(A.n)
    cdf = np.cumsum(A.a[rows], axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((len(rows), n_cols))
    return (u[:, :, None] >= cdf[:, None, :]).sum(axis=2).astype(np.int64)


def sample_prior(A: ProximityMatrix, alpha: float, rng: np.random.Generator) -> PriorState:
    """Draw (c*, C): lambda_i ~ Poisson(alpha / h_i), then c_ik ~ a_i for every i and k."""
    if not alpha > 0:
        raise DomainError("alpha must be positive", detail=f"alpha={alpha}")
    lam = rng.poisson(alpha / A.h)
    owner = np.repeat(np.arange(A.n), lam)
    connections = draw_connections(A, owner.shape[0], rng)
    return PriorState(A.n, owner, connections)


def reachers(targets: np.ndarray, owner: int) -> np.ndarray:
    """
    Customers whose connection path for one dish reaches the owner (reverse BFS).

    Args:
        targets: c_.k, the connection target of every customer for this dish
        owner: Owner of the dish

    Returns:
        Boolean mask; always True at the owner
    """
    n = targets.shape[0]
    incoming = [[] for _ in range(n)]
    for i, j in enumerate(targets.tolist()):
        if i != owner and i != j:
            incoming[j].append(i)

    mask = np.zeros(n, dtype=bool)
    mask[owner] = True
    queue = deque([owner])
    while queue:
        j = queue.popleft()
        for i in incoming[j]:
            if not mask[i]:
                mask[i] = True
                queue.append(i)
    return mask


def compute_feature_matrix(state: PriorState) -> FeatureMatrix:
    """Z = phi(c*, C): z_ik = 1 iff owner[k] is reachable from i in dish k's graph."""
    z = np.zeros((state.n, state.K), dtype=bool)
    for k in range(state.K):
        z[:, k] = reachers(state.connections[:, k], int(state.owner[k]))
    return FeatureMatrix(z)


def propagate_reachability(connections: np.ndarray, owner: np.ndarray) -> np.ndarray:
    """
    Reachability for many dishes at once.

    Args:
        connections: T x n matrix, row t holds the targets of dish t
        owner: length-T owners

    Returns:
        T x n boolean matrix, entry (t, i) set iff i reaches owner[t]
    """
    T, n = connections.shape
    reach = np.zeros((T, n), dtype=bool)
    reach[np.arange(T), owner] = True
    for _ in range(n):
        updated = reach | np.take_along_axis(reach, connections, axis=1)
        if np.array_equal(updated, reach):
            break
        reach = updated
    return reach


def transitive_closure_features(state: PriorState) -> FeatureMatrix:
    """Z computed from boolean matrix powers of each dish's adjacency matrix."""
    n = state.n
    z = np.zeros((n, state.K), dtype=bool)
    for k in range(state.K):
        own = int(state.owner[k])
        adj = np.zeros((n, n), dtype=np.int64)
        for i in range(n):
            if i != own:
                adj[i, state.connections[i, k]] = 1
        closure = np.eye(n, dtype=np.int64)
        power = np.eye(n, dtype=np.int64)
        for _ in range(n):
            power = np.minimum(power @ adj, 1)
            closure = np.minimum(closure + power, 1)
        z[:, k] = closure[:, own] > 0
    return FeatureMatrix(z)


def log_prior(state: PriorState, A: ProximityMatrix, alpha: float) -> float:
    """log P(c* | alpha) + log P(C | c*, D, f); -inf when a connection has zero proximity."""
    if state.n != A.n:
        raise DomainError("State and proximity disagree on n", detail=f"{state.n} vs {A.n}")
    lp = float(poisson.logpmf(state.lam, alpha / A.h).sum())
    if state.K == 0:
        return lp
    probs = A.a[np.arange(state.n)[:, None], state.connections]
    if np.any(probs == 0):
        return -np.inf
    return lp + float(np.log(probs).sum())


def canonical_order(owner: np.ndarray) -> np.ndarray:
    """Column order grouping dishes by owner while keeping relative order."""
    return np.argsort(owner, kind="stable")


def permute_state(state: PriorState, Z: FeatureMatrix, perm) -> Tuple[PriorState, FeatureMatrix]:
    """
    Relabel customer i as perm[i] in c*, C and the rows of Z.

    Columns are re-sorted into canonical owner order afterwards.
    """
    perm = check_permutation(perm, state.n)
    owner = perm[state.owner]
    connections = np.empty_like(state.connections)
    connections[perm] = perm[state.connections]
    z = np.empty_like(Z.z)
    z[perm] = Z.z

    order = canonical_order(owner)
    permuted = PriorState(state.n, owner[order], connections[:, order])
    return permuted, FeatureMatrix(z[:, order])


@dataclass
class PriorBatch:
    """Sharing statistics of many independent prior draws."""

    r: np.ndarray
    r_pair: np.ndarray
    k: np.ndarray


def sample_prior_batch(A: ProximityMatrix, alpha: Union[float, np.ndarray], n_draws: int,
                       rng: np.random.Generator) -> PriorBatch:
    """
    Draw many prior samples at once and keep only their sharing statistics.

    Args:
        A: Proximity matrix
        alpha: Mass parameter, scalar or one value per draw
        n_draws: Number of independent draws
        rng: Random generator

    Returns:
        PriorBatch with r (draws x n), r_pair (draws x n x n) and K per draw
    """
    n = A.n
    lam = rng.poisson(np.asarray(alpha, dtype=float)[..., None] / A.h, size=(n_draws, n))
    k = lam.sum(axis=1)
    draw_of_dish = np.repeat(np.arange(n_draws), k)
    owner = np.repeat(np.tile(np.arange(n), n_draws), lam.ravel())

    r = np.zeros((n_draws, n))
    r_pair = np.zeros((n_draws, n, n))
    total = owner.shape[0]
    chunk = max(1, 2_000_000 // max(n * n, 1))
    for start in range(0, total, chunk):
        stop = min(total, start + chunk)
        conn = _draw_dish_rows(A, owner[start:stop].shape[0], rng)
        reach = propagate_reachability(conn, owner[start:stop]).astype(float)
        draws = draw_of_dish[start:stop]
        np.add.at(r, draws, reach)
        np.add.at(r_pair, draws, reach[:, :, None] * reach[:, None, :])
    return PriorBatch(r=r, r_pair=r_pair, k=k)


def _draw_dish_rows(A: ProximityMatrix, n_dishes: int, rng: np.random.Generator) -> np.ndarray:
    # dishes x customers layout for propagate_reachability
    return draw_connections(A, n_dishes, rng).T.copy()
