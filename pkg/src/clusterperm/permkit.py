"""Assignment machinery for the cluster permutation test.

An assignment relabels which q1 of the q clusters count as treated.
Because the comparison-of-means statistic ignores order within each
group, assignments are represented canonically as the sorted treated
index subset, and the full assignment collection is the set of all
C(q, q1) such subsets.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError, DomainError, ShapeError

DEFAULT_ENUMERATION_CAP = 10_000_000


@dataclass(frozen=True)
class Design:
    """Cluster counts: q1 treated, q0 control."""

    q1: int
    q0: int

    def __post_init__(self) -> None:
        for name in ("q1", "q0"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or int(v) < 1:
                raise DomainError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def q(self) -> int:
        return self.q1 + self.q0

    @property
    def n_assignments(self) -> int:
        """C(q, q1), computed with exact integer arithmetic."""
        return math.comb(self.q, self.q1)


@dataclass(frozen=True)
class Assignment:
    """Canonical relabeling: the treated index subset, 1-based and sorted."""

    treated: tuple[int, ...]

    def __post_init__(self) -> None:
        t = tuple(int(i) for i in self.treated)
        if len(t) == 0:
            raise DomainError("an assignment needs at least one treated index")
        if any(i < 1 for i in t):
            raise DomainError(f"treated indices must be >= 1, got {t}")
        if any(x >= y for x, y in zip(t, t[1:])):
            raise DomainError(f"treated indices must be strictly increasing, got {t}")
        object.__setattr__(self, "treated", t)

    def control(self, q: int) -> tuple[int, ...]:
        """Sorted complement of the treated set in {1, ..., q}."""
        ts = set(self.treated)
        return tuple(i for i in range(1, q + 1) if i not in ts)


def identity_assignment(design: Design) -> Assignment:
    """The original labeling: clusters 1..q1 treated."""
    return Assignment(tuple(range(1, design.q1 + 1)))


@dataclass(frozen=True)
class RngStream:
    """Named, reproducible random stream.

    Identical (seed, stream_id) pairs produce identical draw sequences;
    distinct ids give statistically independent streams.  ``derived``
    opens deterministic substreams keyed by extra integer indices, which
    is how replications, calibration draws, and bootstrap repetitions
    each get their own independent stream.
    """

    seed: int
    stream_id: int = 0
    subkey: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or not (0 <= int(v) < 2**64):
                raise DomainError(f"{name} must be an integer in [0, 2^64), got {v!r}")
            object.__setattr__(self, name, int(v))
        sk = tuple(self.subkey)
        for v in sk:
            if isinstance(v, bool) or int(v) != v or not (0 <= int(v) < 2**64):
                raise DomainError(f"subkey entries must be integers in [0, 2^64), got {v!r}")
        object.__setattr__(self, "subkey", tuple(int(v) for v in sk))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed,
                                     spawn_key=(self.stream_id, *self.subkey))
        return np.random.default_rng(seq)

    def derived(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.subkey + key)


def enumerate_assignments(design: Design,
                          cap: int = DEFAULT_ENUMERATION_CAP) -> list[Assignment]:
    """All C(q, q1) assignments in lexicographic order, identity first."""
    n = design.n_assignments
    if n > cap:
        raise CapacityError(
            f"full enumeration needs {n} assignments, above the cap of {cap}; "
            "use sample_assignments instead")
    return [Assignment(combo)
            for combo in itertools.combinations(range(1, design.q + 1), design.q1)]


def sample_assignments(design: Design, m: int, include_identity: bool = True,
                       rng: RngStream | None = None) -> list[Assignment]:
    """m iid uniform draws from the assignment collection, with replacement.

    When include_identity is set, the first element is replaced by the
    identity assignment so p-values computed from the sample stay
    bounded away from zero.
    """
    if isinstance(m, bool) or int(m) != m or int(m) < 1:
        raise DomainError(f"m must be a positive integer, got {m!r}")
    if rng is None:
        raise DomainError("sample_assignments requires an RngStream")
    m = int(m)
    gen = rng.generator()
    # rank q uniforms per draw; the q1 smallest form a uniform random subset
    keys = gen.random((m, design.q))
    idx = np.argpartition(keys, design.q1 - 1, axis=1)[:, :design.q1]
    idx = np.sort(idx, axis=1) + 1
    out = [Assignment(tuple(int(i) for i in row)) for row in idx]
    if include_identity:
        out[0] = identity_assignment(design)
    return out


def assignment_variance(a: Assignment, sigmas: Sequence[float]) -> float:
    """Variance of the relabeled comparison of means under independent
    N(mu, sigma_k^2) entries: sum of sigma_k^2/q1^2 over the treated set
    plus sigma_k^2/q0^2 over the complement."""
    s = np.asarray(sigmas, dtype=float)
    if s.ndim != 1:
        raise ShapeError(f"sigmas must be a vector, got shape {s.shape}")
    q = s.size
    q1 = len(a.treated)
    q0 = q - q1
    if q0 < 1:
        raise ShapeError(
            f"sigmas has length {q} but the assignment treats {q1} clusters")
    if max(a.treated) > q:
        raise ShapeError(
            f"treated index {max(a.treated)} exceeds the number of clusters {q}")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise DomainError("all standard deviations must be finite and positive")
    treated = np.zeros(q, dtype=bool)
    treated[np.asarray(a.treated) - 1] = True
    var = float(np.sum(s[treated] ** 2) / q1**2 + np.sum(s[~treated] ** 2) / q0**2)
    return var


def weight_matrix(design: Design,
                  assignments: Iterable[Assignment] | None = None,
                  cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """Column-per-assignment weight matrix W of shape (q, n).

    Column i holds +1/q1 on that assignment's treated indices and -1/q0
    elsewhere, so a data matrix X of row vectors maps to all relabeled
    statistics at once via X @ W.  With assignments=None the full
    lexicographic enumeration is used (identity in column 0) without
    materializing Assignment objects.
    """
    q, q1, q0 = design.q, design.q1, design.q0
    if assignments is None:
        n = design.n_assignments
        if n * q > cap:
            raise CapacityError(
                f"weight matrix would hold {n * q} entries, above the cap of {cap}")
        w = np.full((q, n), -1.0 / q0)
        for i, combo in enumerate(itertools.combinations(range(q), q1)):
            w[combo, i] = 1.0 / q1
        return w
    alist = list(assignments)
    if not alist:
        raise ShapeError("assignments must be nonempty")
    idx = np.array([a.treated for a in alist], dtype=np.int64) - 1
    if idx.shape[1] != q1 or idx.max() >= q:
        raise ShapeError("assignment treated sets do not match the design")
    w = np.full((q, len(alist)), -1.0 / q0)
    w[idx.T, np.arange(len(alist))] = 1.0 / q1
    return w
