"""Discrete-time discrete flow matching on enumerable state spaces.

A state is a fixed-length tuple of token ids over ``[d]``.  Probability paths
are built as coupling-weighted mixtures of factorized conditional paths, and a
velocity ``u_t^i(x^i, z)`` moves a state one timestep forward by resampling
every position independently from ``delta_{z^i} + u_t^i(., z)``.

Conventions used by every function here:

- timesteps run over ``{0, ..., n}``; a step goes from ``t`` to ``t + 1``
- token positions are 1-indexed (``i = 1..N``)
- scheduler components are 0-indexed (``j = 0..m-1``)

All operations are pure and reduce in a fixed order, so results are
reproducible bit-for-bit for the same inputs.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from dfmoe.errors import (
    CouplingInvalid,
    DistributionInvalid,
    InstanceTooLarge,
    InvalidVelocity,
    SchedulerInvalid,
    TimeOutOfRange,
    ZeroMassState,
)

logger = logging.getLogger(__name__)

TokenSeq = tuple[int, ...]

# Enumeration-based checks refuse state spaces larger than this.
ENUMERATION_LIMIT = 10**6

# States below this mass are never used as velocity sources.
MASS_EPS = 1e-15

# Tolerance for user-supplied schedulers, couplings and velocities.
INPUT_TOL = 1e-9

# Tolerance for internally constructed objects and exactness claims.
EXACT_TOL = 1e-12


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocab:
    """Token set ``[d]`` with one reserved mask id."""
    size: int
    mask_id: int

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ValueError(f"vocabulary size must be >= 2, got {self.size}")
        if not 0 <= self.mask_id < self.size:
            raise ValueError(f"mask id {self.mask_id} outside [0, {self.size})")

    @property
    def tokens(self) -> range:
        return range(self.size)

    @property
    def content_tokens(self) -> tuple[int, ...]:
        """Every token except the mask."""
        return tuple(a for a in range(self.size) if a != self.mask_id)

    def check(self, seq: TokenSeq) -> None:
        for token in seq:
            if not 0 <= token < self.size:
                raise ValueError(f"token {token} in {seq} outside [0, {self.size})")


@dataclass(frozen=True)
class Timestep:
    t: int
    horizon: int

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise TimeOutOfRange(f"horizon must be >= 1, got {self.horizon}")
        if not 0 <= self.t <= self.horizon:
            raise TimeOutOfRange(f"t={self.t} outside [0, {self.horizon}]")

    @property
    def is_final(self) -> bool:
        return self.t == self.horizon

    def next(self) -> Timestep:
        return Timestep(self.t + 1, self.horizon)

    def require_step(self) -> None:
        """Raise unless a step ``t -> t + 1`` exists."""
        if self.is_final:
            raise TimeOutOfRange(f"no step after final timestep t={self.t}")


class DistTable:
    """Sparse PMF over token sequences.

    Entries with exactly zero mass are dropped on construction; lookups of
    unknown sequences return 0.  Iteration follows insertion order, which
    keeps downstream reductions deterministic.
    """

    __slots__ = ("_mass",)

    def __init__(self, mass: Mapping[TokenSeq, float] | Iterable[tuple[TokenSeq, float]] = ()):
        items = mass.items() if isinstance(mass, Mapping) else mass
        self._mass: dict[TokenSeq, float] = {}
        for seq, value in items:
            if value != 0.0:
                self._mass[tuple(seq)] = float(value)

    @classmethod
    def delta(cls, seq: TokenSeq) -> DistTable:
        return cls({tuple(seq): 1.0})

    @classmethod
    def uniform(cls, states: Iterable[TokenSeq]) -> DistTable:
        states = [tuple(s) for s in states]
        if not states:
            raise DistributionInvalid("uniform distribution over an empty set")
        weight = 1.0 / len(states)
        return cls((s, weight) for s in states)

    def __getitem__(self, seq: TokenSeq) -> float:
        return self._mass.get(tuple(seq), 0.0)

    def __contains__(self, seq: object) -> bool:
        return seq in self._mass

    def __iter__(self) -> Iterator[TokenSeq]:
        return iter(self._mass)

    def __len__(self) -> int:
        return len(self._mass)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DistTable):
            return NotImplemented
        return self._mass == other._mass

    def __repr__(self) -> str:
        return f"DistTable({self._mass!r})"

    def items(self) -> Iterable[tuple[TokenSeq, float]]:
        return self._mass.items()

    def support(self) -> list[TokenSeq]:
        return list(self._mass)

    def total(self) -> float:
        return math.fsum(self._mass.values())

    def is_normalized(self, tol: float = EXACT_TOL) -> bool:
        return abs(self.total() - 1.0) <= tol and all(v >= 0.0 for v in self._mass.values())

    def validate(self, tol: float = INPUT_TOL) -> None:
        for seq, value in self._mass.items():
            if value < 0.0:
                raise DistributionInvalid(f"negative mass {value} at {seq}")
        total = self.total()
        if abs(total - 1.0) > tol:
            raise DistributionInvalid(f"masses sum to {total!r}, expected 1")

    def linf(self, other: DistTable) -> float:
        """L-infinity distance over the union of both supports."""
        keys = set(self._mass) | set(other._mass)
        return max((abs(self[k] - other[k]) for k in keys), default=0.0)

    def to_dict(self) -> dict[TokenSeq, float]:
        return dict(self._mass)


@dataclass(frozen=True)
class Coupling:
    """Joint PMF over ``(x0, x1)`` pairs, stored as an ordered pair list."""
    pairs: tuple[tuple[TokenSeq, TokenSeq, float], ...]
    tol: float = INPUT_TOL

    def __post_init__(self) -> None:
        pairs = tuple((tuple(x0), tuple(x1), float(w)) for x0, x1, w in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        if not pairs:
            raise CouplingInvalid("coupling has no pairs")
        lengths = {len(x0) for x0, _, _ in pairs} | {len(x1) for _, x1, _ in pairs}
        if len(lengths) != 1:
            raise CouplingInvalid(f"pairs mix sequence lengths {sorted(lengths)}")
        for x0, x1, w in pairs:
            if w < 0.0:
                raise CouplingInvalid(f"negative weight {w} on pair {x0} -> {x1}")
        total = math.fsum(w for _, _, w in pairs)
        if abs(total - 1.0) > self.tol:
            raise CouplingInvalid(f"weights sum to {total!r}, expected 1")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def seq_len(self) -> int:
        return len(self.pairs[0][0])

    def mass(self, indices: Iterable[int]) -> float:
        return math.fsum(self.pairs[k][2] for k in indices)

    def source_marginal(self) -> DistTable:
        acc: dict[TokenSeq, float] = {}
        for x0, _, w in self.pairs:
            acc[x0] = acc.get(x0, 0.0) + w
        return DistTable(acc)

    def target_marginal(self) -> DistTable:
        acc: dict[TokenSeq, float] = {}
        for _, x1, w in self.pairs:
            acc[x1] = acc.get(x1, 0.0) + w
        return DistTable(acc)

    def restrict(self, indices: Iterable[int]) -> Coupling:
        """Sub-coupling on the given pairs, renormalized by their mass."""
        indices = list(indices)
        mass = self.mass(indices)
        if mass <= 0.0:
            raise CouplingInvalid("restriction to zero-mass pairs")
        return Coupling(
            tuple((self.pairs[k][0], self.pairs[k][1], self.pairs[k][2] / mass) for k in indices),
            tol=self.tol,
        )


KappaFn = Callable[[int, int, int], float]


@dataclass(frozen=True)
class Scheduler:
    """Mixture coefficients ``kappa(t, i, j)`` over ``n_components`` paths."""
    kappa: KappaFn
    n_components: int
    horizon: int

    def coefficients(self, t: int, i: int) -> tuple[float, ...]:
        return tuple(self.kappa(t, i, j) for j in range(self.n_components))

    def validate(self, t: int, seq_len: int, tol: float = INPUT_TOL) -> None:
        for i in range(1, seq_len + 1):
            coeffs = self.coefficients(t, i)
            total = math.fsum(coeffs)
            if abs(total - 1.0) > tol:
                raise SchedulerInvalid(f"kappa at t={t}, i={i} sums to {total!r}")
            if min(coeffs) < -EXACT_TOL:
                raise SchedulerInvalid(f"negative kappa at t={t}, i={i}: {coeffs}")


def linear_scheduler(horizon: int) -> Scheduler:
    """Two components: ``t/n`` towards the target, ``1 - t/n`` on the source."""
    def kappa(t: int, i: int, j: int) -> float:
        frac = t / horizon
        return frac if j == 0 else 1.0 - frac
    return Scheduler(kappa=kappa, n_components=2, horizon=horizon)


WeightFn = Callable[[int, int, int, TokenSeq, TokenSeq], float]


@dataclass(frozen=True)
class ConditionalPath:
    """Factorized conditional path ``p_t(x^i|x0,x1) = sum_j kappa w^j``.

    ``w(j, i, token, x0, x1)`` gives the j-th component PMF at position i.
    """
    w: WeightFn
    scheduler: Scheduler
    vocab: Vocab
    tol: float = INPUT_TOL

    def position_pmf(self, t: int, i: int, x0: TokenSeq, x1: TokenSeq) -> list[float]:
        coeffs = self.scheduler.coefficients(t, i)
        pmf = [0.0] * self.vocab.size
        for j, kappa in enumerate(coeffs):
            component = [self.w(j, i, a, x0, x1) for a in self.vocab.tokens]
            total = math.fsum(component)
            if abs(total - 1.0) > self.tol:
                raise DistributionInvalid(f"w^{j} at position {i} sums to {total!r}")
            if kappa == 0.0:
                continue
            for a, value in enumerate(component):
                pmf[a] += kappa * value
        return pmf


def mixture_path(vocab: Vocab, scheduler: Scheduler) -> ConditionalPath:
    """Two-component path with ``w^0 = delta_{x1}`` and ``w^1 = delta_{x0}``."""
    if scheduler.n_components != 2:
        raise SchedulerInvalid("mixture path needs a two-component scheduler")

    def w(j: int, i: int, token: int, x0: TokenSeq, x1: TokenSeq) -> float:
        anchor = x1 if j == 0 else x0
        return 1.0 if anchor[i - 1] == token else 0.0

    return ConditionalPath(w=w, scheduler=scheduler, vocab=vocab)


RateFn = Callable[[int, int, int, TokenSeq], float]

# (t, i, token, z, x0, x1) -> rate of the velocity conditioned on a pair
ConditionalVelocity = Callable[[int, int, int, TokenSeq, TokenSeq, TokenSeq], float]


@dataclass(frozen=True)
class VelocitySlice:
    """A velocity evaluated at one state: ``rates[i - 1, token]``."""
    state: TokenSeq
    rates: np.ndarray

    def rate(self, i: int, token: int) -> float:
        return float(self.rates[i - 1, token])

    def linf(self, other: VelocitySlice) -> float:
        if self.rates.shape != other.rates.shape:
            raise ValueError(f"slice shapes differ: {self.rates.shape} vs {other.rates.shape}")
        return float(np.max(np.abs(self.rates - other.rates), initial=0.0))

    def active_positions(self) -> list[int]:
        return [i + 1 for i in range(self.rates.shape[0]) if np.any(self.rates[i] != 0.0)]


@dataclass(frozen=True)
class VelocityField:
    """Per-position token-update rates ``u_t^i(token, z)``."""
    rate: RateFn
    vocab: Vocab

    def __call__(self, t: int, i: int, token: int, z: TokenSeq) -> float:
        return self.rate(t, i, token, z)

    @classmethod
    def zero(cls, vocab: Vocab) -> VelocityField:
        return cls(rate=lambda t, i, token, z: 0.0, vocab=vocab)

    @classmethod
    def from_slices(
        cls, vocab: Vocab, t: int, slices: Mapping[TokenSeq, VelocitySlice],
    ) -> VelocityField:
        """Field equal to the given slices at timestep ``t``, zero elsewhere."""
        table = dict(slices)

        def rate(tt: int, i: int, token: int, z: TokenSeq) -> float:
            if tt != t:
                return 0.0
            found = table.get(z)
            return 0.0 if found is None else found.rate(i, token)

        return cls(rate=rate, vocab=vocab)

    def slice_at(self, t: int, z: TokenSeq) -> VelocitySlice:
        rates = np.zeros((len(z), self.vocab.size))
        for i in range(1, len(z) + 1):
            for a in self.vocab.tokens:
                rates[i - 1, a] = self.rate(t, i, a, z)
        return VelocitySlice(state=z, rates=rates)


@dataclass(frozen=True)
class Violation:
    """One failed velocity validity condition."""
    state: TokenSeq
    position: int
    kind: str           # "sum", "diagonal" or "offdiagonal"
    token: int | None
    value: float


# ---------------------------------------------------------------------------
# Enumeration helpers
# ---------------------------------------------------------------------------

def check_enumerable(vocab: Vocab, seq_len: int) -> None:
    if vocab.size ** seq_len > ENUMERATION_LIMIT:
        raise InstanceTooLarge(
            f"d^N = {vocab.size}^{seq_len} exceeds the enumeration limit {ENUMERATION_LIMIT}"
        )


def enumerate_states(vocab: Vocab, seq_len: int, *, mask_free: bool = False) -> Iterator[TokenSeq]:
    """All of ``[d]^N`` in lexicographic order (optionally without the mask)."""
    check_enumerable(vocab, seq_len)
    alphabet = vocab.content_tokens if mask_free else tuple(vocab.tokens)
    return itertools.product(alphabet, repeat=seq_len)


def _product_table(factors: list[dict[int, float]]) -> DistTable:
    """Product measure of independent per-position PMFs."""
    size = math.prod(len(f) for f in factors)
    if size > ENUMERATION_LIMIT:
        raise InstanceTooLarge(f"product support of {size} states exceeds {ENUMERATION_LIMIT}")
    table: dict[TokenSeq, float] = {}
    for combo in itertools.product(*(list(f.items()) for f in factors)):
        seq = tuple(a for a, _ in combo)
        table[seq] = math.prod(p for _, p in combo)
    return DistTable(table)


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

def conditional_path_eval(
    path: ConditionalPath, t: Timestep, x0: TokenSeq, x1: TokenSeq,
) -> DistTable:
    """``p_t(x|x0,x1) = prod_i sum_j kappa_t^{i,j} w^j(x^i|x0,x1)``."""
    if len(x0) != len(x1):
        raise ValueError(f"x0 and x1 lengths differ: {len(x0)} vs {len(x1)}")
    if t.horizon != path.scheduler.horizon:
        raise TimeOutOfRange(f"timestep horizon {t.horizon} does not match scheduler horizon {path.scheduler.horizon}")
    path.scheduler.validate(t.t, len(x0), path.tol)
    factors = []
    for i in range(1, len(x0) + 1):
        pmf = path.position_pmf(t.t, i, x0, x1)
        factors.append({a: p for a, p in enumerate(pmf) if p > 0.0})
    return _product_table(factors)


class PathIndex:
    """Conditional tables of every coupling pair at one timestep.

    Builds each ``p_t(.|x0,x1)`` once and indexes which pairs put mass on
    each state, so marginal and cluster-conditional quantities at a state
    only touch the pairs that reach it.
    """

    def __init__(self, path: ConditionalPath, coupling: Coupling, t: Timestep):
        self.path = path
        self.coupling = coupling
        self.t = t
        self._terms: dict[TokenSeq, list[tuple[int, float]]] = {}
        for k, (x0, x1, weight) in enumerate(coupling.pairs):
            if weight == 0.0:
                continue
            for z, p in conditional_path_eval(path, t, x0, x1).items():
                self._terms.setdefault(z, []).append((k, p * weight))

    def states(self) -> list[TokenSeq]:
        return list(self._terms)

    def terms(self, z: TokenSeq, members: frozenset[int] | None = None) -> list[tuple[int, float]]:
        """``(pair index, p_t(z|x0,x1) pi(x0,x1))`` for pairs reaching ``z``."""
        found = self._terms.get(tuple(z), [])
        if members is None:
            return list(found)
        return [(k, joint) for k, joint in found if k in members]

    def mass(self, z: TokenSeq, members: frozenset[int] | None = None) -> float:
        return math.fsum(joint for _, joint in self.terms(z, members))

    def marginal(self) -> DistTable:
        return DistTable((z, math.fsum(j for _, j in terms)) for z, terms in self._terms.items())

    def velocity_field(self, cond_u: ConditionalVelocity) -> VelocityField:
        """Marginal velocity tabulated on every positive-mass state."""
        slices = {
            z: self.velocity(cond_u, z)
            for z in self._terms
            if self.mass(z) >= MASS_EPS
        }
        return VelocityField.from_slices(self.path.vocab, self.t.t, slices)

    def velocity(
        self,
        cond_u: ConditionalVelocity,
        z: TokenSeq,
        members: frozenset[int] | None = None,
        *,
        error: type[Exception] = ZeroMassState,
        floor: float = MASS_EPS,
    ) -> VelocitySlice:
        """Posterior-weighted blend of conditional velocities at ``z``.

        Raises ``error`` when the (member) mass at ``z`` is below ``floor``
        or zero.
        """
        z = tuple(z)
        terms = self.terms(z, members)
        total = math.fsum(joint for _, joint in terms)
        if total <= 0.0 or total < floor:
            raise error(f"no mass at state {z} (p={total!r})")
        n, d = len(z), self.path.vocab.size
        rates = np.zeros((n, d))
        for k, joint in terms:
            x0, x1, _ = self.coupling.pairs[k]
            for i in range(1, n + 1):
                for a in range(d):
                    r = cond_u(self.t.t, i, a, z, x0, x1)
                    if r != 0.0:
                        rates[i - 1, a] += joint * r
        return VelocitySlice(state=z, rates=rates / total)


def marginal_path_eval(path: ConditionalPath, coupling: Coupling, t: Timestep) -> DistTable:
    """``p_t(x) = sum_{(x0,x1)} p_t(x|x0,x1) pi(x0,x1)``."""
    return PathIndex(path, coupling, t).marginal()


def marginal_velocity(
    path: ConditionalPath,
    coupling: Coupling,
    cond_u: ConditionalVelocity,
    t: Timestep,
    z: TokenSeq,
) -> VelocitySlice:
    """Marginal generating velocity at ``z`` (posterior average over pairs).

    Raises ``ZeroMassState`` when ``p_t(z) < 1e-15``; callers skip such z.
    """
    return PathIndex(path, coupling, t).velocity(cond_u, z)


def marginal_velocity_field(
    path: ConditionalPath,
    coupling: Coupling,
    cond_u: ConditionalVelocity,
    t: Timestep,
) -> VelocityField:
    """Tabulate the marginal velocity on every positive-mass state of ``p_t``."""
    return PathIndex(path, coupling, t).velocity_field(cond_u)


# ---------------------------------------------------------------------------
# Velocities
# ---------------------------------------------------------------------------

def check_velocity_valid(
    u: VelocityField, t: Timestep, states: Iterable[TokenSeq], tol: float = INPUT_TOL,
) -> list[Violation]:
    """Check zero-sum and range conditions per state and position.

    Returns an empty list iff the velocity defines a proper PMF update at
    every given state.
    """
    violations: list[Violation] = []
    for z in states:
        z = tuple(z)
        for i in range(1, len(z) + 1):
            rates = [u(t.t, i, a, z) for a in u.vocab.tokens]
            total = math.fsum(rates)
            if abs(total) > tol:
                violations.append(Violation(z, i, "sum", None, total))
            for a, r in enumerate(rates):
                if a == z[i - 1]:
                    if not -1.0 - tol <= r <= tol:
                        violations.append(Violation(z, i, "diagonal", a, r))
                elif not -tol <= r <= 1.0 + tol:
                    violations.append(Violation(z, i, "offdiagonal", a, r))
    return violations


def step_kernel(u: VelocityField, t: Timestep, z: TokenSeq) -> DistTable:
    """One sampling step from ``z``: product of ``delta_{z^i} + u_t^i(., z)``."""
    t.require_step()
    z = tuple(z)
    factors = []
    for i in range(1, len(z) + 1):
        factor: dict[int, float] = {}
        for a in u.vocab.tokens:
            p = (1.0 if a == z[i - 1] else 0.0) + u(t.t, i, a, z)
            if p < -INPUT_TOL:
                raise InvalidVelocity(
                    f"factor at state {z}, position {i}, token {a} has mass {p!r}"
                )
            if p > 0.0:
                factor[a] = p
        factors.append(factor)
    return _product_table(factors)


def push_forward(p_t: DistTable, u: VelocityField, t: Timestep) -> DistTable:
    """Exact law of ``X_{t+1}`` when ``X_t ~ p_t`` moves by ``step_kernel``."""
    t.require_step()
    acc: dict[TokenSeq, float] = {}
    for z, pz in p_t.items():
        for x, px in step_kernel(u, t, z).items():
            acc[x] = acc.get(x, 0.0) + pz * px
    return DistTable(acc)


def divergence(p_t: DistTable, u: VelocityField, t: Timestep, x: TokenSeq) -> float:
    """``-sum_z p_t(z) sum_i delta_z(x^{-i}) u_t^i(x^i, z)``."""
    x = tuple(x)
    acc = 0.0
    for z, pz in p_t.items():
        if pz < MASS_EPS:
            continue
        mismatched = [i for i in range(len(x)) if z[i] != x[i]]
        if len(mismatched) > 1:
            continue
        positions = range(1, len(x) + 1) if not mismatched else [mismatched[0] + 1]
        for i in positions:
            acc += pz * u(t.t, i, x[i - 1], z)
    return -acc


def divergence_table(p_t: DistTable, u: VelocityField, t: Timestep) -> dict[TokenSeq, float]:
    """Divergence at every state where it can be nonzero.

    Each source state ``z`` pushes flux only to states differing from it in
    at most one position, so the table is built from the sources outward.
    """
    acc: dict[TokenSeq, float] = {}
    for z, pz in p_t.items():
        if pz < MASS_EPS:
            continue
        for i in range(1, len(z) + 1):
            for a in u.vocab.tokens:
                r = u(t.t, i, a, z)
                if r == 0.0:
                    continue
                x = z[: i - 1] + (a,) + z[i:]
                acc[x] = acc.get(x, 0.0) - pz * r
    return acc


def continuity_residual(
    p_t: DistTable, p_next: DistTable, u: VelocityField, t: Timestep,
) -> float:
    """Max over states of ``|p_{t+1}(x) - p_t(x) + div_x(p_t u_t)|``."""
    t.require_step()
    div = divergence_table(p_t, u, t)
    states = set(p_t) | set(p_next) | set(div)
    residual = max(
        (abs(p_next[x] - p_t[x] + div.get(x, 0.0)) for x in states),
        default=0.0,
    )
    logger.debug("continuity residual at t=%d: %.3e over %d states", t.t, residual, len(states))
    return residual


def sample_step(u: VelocityField, t: Timestep, z: TokenSeq, rng: np.random.Generator) -> TokenSeq:
    """Draw ``X_{t+1}`` given ``X_t = z``, each position independently."""
    t.require_step()
    z = tuple(z)
    out = []
    for i in range(1, len(z) + 1):
        probs = np.array([
            (1.0 if a == z[i - 1] else 0.0) + u(t.t, i, a, z) for a in u.vocab.tokens
        ])
        if probs.min() < -INPUT_TOL:
            raise InvalidVelocity(f"factor at state {z}, position {i} has negative mass")
        probs = np.clip(probs, 0.0, None)
        out.append(int(rng.choice(u.vocab.size, p=probs / probs.sum())))
    return tuple(out)
