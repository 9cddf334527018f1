"""Autoregressive generation as a discrete-time flow.

The source sequence keeps the first ``P`` target tokens and masks the rest;
after ``t`` steps exactly ``P + t`` tokens are revealed.  Position ``i``
(1-indexed) is revealed at the end of step ``t = i - P``, so the velocity at
step ``t`` acts only on position ``P + t + 1``.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from dfmoe.dfm import (
    EXACT_TOL,
    MASS_EPS,
    Coupling,
    ConditionalPath,
    ConditionalVelocity,
    DistTable,
    PathIndex,
    Scheduler,
    Timestep,
    TokenSeq,
    VelocityField,
    Vocab,
    check_enumerable,
    check_velocity_valid,
    continuity_residual,
    enumerate_states,
    mixture_path,
    push_forward,
    sample_step,
)
from dfmoe.errors import (
    MaskInTarget,
    NotOneSparse,
    PrefixTooLong,
    TimeOutOfRange,
    ZeroMassState,
)

logger = logging.getLogger(__name__)

Pair = tuple[TokenSeq, TokenSeq]


# ---------------------------------------------------------------------------
# Coupling, scheduler, path
# ---------------------------------------------------------------------------

def _seq_len(q: DistTable) -> int:
    lengths = {len(x) for x in q}
    if len(lengths) != 1:
        raise ValueError(f"target sequences must share one length, got {sorted(lengths)}")
    return lengths.pop()


def mask_prefix(x1: TokenSeq, prefix_len: int, mask_id: int) -> TokenSeq:
    """Keep the first ``prefix_len`` tokens, mask the rest."""
    return tuple(x1[:prefix_len]) + (mask_id,) * (len(x1) - prefix_len)


def build_mask_coupling(q: DistTable, prefix_len: int, vocab: Vocab) -> Coupling:
    """Pair every target ``x1`` with its masked version, weighted by ``q(x1)``."""
    q.validate()
    seq_len = _seq_len(q)
    if prefix_len > seq_len:
        raise PrefixTooLong(f"prefix length {prefix_len} exceeds sequence length {seq_len}")
    if prefix_len < 0:
        raise PrefixTooLong(f"prefix length must be >= 0, got {prefix_len}")
    pairs = []
    for x1, mass in q.items():
        vocab.check(x1)
        if mass > 0.0 and vocab.mask_id in x1:
            raise MaskInTarget(f"target {x1} contains mask token {vocab.mask_id}")
        pairs.append((mask_prefix(x1, prefix_len, vocab.mask_id), x1, mass))
    return Coupling(tuple(pairs))


@dataclass(frozen=True)
class ARScheduler:
    """Reveal schedule: ``kappa_t^i = 1`` once ``t >= i - P``, else 0."""
    prefix_len: int
    seq_len: int

    def __post_init__(self) -> None:
        if not 0 <= self.prefix_len <= self.seq_len:
            raise PrefixTooLong(f"prefix length {self.prefix_len} not in [0, {self.seq_len}]")

    @property
    def horizon(self) -> int:
        return self.seq_len - self.prefix_len

    def revealed(self, t: int, i: int) -> bool:
        return t >= i - self.prefix_len

    def kappa(self, t: int, i: int, j: int) -> float:
        on = 1.0 if self.revealed(t, i) else 0.0
        return on if j == 0 else 1.0 - on

    @property
    def scheduler(self) -> Scheduler:
        return Scheduler(kappa=self.kappa, n_components=2, horizon=self.horizon)


def ar_path(vocab: Vocab, seq_len: int, prefix_len: int) -> ConditionalPath:
    return mixture_path(vocab, ARScheduler(prefix_len, seq_len).scheduler)


def _check_time(t: int, horizon: int, *, step: bool) -> None:
    upper = horizon - 1 if step else horizon
    if not 0 <= t <= upper:
        raise TimeOutOfRange(f"t={t} outside [0, {upper}]")


def revealed_state(pair: Pair, prefix_len: int, t: int) -> TokenSeq:
    """``x_t``: the first ``P + t`` target tokens, the source beyond."""
    x0, x1 = pair
    k = prefix_len + t
    return tuple(x1[:k]) + tuple(x0[k:])


def ar_conditional_path(pair: Pair, prefix_len: int, t: int) -> DistTable:
    """The conditional AR path is the point mass ``delta_{x_t}``."""
    _check_time(t, len(pair[1]) - prefix_len, step=False)
    return DistTable.delta(revealed_state(pair, prefix_len, t))


def ar_conditional_velocity(
    pair: Pair, prefix_len: int, t: int, token: int, i: int, z: TokenSeq,
) -> float:
    """``delta_{x_{t+1}}(x^i) - delta_{x_t}(x^i)`` at ``z = x_t``, else 0.

    Only the reveal position ``i = P + t + 1`` can be nonzero.
    """
    _check_time(t, len(pair[1]) - prefix_len, step=True)
    if i != prefix_len + t + 1:
        return 0.0
    x_t = revealed_state(pair, prefix_len, t)
    if tuple(z) != x_t:
        return 0.0
    x_next = revealed_state(pair, prefix_len, t + 1)
    return (1.0 if x_next[i - 1] == token else 0.0) - (1.0 if x_t[i - 1] == token else 0.0)


@dataclass(frozen=True)
class ARConditionalVelocity:
    """The conditional velocity of one pair, as a callable field."""
    x0: TokenSeq
    x1: TokenSeq
    prefix_len: int

    def __call__(self, t: int, i: int, token: int, z: TokenSeq) -> float:
        return ar_conditional_velocity((self.x0, self.x1), self.prefix_len, t, token, i, z)

    def as_field(self, vocab: Vocab) -> VelocityField:
        return VelocityField(rate=self, vocab=vocab)


def ar_velocity_rule(prefix_len: int) -> ConditionalVelocity:
    """The AR conditional velocity in the generic ``(t, i, token, z, x0, x1)`` form."""
    def rule(t: int, i: int, token: int, z: TokenSeq, x0: TokenSeq, x1: TokenSeq) -> float:
        return ar_conditional_velocity((x0, x1), prefix_len, t, token, i, z)
    return rule


# ---------------------------------------------------------------------------
# Sparsity
# ---------------------------------------------------------------------------

def check_one_sparse(u: VelocityField, t: Timestep, states) -> int | None:
    """The single active position of ``u`` at ``t`` (1-indexed), or None.

    Raises ``NotOneSparse`` when two or more positions move on the given
    states, in which case the continuity equation no longer implies
    generation.
    """
    active: set[int] = set()
    for z in states:
        z = tuple(z)
        for i in range(1, len(z) + 1):
            if i in active:
                continue
            if any(u(t.t, i, a, z) != 0.0 for a in u.vocab.tokens):
                active.add(i)
    if len(active) > 1:
        raise NotOneSparse(f"velocity active at positions {sorted(active)} at t={t.t}")
    return active.pop() if active else None


def next_token_oracle(q: DistTable, prefix: TokenSeq, vocab: Vocab) -> np.ndarray:
    """``q(x^{len(prefix)+1} = a | prefix)`` by brute-force summation."""
    prefix = tuple(prefix)
    k = len(prefix)
    acc = np.zeros(vocab.size)
    for x, mass in q.items():
        if len(x) > k and x[:k] == prefix:
            acc[x[k]] += mass
    total = acc.sum()
    if total < MASS_EPS:
        raise ZeroMassState(f"prefix {prefix} has no mass under q")
    return acc / total


# ---------------------------------------------------------------------------
# End-to-end verification
# ---------------------------------------------------------------------------

@dataclass
class ARGenerationReport:
    """Per-timestep certificates for one target ``q`` and prefix length."""
    prefix_len: int
    horizon: int
    residuals: list[float] = field(default_factory=list)
    gaps: list[float] = field(default_factory=list)
    sparsity: list[int | None] = field(default_factory=list)
    violations: int = 0
    conditional_residual: float = 0.0
    oracle_gap: float = 0.0
    terminal_gap: float = 0.0

    @property
    def max_residual(self) -> float:
        return max(self.residuals, default=0.0)

    @property
    def max_gap(self) -> float:
        return max(self.gaps, default=0.0)

    @property
    def sparsity_ok(self) -> bool:
        return all(j == self.prefix_len + t + 1 for t, j in enumerate(self.sparsity))

    def passed(self, tol: float = EXACT_TOL) -> bool:
        return (
            self.max_residual <= tol
            and self.max_gap <= tol
            and self.terminal_gap <= tol
            and self.conditional_residual <= tol
            and self.oracle_gap <= tol
            and self.violations == 0
            and self.sparsity_ok
        )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["max_residual"] = self.max_residual
        data["max_gap"] = self.max_gap
        return data


def _conditional_residual(coupling: Coupling, vocab: Vocab, prefix_len: int, horizon: int) -> float:
    worst = 0.0
    for x0, x1, _ in coupling.pairs:
        u = ARConditionalVelocity(x0, x1, prefix_len).as_field(vocab)
        for t in range(horizon):
            ts = Timestep(t, horizon)
            worst = max(worst, continuity_residual(
                ar_conditional_path((x0, x1), prefix_len, t),
                ar_conditional_path((x0, x1), prefix_len, t + 1),
                u, ts,
            ))
    return worst


def marginal_ar_fields(q: DistTable, prefix_len: int, vocab: Vocab) -> list[VelocityField]:
    """The marginal AR velocity at every step ``t = 0..n-1``."""
    coupling = build_mask_coupling(q, prefix_len, vocab)
    seq_len = coupling.seq_len
    horizon = seq_len - prefix_len
    path = ar_path(vocab, seq_len, prefix_len)
    rule = ar_velocity_rule(prefix_len)
    return [
        PathIndex(path, coupling, Timestep(t, horizon)).velocity_field(rule)
        for t in range(horizon)
    ]


def verify_ar_generation(q: DistTable, prefix_len: int, vocab: Vocab) -> ARGenerationReport:
    """Certify that the AR velocity generates the AR path for target ``q``.

    At every step this records the continuity residual, the L-infinity gap
    between the pushed-forward ``p_t`` and ``p_{t+1}``, and the active
    position.  It also checks the per-pair conditional identity, the match
    with the brute-force next-token conditional, and that composing every
    step from ``p_0`` lands on ``q``.
    """
    coupling = build_mask_coupling(q, prefix_len, vocab)
    seq_len = coupling.seq_len
    check_enumerable(vocab, seq_len)
    horizon = seq_len - prefix_len
    report = ARGenerationReport(prefix_len=prefix_len, horizon=horizon)
    if horizon == 0:
        report.terminal_gap = coupling.source_marginal().linf(q)
        return report

    path = ar_path(vocab, seq_len, prefix_len)
    rule = ar_velocity_rule(prefix_len)
    indices = [PathIndex(path, coupling, Timestep(t, horizon)) for t in range(horizon + 1)]
    marginals = [index.marginal() for index in indices]
    running = marginals[0]

    for t in range(horizon):
        ts = Timestep(t, horizon)
        p_t, p_next = marginals[t], marginals[t + 1]
        u = indices[t].velocity_field(rule)
        support = [z for z, mass in p_t.items() if mass >= MASS_EPS]

        report.violations += len(check_velocity_valid(u, ts, support))
        report.residuals.append(continuity_residual(p_t, p_next, u, ts))
        report.gaps.append(push_forward(p_t, u, ts).linf(p_next))
        report.sparsity.append(check_one_sparse(u, ts, support))
        running = push_forward(running, u, ts)

        j = prefix_len + t + 1
        for z in support:
            oracle = next_token_oracle(q, z[: j - 1], vocab)
            for a in vocab.content_tokens:
                report.oracle_gap = max(report.oracle_gap, abs(u(t, j, a, z) - oracle[a]))

        logger.debug(
            "t=%d residual=%.3e gap=%.3e active=%s",
            t, report.residuals[-1], report.gaps[-1], report.sparsity[-1],
        )

    report.terminal_gap = running.linf(q)
    report.conditional_residual = _conditional_residual(coupling, vocab, prefix_len, horizon)
    return report


def sample_trajectory(
    fields: list[VelocityField],
    x0: TokenSeq,
    rng: np.random.Generator,
) -> list[TokenSeq]:
    """Draw one path ``X_0, ..., X_n`` by repeated per-position sampling."""
    horizon = len(fields)
    states = [tuple(x0)]
    for t, u in enumerate(fields):
        states.append(sample_step(u, Timestep(t, horizon), states[-1], rng))
    return states


def empirical_distribution(samples: list[TokenSeq]) -> DistTable:
    """Normalized counts of a list of sequences, in first-seen order."""
    counts = Counter(tuple(s) for s in samples)
    total = len(samples)
    return DistTable((s, c / total) for s, c in counts.items())


def random_target(vocab: Vocab, seq_len: int, rng: np.random.Generator, *, concentration: float = 1.0) -> DistTable:
    """Dirichlet-random PMF over every mask-free sequence of length ``seq_len``."""
    states = list(enumerate_states(vocab, seq_len, mask_free=True))
    weights = rng.dirichlet(np.full(len(states), concentration))
    weights = weights / math.fsum(weights)
    return DistTable(zip(states, weights.tolist()))
