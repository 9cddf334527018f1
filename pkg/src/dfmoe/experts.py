"""Count-based n-gram experts trained independently per cluster shard.

An expert of order ``c`` conditions on the last ``c`` tokens of the prefix,
left-padded with ``BOS``.  With add-alpha smoothing over all ``d`` tokens:

    p(a | h) = (count(h, a) + alpha) / (count(h) + alpha * d)

With ``alpha = 0`` the count-weighted mixture of shard experts reproduces
the dense model trained on the union exactly (see ``context_shares``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from dfmoe.data import Corpus, Sample
from dfmoe.dfm import TokenSeq
from dfmoe.errors import (
    DimensionMismatch,
    EmptyPrefixDistribution,
    EmptyShard,
    ModelFormatError,
    UnseenContext,
)
from dfmoe.persist import atomic_write_text
from dfmoe.router import RouterWeights

logger = logging.getLogger(__name__)

BOS = -1

Context = tuple[int, ...]


def context_of(prefix: Sequence[int], order: int) -> Context:
    """Last ``order`` tokens of ``prefix``, left-padded with ``BOS``."""
    if order == 0:
        return ()
    padded = (BOS,) * order + tuple(prefix)
    return padded[-order:]


@dataclass
class ExpertModel:
    order: int
    alpha: float
    vocab_size: int
    counts: dict[Context, Counter] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.order < 0:
            raise ValueError(f"order must be >= 0, got {self.order}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")

    def context_total(self, ctx: Context) -> int:
        row = self.counts.get(ctx)
        return sum(row.values()) if row else 0

    def next_token(self, prefix: Sequence[int]) -> np.ndarray:
        """Smoothed next-token distribution over all ``vocab_size`` tokens."""
        ctx = context_of(prefix, self.order)
        row = self.counts.get(ctx, Counter())
        total = sum(row.values())
        if total == 0 and self.alpha == 0:
            raise UnseenContext(ctx)
        probs = np.full(self.vocab_size, float(self.alpha))
        for token, n in row.items():
            probs[token] += n
        return probs / (total + self.alpha * self.vocab_size)

    def predict(self, sample: Sample, prefix: Sequence[int]) -> np.ndarray:
        return self.next_token(prefix)

    def num_tokens(self) -> int:
        return sum(sum(row.values()) for row in self.counts.values())

    # -- payload --------------------------------------------------------

    def to_payload(self) -> dict:
        """JSON-ready payload with contexts in sorted order."""
        return {
            "order": self.order,
            "alpha": self.alpha,
            "vocab_size": self.vocab_size,
            "counts": [
                [list(ctx), {str(a): n for a, n in sorted(self.counts[ctx].items())}]
                for ctx in sorted(self.counts)
            ],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> ExpertModel:
        counts = {
            tuple(ctx): Counter({int(a): int(n) for a, n in row.items()})
            for ctx, row in payload["counts"]
        }
        return cls(
            order=int(payload["order"]),
            alpha=float(payload["alpha"]),
            vocab_size=int(payload["vocab_size"]),
            counts=counts,
        )


class Predictor(Protocol):
    def predict(self, sample: Sample, prefix: Sequence[int]) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def count_contexts(sequences: Iterable[TokenSeq], order: int) -> dict[Context, Counter]:
    counts: dict[Context, Counter] = {}
    for seq in sequences:
        for k, token in enumerate(seq):
            counts.setdefault(context_of(seq[:k], order), Counter())[token] += 1
    return counts


def train_expert(shard: Corpus, order: int, alpha: float) -> ExpertModel:
    """Count model over one shard; counts do not depend on sample order."""
    if shard.vocab is None:
        raise ValueError("shard has no vocabulary")
    if not shard.samples:
        raise EmptyShard("cannot train an expert on an empty shard")
    model = ExpertModel(order, alpha, shard.vocab.size, count_contexts(shard.sequences(), order))
    logger.debug("Trained order-%d expert on %d samples (%d contexts)", order, len(shard), len(model.counts))
    return model


def train_dense(corpus: Corpus, order: int, alpha: float) -> ExpertModel:
    """The single model trained on the full corpus."""
    return train_expert(corpus, order, alpha)


def train_experts(shards: Sequence[Corpus], order: int, alpha: float, *, workers: int = 4) -> list[ExpertModel]:
    """Train one expert per shard concurrently; output follows shard order."""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda shard: train_expert(shard, order, alpha), shards))


def merge_counts(models: Sequence[ExpertModel]) -> ExpertModel:
    """Sum shard counts; equals the dense counts when shards partition the corpus."""
    if not models:
        raise ValueError("nothing to merge")
    first = models[0]
    merged: dict[Context, Counter] = {}
    for model in models:
        if (model.order, model.vocab_size) != (first.order, first.vocab_size):
            raise DimensionMismatch("experts differ in order or vocabulary size")
        for ctx, row in model.counts.items():
            merged.setdefault(ctx, Counter()).update(row)
    return ExpertModel(first.order, first.alpha, first.vocab_size, merged)


# ---------------------------------------------------------------------------
# Mixture weights
# ---------------------------------------------------------------------------

def context_shares(experts: Sequence[ExpertModel], prefix: Sequence[int]) -> RouterWeights:
    """Each expert's share of the context count: ``c_k(h) / sum_j c_j(h)``."""
    if not experts:
        raise ValueError("no experts")
    order = experts[0].order
    ctx = context_of(prefix, order)
    totals = [model.context_total(ctx) for model in experts]
    grand = sum(totals)
    if grand == 0:
        raise EmptyPrefixDistribution(f"context {ctx} unseen by every expert")
    return RouterWeights(tuple(n / grand for n in totals))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalMetrics:
    log_loss: float
    tv: float | None
    n_tokens: int

    def to_dict(self) -> dict:
        return {"log_loss": self.log_loss, "tv": self.tv, "n_tokens": self.n_tokens}


def evaluate(
    predictor: Predictor,
    heldout: Corpus,
    truth: Callable[[Sample, Sequence[int]], np.ndarray] | None = None,
) -> EvalMetrics:
    """Mean per-token negative log-likelihood and, given ``truth``, mean TV distance.

    ``truth(sample, prefix)`` returns the generating next-token distribution.
    A zero-probability observed token makes the log-loss infinite.
    """
    heldout.require_nonempty()
    nll = []
    tvs = []
    for sample in heldout:
        for k, token in enumerate(sample.tokens):
            prefix = sample.tokens[:k]
            p = predictor.predict(sample, prefix)
            prob = float(p[token])
            nll.append(math.inf if prob <= 0.0 else -math.log(prob))
            if truth is not None:
                tvs.append(0.5 * float(np.abs(p - truth(sample, prefix)).sum()))
    n = len(nll)
    return EvalMetrics(
        log_loss=math.fsum(nll) / n if n else math.nan,
        tv=(math.fsum(tvs) / len(tvs)) if tvs else None,
        n_tokens=n,
    )


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

MODEL_FORMAT_VERSION = 1


def _checksum(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_model(model: ExpertModel, path: str | Path) -> Path:
    """Write a versioned model file with a SHA-256 checksum of the payload."""
    payload = model.to_payload()
    document = {
        "format_version": MODEL_FORMAT_VERSION,
        "checksum": _checksum(payload),
        "payload": payload,
    }
    return atomic_write_text(Path(path), json.dumps(document, sort_keys=True, indent=1))


def load_model(path: str | Path) -> ExpertModel:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"cannot read model {path}: {e}") from e
    if not isinstance(document, dict) or document.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported model format version")
    payload = document.get("payload")
    if not isinstance(payload, dict) or _checksum(payload) != document.get("checksum"):
        raise ModelFormatError(f"{path}: checksum mismatch")
    try:
        return ExpertModel.from_payload(payload)
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"{path}: malformed payload: {e}") from e
