"""Corpus loading, sharding and serialization.

A sample is one image–text pair: a token sequence plus the feature vector
of its image (``None`` for text-only samples).  Several samples may share an
``item_id`` when one image carries several captions; clustering balances
unique items, so pair and token counts per cluster can still differ.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from dfmoe.dfm import TokenSeq, Vocab
from dfmoe.errors import EmptyCorpus, MaskInTarget

logger = logging.getLogger(__name__)

_UNIT_TOL = 1e-9


@dataclass
class Sample:
    item_id: str
    tokens: TokenSeq
    features: np.ndarray | None = None
    topic: int | None = None

    def __post_init__(self) -> None:
        self.tokens = tuple(int(t) for t in self.tokens)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=float)

    @property
    def is_text_only(self) -> bool:
        return self.features is None

    def to_record(self) -> dict:
        """Compact JSON-ready representation (one JSONL line)."""
        return {
            "item_id": self.item_id,
            "tokens": list(self.tokens),
            "features": None if self.features is None else self.features.tolist(),
            "topic": self.topic,
        }

    @classmethod
    def from_record(cls, record: Mapping) -> Sample:
        return cls(
            item_id=str(record["item_id"]),
            tokens=tuple(record["tokens"]),
            features=record.get("features"),
            topic=record.get("topic"),
        )


@dataclass
class Corpus:
    samples: list[Sample] = field(default_factory=list)
    vocab: Vocab | None = None

    @classmethod
    def from_sequences(cls, sequences: Iterable[TokenSeq], vocab: Vocab) -> Corpus:
        """Text-only corpus, one item per sequence."""
        return cls(
            [Sample(item_id=str(k), tokens=tuple(s)) for k, s in enumerate(sequences)],
            vocab,
        )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def sequences(self) -> list[TokenSeq]:
        return [s.tokens for s in self.samples]

    def token_count(self) -> int:
        return sum(len(s.tokens) for s in self.samples)

    def validate(self) -> None:
        """Sequences must be mask-free, features unit-norm."""
        if self.vocab is None:
            raise ValueError("corpus has no vocabulary")
        for sample in self.samples:
            self.vocab.check(sample.tokens)
            if self.vocab.mask_id in sample.tokens:
                raise MaskInTarget(f"sample {sample.item_id} contains the mask token")
            if sample.features is not None:
                norm = float(np.linalg.norm(sample.features))
                if abs(norm - 1.0) > _UNIT_TOL:
                    raise ValueError(f"sample {sample.item_id} features have norm {norm}")

    def items(self) -> dict[str, np.ndarray | None]:
        """Unique items in first-seen order, with their features."""
        found: dict[str, np.ndarray | None] = {}
        for sample in self.samples:
            found.setdefault(sample.item_id, sample.features)
        return found

    def subset(self, item_ids: Iterable[str]) -> Corpus:
        keep = set(item_ids)
        return Corpus([s for s in self.samples if s.item_id in keep], self.vocab)

    def shards(self, assignment: Mapping[str, int], num_clusters: int) -> list[Corpus]:
        """Split by item cluster id; every item must be assigned."""
        shards = [Corpus([], self.vocab) for _ in range(num_clusters)]
        for sample in self.samples:
            shards[assignment[sample.item_id]].samples.append(sample)
        return shards

    def require_nonempty(self) -> None:
        if not self.samples:
            raise EmptyCorpus("corpus has no samples")


# ---------------------------------------------------------------------------
# JSON Lines
# ---------------------------------------------------------------------------

def write_corpus(path: str | Path, corpus: Corpus) -> Path:
    from dfmoe.persist import atomic_write_text

    lines = [json.dumps(s.to_record(), sort_keys=True) for s in corpus.samples]
    return atomic_write_text(Path(path), "\n".join(lines) + ("\n" if lines else ""))


def read_corpus(path: str | Path, vocab: Vocab) -> Corpus:
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                samples.append(Sample.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as e:
                raise ValueError(f"{path}:{lineno}: bad corpus record: {e}") from e
    logger.debug("Loaded %d samples from %s", len(samples), path)
    return Corpus(samples, vocab)
