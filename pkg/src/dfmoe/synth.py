"""Synthetic clustered corpora with a known generating distribution.

Each latent topic owns a feature blob on the unit sphere and a first-order
Markov chain over content tokens.  Items cycle through the topics; each
draws a feature vector around its topic mean plus 1..max_pairs_per_item
token sequences (several captions for one image).  A fraction of items is
text-only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dfmoe.config import ExperimentConfig, component_rng
from dfmoe.data import Corpus, Sample
from dfmoe.dfm import DistTable, TokenSeq, Vocab, enumerate_states
from dfmoe.errors import ConfigInvalid

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TopicModel:
    """``initial[a]`` and ``transition[b, a]`` are zero on the mask token."""
    vocab: Vocab
    initial: np.ndarray
    transition: np.ndarray

    def conditional(self, prefix: Sequence[int]) -> np.ndarray:
        if not prefix:
            return self.initial
        return self.transition[prefix[-1]]

    def sample(self, rng: np.random.Generator, length: int) -> TokenSeq:
        tokens: list[int] = []
        for _ in range(length):
            tokens.append(int(rng.choice(self.vocab.size, p=self.conditional(tokens))))
        return tuple(tokens)

    def probability(self, seq: TokenSeq) -> float:
        p = 1.0
        for k, token in enumerate(seq):
            p *= float(self.conditional(seq[:k])[token])
        return p

    def sequence_table(self, length: int) -> DistTable:
        return DistTable(
            (seq, self.probability(seq))
            for seq in enumerate_states(self.vocab, length, mask_free=True)
        )


def make_topic(vocab: Vocab, rng: np.random.Generator, concentration: float) -> TopicModel:
    content = list(vocab.content_tokens)
    alpha = np.full(len(content), concentration)
    initial = np.zeros(vocab.size)
    initial[content] = rng.dirichlet(alpha)
    transition = np.zeros((vocab.size, vocab.size))
    for b in content:
        transition[b, content] = rng.dirichlet(alpha)
    # rows for the mask are never used as context
    transition[vocab.mask_id] = initial
    return TopicModel(vocab, initial, transition)


def topic_means(n_topics: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Unit mean directions ``normalize(s * e_k + (1 - s) * g)``.

    ``s = 1`` gives orthogonal axes (needs ``dim >= n_topics``); smaller ``s``
    pulls every topic toward a shared random direction ``g``.
    """
    if separation > 0 and dim < n_topics:
        raise ConfigInvalid(f"feature_dim={dim} cannot hold {n_topics} separated topics")
    shared = rng.standard_normal(dim)
    shared /= np.linalg.norm(shared)
    means = np.zeros((n_topics, dim))
    for k in range(n_topics):
        axis = np.zeros(dim)
        if separation > 0:
            axis[k] = 1.0
        means[k] = separation * axis + (1.0 - separation) * shared
        norm = np.linalg.norm(means[k])
        if norm == 0.0:
            raise ConfigInvalid("topic mean collapsed to zero; adjust corpus.separation")
        means[k] /= norm
    return means


@dataclass
class SyntheticCorpus:
    corpus: Corpus
    topics: list[TopicModel]
    means: np.ndarray

    def truth(self, sample: Sample, prefix: Sequence[int]) -> np.ndarray:
        """The generating next-token distribution for ``sample``'s topic."""
        return self.topics[sample.topic].conditional(prefix)

    def target_table(self, length: int) -> DistTable:
        """Uniform mixture of the topic sequence distributions."""
        mixed: dict[TokenSeq, float] = {}
        for topic in self.topics:
            for seq, p in topic.sequence_table(length).items():
                mixed[seq] = mixed.get(seq, 0.0) + p / len(self.topics)
        return DistTable(mixed)

    def split(self, heldout_fraction: float, rng: np.random.Generator) -> tuple[Corpus, Corpus]:
        """Item-level train/held-out split (an item's captions stay together)."""
        items = list(self.corpus.items())
        order = rng.permutation(len(items))
        n_held = max(1, int(round(heldout_fraction * len(items))))
        held = {items[i] for i in order[:n_held]}
        train = self.corpus.subset(i for i in items if i not in held)
        return train, self.corpus.subset(held)


def synth_corpus(config: ExperimentConfig, seed: int | None = None) -> SyntheticCorpus:
    """Deterministic synthetic corpus for ``config`` (``seed`` overrides ``config.seed``)."""
    c = config.corpus
    seed = config.seed if seed is None else seed
    rng = component_rng(seed, "corpus")
    vocab = config.vocab
    topics = [make_topic(vocab, rng, c.concentration) for _ in range(c.topics)]
    means = topic_means(c.topics, c.feature_dim, c.separation, rng)
    samples: list[Sample] = []
    for item in range(c.n_items):
        topic = item % c.topics
        features = None
        if rng.random() >= c.text_only_fraction:
            vec = means[topic] + c.noise * rng.standard_normal(c.feature_dim)
            norm = np.linalg.norm(vec)
            features = vec / norm if norm > 0 else means[topic].copy()
        n_pairs = int(rng.integers(1, c.max_pairs_per_item + 1))
        for _ in range(n_pairs):
            samples.append(Sample(
                item_id=f"item-{item:05d}",
                tokens=topics[topic].sample(rng, config.seq_len),
                features=features,
                topic=topic,
            ))
    corpus = Corpus(samples, vocab)
    corpus.validate()
    logger.info("Synthesized %d samples over %d items and %d topics", len(samples), c.n_items, c.topics)
    return SyntheticCorpus(corpus, topics, means)


def topic_purity(assignment: dict[str, int], corpus: Corpus, num_clusters: int) -> float:
    """Fraction of items whose cluster's majority topic matches their own."""
    votes = np.zeros((num_clusters, 1 + max((s.topic or 0) for s in corpus)), dtype=int)
    topics: dict[str, int] = {}
    for sample in corpus:
        if sample.item_id in assignment and sample.item_id not in topics:
            topics[sample.item_id] = sample.topic
            votes[assignment[sample.item_id], sample.topic] += 1
    if not topics:
        return 0.0
    return float(votes.max(axis=1).sum()) / len(topics)
