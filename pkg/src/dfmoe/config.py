"""Experiment configuration.

One JSON or YAML document parsed into frozen dataclasses.  Every field is
required and unknown keys are rejected, so no hyperparameter silently falls
back to a default.  All randomness in a run derives from ``seed`` through
named component streams (``component_rng``).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from dfmoe.dfm import ENUMERATION_LIMIT, Vocab
from dfmoe.errors import ConfigInvalid

logger = logging.getLogger(__name__)

CLUSTER_ALGORITHMS = ("balanced", "two_stage")

# Order is part of the seeding contract: appending is safe, reordering is not
RNG_COMPONENTS = (
    "corpus",
    "split",
    "kmeans",
    "text_only",
    "router",
    "equivalence",
    "ablation",
    "repetitions",
)


@dataclass(frozen=True)
class CorpusConfig:
    n_items: int
    topics: int
    feature_dim: int
    separation: float
    noise: float
    concentration: float
    text_only_fraction: float
    max_pairs_per_item: int
    heldout_fraction: float


@dataclass(frozen=True)
class KMeansConfig:
    algorithm: str
    k_fine: int
    max_iters: int
    n_init: int


@dataclass(frozen=True)
class ExpertConfig:
    order: int
    alpha_exact: float
    alpha_eval: float
    workers: int


@dataclass(frozen=True)
class RouterSection:
    temperature: float
    top_k: int


@dataclass(frozen=True)
class EquivalenceConfig:
    random_targets: int
    partitions_per_target: int
    prefix_lengths: tuple[int, ...]
    concentration: float


@dataclass(frozen=True)
class AblationConfig:
    expert_counts: tuple[int, ...]
    algorithms: tuple[str, ...]
    temperatures: tuple[float, ...]


@dataclass(frozen=True)
class ExperimentConfig:
    vocab_size: int
    seq_len: int
    prefix_len: int
    num_experts: int
    seed: int
    output_dir: str
    repetitions: int
    corpus: CorpusConfig
    kmeans: KMeansConfig
    experts: ExpertConfig
    router: RouterSection
    equivalence: EquivalenceConfig
    ablation: AblationConfig

    @property
    def vocab(self) -> Vocab:
        """Tokens ``0..d-2`` are content; ``d-1`` is the mask."""
        return Vocab(self.vocab_size, self.vocab_size - 1)

    @property
    def state_count(self) -> int:
        return self.vocab_size ** self.seq_len

    def with_overrides(self, *, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if output_dir is not None:
            changes["output_dir"] = str(output_dir)
        return dataclasses.replace(self, **changes) if changes else self

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def validate(self) -> None:
        c = self.corpus
        problems = []
        if self.vocab_size < 3:
            problems.append("vocab_size must be >= 3 (mask plus two content tokens)")
        if self.seq_len < 1:
            problems.append("seq_len must be >= 1")
        if not 0 <= self.prefix_len <= self.seq_len:
            problems.append("prefix_len must lie in [0, seq_len]")
        if self.state_count > ENUMERATION_LIMIT:
            problems.append(f"vocab_size**seq_len = {self.state_count} exceeds {ENUMERATION_LIMIT}")
        if self.num_experts < 1:
            problems.append("num_experts must be >= 1")
        if self.seed < 0:
            problems.append("seed must be >= 0")
        if self.repetitions < 1:
            problems.append("repetitions must be >= 1")
        if not 1 <= self.router.top_k <= self.num_experts:
            problems.append("router.top_k must lie in [1, num_experts]")
        if not self.router.temperature > 0:
            problems.append("router.temperature must be > 0")
        if self.kmeans.algorithm not in CLUSTER_ALGORITHMS:
            problems.append(f"kmeans.algorithm must be one of {CLUSTER_ALGORITHMS}")
        if self.kmeans.k_fine < self.num_experts:
            problems.append("kmeans.k_fine must be >= num_experts")
        if self.kmeans.max_iters < 1 or self.kmeans.n_init < 1:
            problems.append("kmeans.max_iters and kmeans.n_init must be >= 1")
        if self.experts.order < 0:
            problems.append("experts.order must be >= 0")
        if self.experts.alpha_exact < 0 or self.experts.alpha_eval < 0:
            problems.append("expert smoothing must be >= 0")
        if self.experts.workers < 1:
            problems.append("experts.workers must be >= 1")
        if c.topics < 1 or c.feature_dim < 1 or c.max_pairs_per_item < 1:
            problems.append("corpus.topics, feature_dim and max_pairs_per_item must be >= 1")
        if c.n_items < 2 * self.num_experts:
            problems.append("corpus.n_items must be at least 2 * num_experts")
        if not 0.0 <= c.separation <= 1.0:
            problems.append("corpus.separation must lie in [0, 1]")
        if c.noise < 0 or c.concentration <= 0:
            problems.append("corpus.noise must be >= 0 and corpus.concentration > 0")
        if not 0.0 <= c.text_only_fraction < 1.0 or not 0.0 < c.heldout_fraction < 1.0:
            problems.append("corpus fractions must lie in [0, 1) (heldout in (0, 1))")
        e = self.equivalence
        if e.random_targets < 0 or e.partitions_per_target < 1 or e.concentration <= 0:
            problems.append("equivalence counts must be non-negative with concentration > 0")
        if any(not 0 <= p <= self.seq_len for p in e.prefix_lengths) or not e.prefix_lengths:
            problems.append("equivalence.prefix_lengths must be non-empty and within [0, seq_len]")
        a = self.ablation
        if any(k < 1 for k in a.expert_counts) or any(t <= 0 for t in a.temperatures):
            problems.append("ablation.expert_counts must be >= 1 and temperatures > 0")
        if any(alg not in CLUSTER_ALGORITHMS for alg in a.algorithms):
            problems.append(f"ablation.algorithms must be drawn from {CLUSTER_ALGORITHMS}")
        if problems:
            raise ConfigInvalid("; ".join(problems))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _coerce(value: Any, hint: Any, where: str) -> Any:
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    origin = typing.get_origin(hint)
    if origin is tuple:
        (item_hint, _) = typing.get_args(hint)
        if not isinstance(value, list):
            raise ConfigInvalid(f"{where}: expected a list, got {type(value).__name__}")
        return tuple(_coerce(v, item_hint, f"{where}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigInvalid(f"{where}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigInvalid(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigInvalid(f"{where}: unsupported field type {hint!r}")


def _build(cls: type, data: Any, where: str) -> Any:
    if not isinstance(data, Mapping):
        raise ConfigInvalid(f"{where or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    missing = [n for n in names if n not in data]
    unknown = sorted(set(data) - set(names))
    prefix = f"{where}." if where else ""
    if missing:
        raise ConfigInvalid(f"missing fields: {', '.join(prefix + n for n in missing)}")
    if unknown:
        raise ConfigInvalid(f"unknown fields: {', '.join(prefix + n for n in unknown)}")
    return cls(**{n: _coerce(data[n], hints[n], prefix + n) for n in names})


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    config = _build(ExperimentConfig, data, "")
    config.validate()
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a ``.json`` or ``.yaml``/``.yml`` experiment config."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigInvalid(f"cannot read config {path}: {e}") from e
    try:
        if path.suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigInvalid(f"cannot parse config {path}: {e}") from e
    config = config_from_dict(data)
    logger.debug("Loaded config %s (seed=%d)", path, config.seed)
    return config


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------

def component_seed(seed: int, component: str) -> np.random.SeedSequence:
    """The seed stream for one named component of a run."""
    try:
        index = RNG_COMPONENTS.index(component)
    except ValueError:
        raise KeyError(f"unknown rng component {component!r}") from None
    return np.random.SeedSequence(seed).spawn(len(RNG_COMPONENTS))[index]


def component_rng(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(component_seed(seed, component))


def component_int(seed: int, component: str) -> int:
    """A derived integer seed, for APIs that take one."""
    return int(component_seed(seed, component).generate_state(1, dtype=np.uint32)[0])
