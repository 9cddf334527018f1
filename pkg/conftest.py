"""Root conftest: puts src/ on sys.path and provides small experiment configs.

Setuptools editable installs add src/ through a .pth file, which is skipped
when the project directory contains spaces.
"""

import copy
import sys
from pathlib import Path

import pytest

_SRC = str(Path(__file__).resolve().parent / "src")
if _SRC not in sys.path:
    sys.path.insert(0, _SRC)

# Small enough for every suite to finish in seconds: 3**2 = 9 states
SMALL_CONFIG = {
    "vocab_size": 3,
    "seq_len": 2,
    "prefix_len": 0,
    "num_experts": 2,
    "seed": 7,
    "output_dir": "runs/test",
    "repetitions": 2,
    "corpus": {
        "n_items": 40,
        "topics": 2,
        "feature_dim": 4,
        "separation": 0.9,
        "noise": 0.2,
        "concentration": 0.5,
        "text_only_fraction": 0.1,
        "max_pairs_per_item": 2,
        "heldout_fraction": 0.25,
    },
    "kmeans": {"algorithm": "balanced", "k_fine": 8, "max_iters": 20, "n_init": 2},
    "experts": {"order": 1, "alpha_exact": 0.0, "alpha_eval": 0.1, "workers": 2},
    "router": {"temperature": 10.0, "top_k": 1},
    "equivalence": {
        "random_targets": 1,
        "partitions_per_target": 1,
        "prefix_lengths": [0, 1],
        "concentration": 1.0,
    },
    "ablation": {
        "expert_counts": [2, 3],
        "algorithms": ["balanced", "two_stage"],
        "temperatures": [0.5, 10.0],
    },
}


@pytest.fixture
def config_dict() -> dict:
    """A fresh, mutable copy of the small test config."""
    return copy.deepcopy(SMALL_CONFIG)


@pytest.fixture
def small_config(config_dict):
    from dfmoe.config import config_from_dict

    return config_from_dict(config_dict)
