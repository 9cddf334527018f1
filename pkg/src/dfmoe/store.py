"""Model store for trained experts.

Two tiers: an in-memory dict plus disk files laid out as
    {root}/models/{name}/model.json
so ``dfmoe train`` and ``dfmoe infer`` can hand models across processes.
"""

from __future__ import annotations

import re
from pathlib import Path

from dfmoe.experts import ExpertModel, load_model, save_model

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")

DENSE_NAME = "dense"


def expert_name(k: int) -> str:
    return f"expert-{k}"


class ModelStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._memory: dict[str, ExpertModel] = {}

    @property
    def models_dir(self) -> Path:
        return self.root / "models"

    def has(self, name: str) -> bool:
        if name in self._memory:
            return True
        return self._model_path(name).is_file()

    def get(self, name: str) -> ExpertModel | None:
        """Load a stored model, or None if absent."""
        if name in self._memory:
            return self._memory[name]
        path = self._model_path(name)
        if path.is_file():
            model = load_model(path)
            self._memory[name] = model
            return model
        return None

    def put(self, name: str, model: ExpertModel) -> Path:
        self._memory[name] = model
        return save_model(model, self._model_path(name))

    def names(self) -> list[str]:
        on_disk = {p.parent.name for p in self.models_dir.glob("*/model.json")} if self.models_dir.is_dir() else set()
        return sorted(on_disk | set(self._memory))

    def experts(self) -> list[ExpertModel]:
        """Stored experts ``expert-0 .. expert-{K-1}`` in cluster order."""
        found = []
        k = 0
        while self.has(expert_name(k)):
            found.append(self.get(expert_name(k)))
            k += 1
        return found

    def _model_path(self, name: str) -> Path:
        if not _NAME_RE.match(name):
            raise ValueError(f"invalid model name {name!r}")
        return self.models_dir / name / "model.json"
