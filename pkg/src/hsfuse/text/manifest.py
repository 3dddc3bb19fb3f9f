"""Prompt manifests: one templated prompt plus three attribute prompts per class.

Manifest files are TOML (``[[classes]]`` tables) or JSON with the same schema::

    {"classes": [{"name": ..., "self_categorical": ..., "differentiated": [a, b, c]}]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import tomli

from ..errors import DataError

TEMPLATE = "a hyperspectral and lidar multimodal data of {name}"
N_DIFFERENTIATED = 3


@dataclass(frozen=True)
class ClassPrompts:
    name: str
    self_categorical: str
    differentiated: tuple[str, str, str]


@dataclass(frozen=True)
class PromptManifest:
    classes: tuple[ClassPrompts, ...]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def self_prompts(self) -> list[str]:
        return [c.self_categorical for c in self.classes]

    def differentiated_prompts(self, k: int) -> list[str]:
        return [c.differentiated[k] for c in self.classes]

    def prompt_sets(self) -> list[list[str]]:
        """[T_c, T_d1, T_d2, T_d3], each a list of C strings in class order."""
        return [self.self_prompts()] + [self.differentiated_prompts(k) for k in range(N_DIFFERENTIATED)]

    def corpus(self) -> list[str]:
        return [p for c in self.classes for p in (c.self_categorical, *c.differentiated)]

    def to_dict(self) -> dict:
        return {
            "classes": [
                {"name": c.name, "self_categorical": c.self_categorical,
                 "differentiated": list(c.differentiated)}
                for c in self.classes
            ]
        }


def self_categorical_prompt(name: str) -> str:
    return TEMPLATE.format(name=name).lower()


def manifest_from_dict(data: dict) -> PromptManifest:
    entries = data.get("classes")
    if not isinstance(entries, list) or not entries:
        raise DataError("manifest needs a non-empty 'classes' list")
    seen: set[str] = set()
    classes = []
    for i, entry in enumerate(entries):
        name = str(entry.get("name", "")).strip()
        if not name:
            raise DataError(f"class #{i + 1} has no name")
        if name.lower() in seen:
            raise DataError(f"duplicate class name {name!r}")
        seen.add(name.lower())
        diff = entry.get("differentiated", [])
        if not isinstance(diff, list) or len(diff) != N_DIFFERENTIATED:
            n = len(diff) if isinstance(diff, list) else "non-list"
            raise DataError(
                f"class {name!r} needs exactly {N_DIFFERENTIATED} differentiated prompts, got {n}"
            )
        selfcat = entry.get("self_categorical")
        if selfcat is None:
            selfcat = self_categorical_prompt(name)
        prompts = [str(selfcat), *map(str, diff)]
        if any(not p.strip() for p in prompts):
            raise DataError(f"class {name!r} has an empty prompt string")
        classes.append(ClassPrompts(name, prompts[0], tuple(prompts[1:])))
    return PromptManifest(tuple(classes))


def load_manifest(path: str | Path) -> PromptManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix.lower() == ".json" else tomli.loads(text)
    except (json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise DataError(f"cannot parse manifest {path}: {exc}") from exc
    return manifest_from_dict(data)


def trento_manifest() -> PromptManifest:
    """The bundled six-class Trento manifest."""
    text = resources.files("hsfuse.data").joinpath("trento_prompts.toml").read_text(encoding="utf-8")
    return manifest_from_dict(tomli.loads(text))


def generic_manifest(class_names: list[str]) -> PromptManifest:
    """Manifest for scenes without hand-written prompts (e.g. synthetic ones).

    The differentiated slots get simple attribute sentences built from the
    class index so that every prompt set stays distinct per class.
    """
    n = len(class_names)
    entries = []
    for i, name in enumerate(class_names):
        nb = class_names[(i + 1) % n]
        entries.append({
            "name": name,
            "differentiated": [
                f"the {name} region has its own spectral signature",
                f"the {name} surface height is level {i + 1}",
                f"the {name} region lies near {nb}",
            ],
        })
    return manifest_from_dict({"classes": entries})
