"""Predicate catalog: labels, their category, and corpus frequencies."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

CATEGORIES: tuple[str, ...] = ("Geometric", "Possessive", "Semantic", "Misc")


class CatalogError(ValueError):
    pass


@dataclass
class PredicateCatalog:
    labels: list[str]
    category_of: dict[str, str]
    frequency: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for label in self.labels:
            if label in seen:
                raise CatalogError(f"duplicate predicate label {label!r}")
            seen.add(label)
            cat = self.category_of.get(label)
            if cat not in CATEGORIES:
                raise CatalogError(f"unknown category {cat!r} for predicate {label!r}")
        for label in self.category_of:
            if label not in seen:
                raise CatalogError(f"category given for unknown predicate {label!r}")
        self._index = {label: i for i, label in enumerate(self.labels)}
        for label in self.labels:
            self.frequency.setdefault(label, 0)

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise CatalogError(f"unknown predicate {label!r}") from None

    def category(self, predicate: int | str) -> str:
        label = self.labels[predicate] if isinstance(predicate, int) else predicate
        return self.category_of[label]

    def members(self, category: str) -> list[int]:
        """Predicate ids belonging to ``category``, in catalog order."""
        if category not in CATEGORIES:
            raise CatalogError(f"unknown category {category!r}")
        return [i for i, label in enumerate(self.labels) if self.category_of[label] == category]

    def category_index(self, predicate: int) -> tuple[str, int]:
        """(category, position inside that category) of a predicate id."""
        cat = self.category(predicate)
        return cat, self.members(cat).index(predicate)

    def category_sizes(self) -> dict[str, int]:
        return {c: len(self.members(c)) for c in CATEGORIES}

    def frequencies(self) -> list[int]:
        return [int(self.frequency[label]) for label in self.labels]

    def with_frequencies(self, counts: Mapping[str, int] | Iterable[int]) -> "PredicateCatalog":
        if not isinstance(counts, Mapping):
            counts = dict(zip(self.labels, counts))
        freq = {label: int(counts.get(label, 0)) for label in self.labels}
        return PredicateCatalog(list(self.labels), dict(self.category_of), freq)

    def to_json(self) -> dict:
        out = {"predicates": [{"label": l, "category": self.category_of[l]} for l in self.labels]}
        if any(self.frequency.values()):
            out["frequency"] = {l: self.frequency[l] for l in self.labels}
        return out


def catalog_from_json(obj: dict) -> PredicateCatalog:
    try:
        entries = obj["predicates"]
        labels = [e["label"] for e in entries]
        category_of = {e["label"]: e["category"] for e in entries}
    except (KeyError, TypeError) as exc:
        raise CatalogError(f"malformed catalog: missing {exc}") from None
    if len(category_of) != len(labels):
        dup = next(l for l in labels if labels.count(l) > 1)
        raise CatalogError(f"duplicate predicate label {dup!r}")
    return PredicateCatalog(labels, category_of, dict(obj.get("frequency", {})))


def load_catalog(path=None) -> PredicateCatalog:
    """Load a catalog file; ``None`` loads the bundled default (four-category, 50 predicates)."""
    if path is None:
        text = resources.files("sgshuffle.data").joinpath("default_catalog.json").read_text()
    else:
        text = Path(path).read_text()
    return catalog_from_json(json.loads(text))


def save_catalog(catalog: PredicateCatalog, path) -> None:
    Path(path).write_text(json.dumps(catalog.to_json(), indent=1) + "\n")
