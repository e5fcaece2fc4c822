"""Glomerular class registry, task vectors and region hierarchy."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

REGION, CELL, LESION = "region", "cell", "lesion"
RODENT, HUMAN = "rodent", "human"
SPECIES = (RODENT, HUMAN)

CONTAINS, OVERLAPS = "contains", "overlaps"


class UnknownClassError(KeyError):
    pass


@dataclass(frozen=True)
class GlomClass:
    index: int
    code: str
    group: str
    species: frozenset
    name: str = ""

    @property
    def is_tissue(self) -> bool:
        return self.group in (REGION, CELL)


@dataclass(frozen=True)
class HierarchyRelation:
    parent: str
    child: str
    relation: str


_R = frozenset({RODENT})
_H = frozenset({HUMAN})
_RH = frozenset({RODENT, HUMAN})

# column order of the dataset distribution table; fixes mask channel order
_CLASSES = (
    ("Cap", REGION, _RH, "Bowman's capsule"),
    ("Tuft", REGION, _R, "glomerular tuft"),
    ("Mes", REGION, _R, "mesangium"),
    ("Pod", CELL, _R, "podocytes"),
    ("Mec", CELL, _R, "mesangial cells"),
    ("AH", LESION, _R, "adhesion"),
    ("CD", LESION, _R, "capsular drop"),
    ("GS", LESION, _RH, "global sclerosis"),
    ("HS", LESION, _RH, "hyalinosis"),
    ("ME", LESION, _H, "mesangial expansion"),
    ("ML", LESION, _R, "mesangial lysis"),
    ("MA", LESION, _RH, "microaneurysm"),
    ("NS", LESION, _RH, "nodular sclerosis"),
    ("SS", LESION, _RH, "segmental sclerosis"),
)

_ALIASES = {"prod": "Pod"}

RELATIONS = (
    HierarchyRelation("Cap", "Tuft", CONTAINS),
    HierarchyRelation("Tuft", "Mes", CONTAINS),
    HierarchyRelation("GS", "Cap", OVERLAPS),
)


class Taxonomy:
    """Ordered, immutable registry of segmentation classes.

    The position of a class in the registry is its task index and its
    channel in exported mask stacks.
    """

    def __init__(self, classes: Sequence[GlomClass], relations: Sequence[HierarchyRelation] = ()):
        idx = [c.index for c in classes]
        if sorted(idx) != list(range(len(classes))):
            raise ValueError(f"class indices must be a bijection onto 0..{len(classes) - 1}, got {idx}")
        self._classes = tuple(sorted(classes, key=lambda c: c.index))
        self._by_code = {c.code.lower(): c for c in self._classes}
        if len(self._by_code) != len(self._classes):
            raise ValueError("duplicate class codes")
        for rel in relations:
            for code in (rel.parent, rel.child):
                if code.lower() not in self._by_code:
                    raise UnknownClassError(code)
        self.relations = tuple(relations)
        _check_acyclic(self.relations)

    def __len__(self) -> int:
        return len(self._classes)

    def __iter__(self):
        return iter(self._classes)

    def __getitem__(self, index: int) -> GlomClass:
        return self._classes[index]

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(c.code for c in self._classes)

    def lookup(self, code: str) -> GlomClass:
        key = _ALIASES.get(code.lower(), code).lower()
        try:
            return self._by_code[key]
        except KeyError:
            raise UnknownClassError(
                f"unknown class {code!r}; valid codes: {', '.join(self.codes)}"
            ) from None

    def index_of(self, code: str) -> int:
        return self.lookup(code).index

    def group(self, group: str) -> list[GlomClass]:
        return [c for c in self._classes if c.group == group]

    def for_species(self, species: str) -> list[GlomClass]:
        return [c for c in self._classes if species in c.species]

    def tissue(self) -> list[GlomClass]:
        return [c for c in self._classes if c.is_tissue]

    def lesions(self) -> list[GlomClass]:
        return self.group(LESION)

    def containment_closure(self) -> set[tuple[str, str]]:
        """All (ancestor, descendant) pairs implied by ``contains`` relations."""
        edges = {(r.parent, r.child) for r in self.relations if r.relation == CONTAINS}
        closure = set(edges)
        while True:
            extra = {(a, d) for a, b in closure for c, d in closure if b == c} - closure
            if not extra:
                return closure
            closure |= extra

    def to_manifest(self) -> str:
        lines = []
        for c in self._classes:
            species = ",".join(s for s in SPECIES if s in c.species)
            lines.append(f"{c.index}\t{c.code}\t{c.group}\t{species}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str, relations: Sequence[HierarchyRelation] = RELATIONS) -> "Taxonomy":
        classes = []
        for line in text.splitlines():
            if not line.strip():
                continue
            index, code, group, species = line.split("\t")
            classes.append(GlomClass(int(index), code, group, frozenset(species.split(","))))
        return cls(classes, relations)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_manifest().encode()).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, Taxonomy) and self.to_manifest() == other.to_manifest()

    def __hash__(self):
        return hash(self.to_manifest())


def _check_acyclic(relations: Iterable[HierarchyRelation]) -> None:
    graph: dict[str, list[str]] = {}
    for r in relations:
        if r.relation == CONTAINS:
            graph.setdefault(r.parent, []).append(r.child)
    state: dict[str, int] = {}

    def visit(node):
        if state.get(node) == 1:
            raise ValueError(f"cycle in 'contains' relations through {node}")
        if state.get(node) == 2:
            return
        state[node] = 1
        for child in graph.get(node, ()):
            visit(child)
        state[node] = 2

    for node in list(graph):
        visit(node)


TAXONOMY = Taxonomy(
    [GlomClass(i, code, group, species, name) for i, (code, group, species, name) in enumerate(_CLASSES)],
    RELATIONS,
)
NUM_CLASSES = len(TAXONOMY)


def class_lookup(code: str, taxonomy: Taxonomy = TAXONOMY) -> GlomClass:
    return taxonomy.lookup(code)


def encode_task(class_index: int, m: int = NUM_CLASSES) -> np.ndarray:
    """One-hot class-aware task vector of length ``m``."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not 0 <= class_index < m:
        raise ValueError(f"class_index must satisfy 0 <= class_index < {m}, got {class_index}")
    vec = np.zeros(m, dtype=np.float32)
    vec[class_index] = 1.0
    return vec
