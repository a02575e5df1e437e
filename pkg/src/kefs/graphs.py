"""Prior class-correlation graphs: knowledge (shared ingredients), hyperclass
(taxonomy cursor depth) and probability (label co-occurrence).

Raw matrices are built per source, max-normalized, thresholded into logical
adjacency matrices with forced self-loops, then symmetrically normalized for
graph convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputDataError, InvariantViolation

GRAPH_KEYS = ("A1", "A2", "A3")


@dataclass
class ClassTaxonomy:
    """Class hierarchy with the root at level 0 and every class a leaf at level ``levels``."""

    levels: int
    parent: dict
    level: dict
    class_ids: list = field(default_factory=list)

    @classmethod
    def from_nodes(cls, levels: int, nodes: Sequence[Mapping]) -> "ClassTaxonomy":
        parent, level = {}, {}
        for node in nodes:
            nid = _node_id(node["id"])
            if nid in parent:
                raise InputDataError(f"duplicate taxonomy node {nid!r}")
            p = node.get("parent")
            parent[nid] = None if p is None else _node_id(p)
            level[nid] = int(node["level"])
        roots = [n for n, p in parent.items() if p is None]
        if len(roots) != 1:
            raise InputDataError(f"taxonomy needs exactly one root, found {len(roots)}")
        if level[roots[0]] != 0:
            raise InputDataError("taxonomy root must be at level 0")
        children = {n: 0 for n in parent}
        for n, p in parent.items():
            if p is None:
                continue
            if p not in parent:
                raise InputDataError(f"node {n!r} has unknown parent {p!r}")
            if level[n] != level[p] + 1:
                raise InputDataError(f"node {n!r} at level {level[n]} under parent at level {level[p]}")
            children[p] += 1
        leaves = [n for n, c in children.items() if c == 0 and parent[n] is not None]
        for leaf in leaves:
            if level[leaf] != levels:
                raise InputDataError(f"class {leaf!r} is a leaf at level {level[leaf]}, expected {levels}")
        tax = cls(levels=int(levels), parent=parent, level=level, class_ids=sorted(leaves))
        for leaf in tax.class_ids:
            tax.path(leaf)  # rejects cycles
        return tax

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ClassTaxonomy":
        try:
            return cls.from_nodes(doc["levels"], doc["nodes"])
        except KeyError as exc:
            raise InputDataError(f"taxonomy document missing key {exc}") from None

    def path(self, node) -> list:
        """Ancestors of ``node`` from itself up to the root."""
        if node not in self.parent:
            raise InputDataError(f"class {node!r} missing from taxonomy")
        out = [node]
        while self.parent[out[-1]] is not None:
            out.append(self.parent[out[-1]])
            if len(out) > len(self.parent):
                raise InputDataError(f"cycle in taxonomy above {node!r}")
        return out


@dataclass
class IngredientTable:
    groups: frozenset
    items: dict  # class id -> list of (ingredient, group)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "IngredientTable":
        if "classes" in doc:
            raw, groups = doc["classes"], doc.get("groups")
        else:
            raw, groups = doc, None
        items = {}
        for cid, entries in raw.items():
            items[_node_id(cid)] = [(e["ingredient"], e["group"]) for e in entries]
        if groups is None:
            groups = {g for entries in items.values() for _, g in entries}
        table = cls(groups=frozenset(groups), items=items)
        table.validate()
        return table

    def validate(self) -> None:
        for cid, entries in self.items.items():
            names = [ing for ing, _ in entries]
            if len(set(names)) != len(names):
                raise InputDataError(f"class {cid!r} lists an ingredient twice")
            for ing, group in entries:
                if group not in self.groups:
                    raise InputDataError(f"class {cid!r}: ingredient {ing!r} has unknown group {group!r}")


@dataclass
class CooccurrenceCounts:
    O: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        self.O = np.asarray(self.O, dtype=float)
        self.T = np.asarray(self.T, dtype=float)
        C = self.T.shape[0]
        if self.T.ndim != 1 or self.O.shape != (C, C):
            raise InputDataError(f"co-occurrence shapes O{self.O.shape} and T{self.T.shape} disagree")
        if (self.O < 0).any() or (self.T < 0).any():
            raise InputDataError("co-occurrence counts must be non-negative")
        if not (np.all(self.O == np.round(self.O)) and np.all(self.T == np.round(self.T))):
            raise InputDataError("co-occurrence counts must be integers")
        if not np.array_equal(self.O, self.O.T):
            raise InputDataError("pair-occurrence matrix O must be symmetric")
        if C and (self.T < self.O.max(axis=1)).any():
            bad = int(np.argmax(self.T < self.O.max(axis=1)))
            raise InputDataError(f"class index {bad}: T is smaller than a pair count")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CooccurrenceCounts":
        try:
            return cls(O=doc["O"], T=doc["T"])
        except KeyError as exc:
            raise InputDataError(f"counts document missing key {exc}") from None


def build_knowledge_adjacency(ingredients: IngredientTable, class_ids: Sequence | None = None) -> np.ndarray:
    """Count of ingredients shared by two classes within the same ingredient group."""
    ingredients.validate()
    if class_ids is None:
        class_ids = sorted(ingredients.items)
    sets = []
    for cid in class_ids:
        if cid not in ingredients.items:
            raise InputDataError(f"class {cid!r} has no ingredient entry")
        sets.append(set(ingredients.items[cid]))
    C = len(sets)
    out = np.zeros((C, C))
    for i in range(C):
        for j in range(i, C):
            out[i, j] = out[j, i] = len(sets[i] & sets[j])
    return out


def build_hyperclass_adjacency(taxonomy: ClassTaxonomy, class_ids: Sequence | None = None) -> np.ndarray:
    """Level of the deepest non-root common ancestor of each class pair; 0 if only the root is shared."""
    if class_ids is None:
        class_ids = taxonomy.class_ids
    # root-first ancestor chains; chain[l] is the ancestor at level l
    chains = [taxonomy.path(c)[::-1] for c in class_ids]
    C = len(chains)
    out = np.zeros((C, C))
    for i in range(C):
        out[i, i] = taxonomy.levels
        for j in range(i + 1, C):
            a, b = chains[i], chains[j]
            depth = 0
            for lvl in range(1, min(len(a), len(b))):
                if a[lvl] != b[lvl]:
                    break
                depth = lvl
            out[i, j] = out[j, i] = depth
    return out


def build_probability_adjacency(counts: CooccurrenceCounts) -> np.ndarray:
    """Conditional co-occurrence O[i, j] / T[i]; rows with T[i] = 0 are zero."""
    T = counts.T[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(T > 0, counts.O / np.where(T > 0, T, 1.0), 0.0)
    return out


def normalize_and_quantize(raw: np.ndarray, tau: float) -> np.ndarray:
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"threshold tau={tau} outside [0, 1]")
    raw = np.asarray(raw, dtype=float)
    if (raw < 0).any():
        raise InputDataError("raw adjacency has negative entries")
    peak = raw.max() if raw.size else 0.0
    scaled = raw / peak if peak > 0 else np.zeros_like(raw)
    out = (scaled >= tau).astype(float)
    np.fill_diagonal(out, 1.0)
    return out


def laplacian_normalize(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    deg = A.sum(axis=1)
    if (deg <= 0).any():
        raise InvariantViolation(f"zero-degree node at index {int(np.argmin(deg))}; self-loops missing")
    inv_sqrt = 1.0 / np.sqrt(deg)
    return inv_sqrt[:, None] * A * inv_sqrt[None, :]


@dataclass
class MultiSourceGraphSet:
    """Logical adjacency matrices keyed ``A1``..``A3`` (``A1`` may be absent) and their normalized forms."""

    class_ids: list
    tau: float
    logical: dict
    normalized: dict

    @property
    def n(self) -> int:
        return len(self.class_ids)

    def available(self) -> list:
        return [k for k in GRAPH_KEYS if self.logical.get(k) is not None]

    @classmethod
    def from_logical(cls, class_ids: Sequence, tau: float, logical: Mapping) -> "MultiSourceGraphSet":
        C = len(class_ids)
        norm = {}
        cleaned = {}
        for k in GRAPH_KEYS:
            A = logical.get(k)
            if A is None:
                cleaned[k] = norm[k] = None
                continue
            A = np.asarray(A, dtype=float)
            if A.shape != (C, C):
                raise InputDataError(f"{k} has shape {A.shape}, expected {(C, C)}")
            if not np.isin(A, (0.0, 1.0)).all():
                raise InputDataError(f"{k} is not a logical matrix")
            cleaned[k] = A
            norm[k] = laplacian_normalize(A)
        if cleaned["A2"] is None or cleaned["A3"] is None:
            raise InputDataError("hyperclass (A2) and probability (A3) graphs are required")
        return cls(class_ids=list(class_ids), tau=float(tau), logical=cleaned, normalized=norm)

    @classmethod
    def identity(cls, class_ids: Sequence, tau: float = 0.4, with_knowledge: bool = True) -> "MultiSourceGraphSet":
        eye = np.eye(len(class_ids))
        logical = {"A1": eye if with_knowledge else None, "A2": eye, "A3": eye}
        return cls.from_logical(class_ids, tau, logical)

    def to_dict(self) -> dict:
        doc = {"n": self.n, "tau": self.tau, "class_ids": list(self.class_ids)}
        for k in GRAPH_KEYS:
            A = self.logical[k]
            doc[k] = None if A is None else A.tolist()
            doc[k + "_hat"] = None if A is None else self.normalized[k].tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "MultiSourceGraphSet":
        try:
            n = int(doc["n"])
            class_ids = doc.get("class_ids") or list(range(n))
            graphs = cls.from_logical(class_ids, doc["tau"], {k: doc.get(k) for k in GRAPH_KEYS})
        except KeyError as exc:
            raise InputDataError(f"graph document missing key {exc}") from None
        if graphs.n != n:
            raise InputDataError(f"graph document declares n={n} but lists {graphs.n} classes")
        return graphs


def build_graph_set(
    taxonomy: ClassTaxonomy,
    counts: CooccurrenceCounts,
    ingredients: IngredientTable | None = None,
    tau: float = 0.4,
) -> MultiSourceGraphSet:
    """Build all available graphs over the taxonomy's classes (ascending id order)."""
    class_ids = taxonomy.class_ids
    if counts.T.shape[0] != len(class_ids):
        raise InputDataError(f"counts cover {counts.T.shape[0]} classes, taxonomy has {len(class_ids)}")
    logical = {
        "A1": None if ingredients is None else normalize_and_quantize(build_knowledge_adjacency(ingredients, class_ids), tau),
        "A2": normalize_and_quantize(build_hyperclass_adjacency(taxonomy, class_ids), tau),
        "A3": normalize_and_quantize(build_probability_adjacency(counts), tau),
    }
    return MultiSourceGraphSet.from_logical(class_ids, tau, logical)


def _node_id(value):
    if isinstance(value, str):
        try:
            return int(value)
        except ValueError:
            return value
    return value
