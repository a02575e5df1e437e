"""Synthetic zero-shot benchmark: Gaussian class clusters whose semantic vectors
are noisy projections of the cluster means.

Classes sit in a three-level taxonomy (root -> family -> group -> class).
Group membership drives the other graph inputs: classes in a group share
ingredients and co-occur in the generated scenes. Scenes double as a small
detection test set. Each object gets one region proposal whose box overlaps
the ground truth and whose feature is drawn from the object's class cluster.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .gcn import SemanticTable
from .training import RegionFeatureSet


@dataclass
class SyntheticBenchmarkSpec:
    n_groups: int = 4
    classes_per_group: int = 2
    families: int = 2
    unseen: tuple = (1, 5)  # class ids held out
    feature_dim: int = 64
    latent_dim: int = 4
    word_dim: int = 16
    attr_dim: int = 12
    group_spread: float = 5.0
    class_spread: float = 1.5
    feature_std: float = 1.0
    semantic_noise: float = 0.3
    train_per_class: int = 100
    test_per_class: int = 60
    n_scenes: int = 120
    ingredients_per_group: int = 6
    image_size: float = 512.0

    @property
    def n_classes(self) -> int:
        return self.n_groups * self.classes_per_group

    def validate(self) -> "SyntheticBenchmarkSpec":
        if self.n_groups < 1 or self.classes_per_group < 1 or self.families < 1:
            raise ConfigError("benchmark needs at least one family, group and class per group")
        if self.n_groups % self.families:
            raise ConfigError(f"{self.n_groups} groups cannot be split evenly into {self.families} families")
        if len(set(self.unseen)) < 2:
            raise ConfigError("benchmark needs at least two unseen classes")
        if not set(self.unseen) <= set(range(self.n_classes)):
            raise ConfigError(f"unseen ids {self.unseen} outside 0..{self.n_classes - 1}")
        if len(set(self.unseen)) >= self.n_classes:
            raise ConfigError("benchmark needs at least one seen class")
        for name in ("feature_dim", "latent_dim", "word_dim", "attr_dim", "train_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("group_spread", "class_spread", "feature_std", "semantic_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        return self


@dataclass
class SyntheticBenchmark:
    spec: SyntheticBenchmarkSpec
    semantics: SemanticTable
    means: np.ndarray
    train: RegionFeatureSet
    test: RegionFeatureSet
    taxonomy: dict
    ingredients: dict
    counts: dict
    scenes: list = field(default_factory=list)
    ground_truth: list = field(default_factory=list)
    regions: list = field(default_factory=list)


def group_of(class_id: int, spec: SyntheticBenchmarkSpec) -> int:
    return class_id // spec.classes_per_group


def generate_synthetic_benchmark(spec: SyntheticBenchmarkSpec, seed: int) -> SyntheticBenchmark:
    spec.validate()
    rng = np.random.default_rng(seed)
    C, k = spec.n_classes, spec.latent_dim

    group_latent = rng.normal(0.0, spec.group_spread, (spec.n_groups, k))
    latent = np.repeat(group_latent, spec.classes_per_group, axis=0) + rng.normal(0.0, spec.class_spread, (C, k))
    to_visual, _ = np.linalg.qr(rng.normal(size=(spec.feature_dim, max(k, 1))))
    to_visual = to_visual[:, :k] if spec.feature_dim >= k else rng.normal(size=(spec.feature_dim, k)) / np.sqrt(k)
    means = latent @ to_visual.T
    to_word = rng.normal(size=(spec.feature_dim, spec.word_dim)) / np.sqrt(spec.feature_dim)
    to_attr = rng.normal(size=(spec.feature_dim, spec.attr_dim)) / np.sqrt(spec.feature_dim)
    word = means @ to_word + rng.normal(0.0, spec.semantic_noise, (C, spec.word_dim))
    attr = means @ to_attr + rng.normal(0.0, spec.semantic_noise, (C, spec.attr_dim))
    unseen = set(spec.unseen)
    semantics = SemanticTable(
        class_ids=list(range(C)),
        names=[f"class_{c}" for c in range(C)],
        seen=[c not in unseen for c in range(C)],
        word=word,
        attr=attr,
    )

    def draw(n_per_class, classes):
        ids = np.repeat(classes, n_per_class)
        feats = means[ids] + rng.normal(0.0, 1.0, (ids.size, spec.feature_dim)) * spec.feature_std
        return RegionFeatureSet(ids, feats)

    seen_ids = [c for c in range(C) if c not in unseen]
    train = draw(spec.train_per_class, seen_ids)
    test = draw(spec.test_per_class, list(range(C)))

    scenes, ground_truth, regions = _scenes(spec, rng, means)
    O = np.zeros((C, C), dtype=int)
    T = np.zeros(C, dtype=int)
    for scene in scenes:
        present = sorted(set(scene))
        for i in present:
            T[i] += 1
            for j in present:
                if i != j:
                    O[i, j] += 1

    return SyntheticBenchmark(
        spec=spec,
        semantics=semantics,
        means=means,
        train=train,
        test=test,
        taxonomy=_taxonomy(spec),
        ingredients=_ingredients(spec, rng),
        counts={"O": O.tolist(), "T": T.tolist()},
        scenes=scenes,
        ground_truth=ground_truth,
        regions=regions,
    )


def _taxonomy(spec: SyntheticBenchmarkSpec) -> dict:
    groups_per_family = spec.n_groups // spec.families
    nodes = [{"id": "root", "parent": None, "level": 0}]
    for f in range(spec.families):
        nodes.append({"id": f"family_{f}", "parent": "root", "level": 1})
    for g in range(spec.n_groups):
        nodes.append({"id": f"group_{g}", "parent": f"family_{g // groups_per_family}", "level": 2})
    for c in range(spec.n_classes):
        nodes.append({"id": c, "parent": f"group_{group_of(c, spec)}", "level": 3})
    return {"levels": 3, "nodes": nodes}


def _ingredients(spec: SyntheticBenchmarkSpec, rng: np.random.Generator) -> dict:
    groups = [f"ingredient_group_{g}" for g in range(spec.n_groups)]
    classes = {}
    for c in range(spec.n_classes):
        g = group_of(c, spec)
        pool = rng.choice(spec.ingredients_per_group, size=max(1, spec.ingredients_per_group // 2 + 1), replace=False)
        entries = [{"ingredient": f"ing_{g}_{i}", "group": groups[g]} for i in sorted(pool.tolist())]
        # one ingredient from a random other group keeps A1 from being block-diagonal
        other = int(rng.integers(spec.n_groups))
        if other != g:
            entries.append({"ingredient": f"ing_{other}_0", "group": groups[other]})
        classes[str(c)] = entries
    return {"groups": groups, "classes": classes}


def _scenes(spec: SyntheticBenchmarkSpec, rng: np.random.Generator, means: np.ndarray):
    """Scenes mostly draw their 1-3 objects from one group."""
    scenes, gts, regions = [], [], []
    S = spec.image_size
    for image_id in range(spec.n_scenes):
        g = int(rng.integers(spec.n_groups))
        members = [g * spec.classes_per_group + j for j in range(spec.classes_per_group)]
        objects = []
        for _ in range(int(rng.integers(1, 4))):
            if rng.random() < 0.85:
                objects.append(int(rng.choice(members)))
            else:
                objects.append(int(rng.integers(spec.n_classes)))
        scenes.append(objects)
        for cid in objects:
            w, h = rng.uniform(0.15, 0.4, 2) * S
            x1, y1 = rng.uniform(0, S - w), rng.uniform(0, S - h)
            box = [float(x1), float(y1), float(x1 + w), float(y1 + h)]
            gts.append({"image_id": image_id, "class_id": cid, "box": box})
            jitter = rng.normal(0.0, 0.05, 4) * np.array([w, h, w, h])
            rbox = np.array(box) + jitter
            rbox[2] = max(rbox[2], rbox[0] + 1.0)
            rbox[3] = max(rbox[3], rbox[1] + 1.0)
            feat = means[cid] + rng.normal(0.0, 1.0, spec.feature_dim) * spec.feature_std
            regions.append({"image_id": image_id, "box": rbox.tolist(), "class_id": cid, "feature": feat.tolist()})
    return scenes, gts, regions
