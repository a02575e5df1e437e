"""End-to-end run: graphs -> training -> synthesis -> classifiers -> evaluation."""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import io
from .bench import SyntheticBenchmark, generate_synthetic_benchmark
from .checkpoint import save_classifier, save_parameters
from .config import PipelineConfig
from .errors import InputDataError, KefsError
from .evaluation import (
    EvalReport,
    classification_accuracy,
    evaluate_gzsd,
    load_detections,
    load_ground_truth,
    mean_average_precision,
    recall_at_k,
    silhouette,
)
from .gcn import SemanticTable
from .graphs import ClassTaxonomy, CooccurrenceCounts, IngredientTable, MultiSourceGraphSet, build_graph_set
from .training import RegionFeatureSet, fit_unseen_classifier, synthesize_unseen, train_kefs

log = logging.getLogger(__name__)

SYNTH_STREAM = 1


@contextlib.contextmanager
def stage(name: str):
    """Prefix any pipeline error with the stage that raised it."""
    log.info("stage start", extra={"stage": name})
    try:
        yield
    except KefsError as exc:
        exc.args = (f"[{name}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
        raise
    log.info("stage done", extra={"stage": name})


def synth_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(np.random.SeedSequence([seed, SYNTH_STREAM]).generate_state(1)[0]))


def load_graph_inputs(config: PipelineConfig) -> MultiSourceGraphSet:
    if config.paths.get("graphs"):
        return MultiSourceGraphSet.from_dict(io.read_json(config.path("graphs")))
    taxonomy = ClassTaxonomy.from_dict(io.read_json(config.path("taxonomy")))
    counts = CooccurrenceCounts.from_dict(io.read_json(config.path("counts")))
    ingredients = None
    if config.paths.get("ingredients"):
        ingredients = IngredientTable.from_dict(io.read_json(config.path("ingredients")))
    return build_graph_set(taxonomy, counts, ingredients, config.tau)


def write_benchmark(bench: SyntheticBenchmark, out_dir) -> dict:
    """Write every benchmark file; returns the path map usable as ``paths`` config."""
    out = Path(out_dir)
    paths = {
        "semantics": out / "semantics.json",
        "features": out / "train_features.jsonl",
        "test_features": out / "test_features.jsonl",
        "taxonomy": out / "taxonomy.json",
        "ingredients": out / "ingredients.json",
        "counts": out / "counts.json",
        "ground_truth": out / "ground_truth.jsonl",
        "regions": out / "regions.jsonl",
    }
    io.write_json(paths["semantics"], bench.semantics.to_dict())
    io.write_jsonl(paths["features"], bench.train.to_records())
    io.write_jsonl(paths["test_features"], bench.test.to_records())
    io.write_json(paths["taxonomy"], bench.taxonomy)
    io.write_json(paths["ingredients"], bench.ingredients)
    io.write_json(paths["counts"], bench.counts)
    io.write_jsonl(paths["ground_truth"], bench.ground_truth)
    io.write_jsonl(paths["regions"], bench.regions)
    return {k: str(v) for k, v in paths.items()}


def detections_from_regions(regions, classifier, allowed_images=None) -> list:
    """One detection per (region, classifier class), scored by class probability."""
    if not regions:
        return []
    picked = [r for r in regions if allowed_images is None or r["image_id"] in allowed_images]
    if not picked:
        return []
    probs = classifier.probabilities(np.array([r["feature"] for r in picked]))
    dets = []
    for r, row in zip(picked, probs):
        for cid, p in zip(classifier.class_ids, row):
            dets.append({"image_id": r["image_id"], "class_id": int(cid), "box": r["box"], "score": float(p)})
    return dets


@dataclass
class PipelineResult:
    report: EvalReport
    out_dir: Path


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Run every stage; writes graphs, checkpoint, training log, synthesized features,
    classifiers and ``report.json`` under ``config.out_dir``."""
    out = Path(config.out_dir)
    tc = config.train

    with stage("load"):
        config.validate(required=("semantics", "features"))
        semantics = SemanticTable.from_dict(io.read_json(config.path("semantics")))
        train_set = RegionFeatureSet.from_records(io.read_jsonl(config.path("features")))
        test_set = None
        if config.paths.get("test_features"):
            test_set = RegionFeatureSet.from_records(io.read_jsonl(config.path("test_features")))
        gts = regions = None
        if config.paths.get("ground_truth") and config.paths.get("regions"):
            gts = load_ground_truth(io.read_jsonl(config.path("ground_truth")))
            regions = io.read_jsonl(config.path("regions"))
        graphs = load_graph_inputs(config)
        if list(graphs.class_ids) != list(semantics.class_ids):
            raise InputDataError("graph classes do not match the semantic table")

    with stage("train"):
        params = train_kefs(train_set, semantics, graphs, tc)

    with stage("synthesize"):
        synth = synthesize_unseen(
            params, semantics, graphs, tc.count_per_class, synth_generator(config.seed), tc.graph_conditioning
        )

    with stage("classify"):
        unseen_clf = fit_unseen_classifier(synth, tc, semantics.unseen_ids)
        gzsd_train = RegionFeatureSet(
            np.concatenate([train_set.class_ids, synth.class_ids]),
            np.concatenate([train_set.features, synth.features]),
        )
        gzsd_clf = fit_unseen_classifier(gzsd_train, tc, semantics.class_ids)

    with stage("evaluate"):
        report = EvalReport(iou_threshold=config.iou_threshold, k=config.k)
        report.silhouette = silhouette(synth)
        if test_set is not None:
            report.unseen_accuracy = classification_accuracy(unseen_clf, test_set.subset(semantics.unseen_ids))
        if gts is not None:
            unseen = set(semantics.unseen_ids)
            zsd_images = {g.image_id for g in gts if g.class_id in unseen}
            zsd_dets = load_detections(detections_from_regions(regions, unseen_clf, zsd_images))
            zsd_gts = [g for g in gts if g.class_id in unseen]
            report.zsd_map = mean_average_precision(zsd_dets, zsd_gts, sorted(unseen), config.iou_threshold)
            report.zsd_recall = recall_at_k(zsd_dets, zsd_gts, config.k, config.iou_threshold)
            dets = load_detections(detections_from_regions(regions, gzsd_clf))
            report.gzsd_map, report.gzsd_recall, report.per_class_ap = evaluate_gzsd(
                dets, gts, semantics.seen_ids, semantics.unseen_ids, config.iou_threshold, config.k
            )

    with stage("write"):
        ext = ".bin" if config.binary_checkpoint else ".json"
        io.write_json(out / "graphs.json", graphs.to_dict())
        save_parameters(out / f"checkpoint{ext}", params, config.binary_checkpoint)
        io.write_jsonl(out / "train_log.jsonl", params.trace)
        io.write_jsonl(out / "synthesized.jsonl", synth.to_records())
        save_classifier(out / "unseen_classifier.json", unseen_clf)
        save_classifier(out / "gzsd_classifier.json", gzsd_clf)
        io.write_json(out / "report.json", report.to_dict())
    return PipelineResult(report=report, out_dir=out)


def generate_and_write_benchmark(config: PipelineConfig) -> dict:
    bench = generate_synthetic_benchmark(config.bench, config.seed)
    return write_benchmark(bench, config.out_dir)
