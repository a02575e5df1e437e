"""Command-line entry point.

Every subcommand reads and validates all of its inputs before it writes
anything; files are written through temp-file + rename. Exit codes: 0 ok,
2 config, 3 input data, 4 training divergence, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io
from .checkpoint import load_classifier, load_parameters, save_classifier, save_parameters
from .config import PATH_KEYS, PROFILES, build_config
from .errors import ConfigError, InputDataError, KefsError, StorageError
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
from .pipeline import generate_and_write_benchmark, load_graph_inputs, run_pipeline, synth_generator
from .training import RegionFeatureSet, fit_unseen_classifier, synthesize_unseen, train_kefs

log = logging.getLogger("kefs")

_RESERVED = set(vars(logging.makeLogRecord({})))


class JsonFormatter(logging.Formatter):
    def format(self, record):
        doc = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        doc.update({k: v for k, v in vars(record).items() if k not in _RESERVED and k != "message"})
        if record.exc_info:
            doc["exc"] = self.formatException(record.exc_info)
        return json.dumps(doc, default=str)


def setup_logging(verbose: int) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger("kefs")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config document")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("-v", "--verbose", action="count", default=0)
    for key in PATH_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="PATH")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kefs", description="Knowledge-enhanced feature synthesis for zero-shot food detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-bench", help="write a synthetic benchmark and a config that points at it")
    _add_common(p)

    p = sub.add_parser("build-graphs", help="build the three class graphs from taxonomy, counts and ingredients")
    _add_common(p)
    p.add_argument("--tau", type=float)

    p = sub.add_parser("train", help="train the feature synthesizer on seen-class features")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--binary-checkpoint", action="store_true", default=None)

    p = sub.add_parser("synthesize", help="sample features for the unseen classes")
    _add_common(p)
    p.add_argument("--count-per-class", type=int)

    p = sub.add_parser("fit-classifier", help="fit the softmax classifier on labeled features")
    _add_common(p)

    p = sub.add_parser("eval-cls", help="classification accuracy and silhouette on labeled features")
    _add_common(p)

    p = sub.add_parser("eval-det", help="ZSD and GZSD mAP / Recall@k from detection records")
    _add_common(p)
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--k", type=int)

    p = sub.add_parser("pipeline", help="graphs -> train -> synthesize -> classify -> evaluate")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--binary-checkpoint", action="store_true", default=None)
    return parser


def config_from_args(args):
    doc = io.read_json(args.config) if args.config else {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{args.config}: config must be a JSON object")
    skip = {"command", "config", "verbose"}
    overrides = {k.replace("-", "_"): v for k, v in vars(args).items() if k not in skip}
    return build_config(doc, overrides)


def _semantics(cfg):
    return SemanticTable.from_dict(io.read_json(cfg.path("semantics")))


def _features(cfg, key="features"):
    return RegionFeatureSet.from_records(io.read_jsonl(cfg.path(key)))


def cmd_gen_bench(cfg):
    cfg.validate()
    paths = generate_and_write_benchmark(cfg)
    doc = {"profile": cfg.profile, "seed": cfg.seed, "out_dir": str(Path(cfg.out_dir) / "run"), "paths": paths}
    io.write_json(Path(cfg.out_dir) / "config.json", doc)
    return {"config": str(Path(cfg.out_dir) / "config.json"), **paths}


def cmd_build_graphs(cfg):
    cfg.validate(required=("taxonomy", "counts"))
    cfg.paths.pop("graphs", None)
    graphs = load_graph_inputs(cfg)
    out = Path(cfg.out_dir) / "graphs.json"
    io.write_json(out, graphs.to_dict())
    return {"graphs": str(out), "available": list(graphs.available())}


def _graphs_for(cfg, semantics):
    if not cfg.paths.get("graphs"):
        cfg.validate(required=("taxonomy", "counts"))
    graphs = load_graph_inputs(cfg)
    if list(graphs.class_ids) != list(semantics.class_ids):
        raise InputDataError("graph classes do not match the semantic table")
    return graphs


def cmd_train(cfg):
    cfg.validate(required=("semantics", "features"))
    semantics = _semantics(cfg)
    feats = _features(cfg)
    graphs = _graphs_for(cfg, semantics)
    params = train_kefs(feats, semantics, graphs, cfg.train, on_epoch=lambda r: log.info("epoch", extra=r))
    out = Path(cfg.out_dir)
    ckpt = out / ("checkpoint.bin" if cfg.binary_checkpoint else "checkpoint.json")
    save_parameters(ckpt, params, cfg.binary_checkpoint)
    io.write_jsonl(out / "train_log.jsonl", params.trace)
    return {"checkpoint": str(ckpt), "final_loss": params.trace[-1]["total"]}


def cmd_synthesize(cfg):
    cfg.validate(required=("semantics", "checkpoint"))
    semantics = _semantics(cfg)
    graphs = _graphs_for(cfg, semantics)
    params = load_parameters(cfg.path("checkpoint"))
    if list(params.class_ids) != list(semantics.class_ids):
        raise InputDataError("checkpoint classes do not match the semantic table")
    synth = synthesize_unseen(
        params, semantics, graphs, cfg.train.count_per_class, synth_generator(cfg.seed), cfg.train.graph_conditioning
    )
    out = Path(cfg.out_dir) / "synthesized.jsonl"
    io.write_jsonl(out, synth.to_records())
    return {"synthesized": str(out), "n": len(synth)}


def cmd_fit_classifier(cfg):
    cfg.validate(required=("features",))
    clf = fit_unseen_classifier(_features(cfg), cfg.train)
    out = Path(cfg.out_dir) / "classifier.json"
    save_classifier(out, clf)
    return {"classifier": str(out), "classes": clf.class_ids}


def cmd_eval_cls(cfg):
    cfg.validate(required=("classifier", "test_features"))
    clf = load_classifier(cfg.path("classifier"))
    test = _features(cfg, "test_features")
    test = test.subset([c for c in clf.class_ids if c in set(test.class_ids.tolist())])
    report = EvalReport(iou_threshold=cfg.iou_threshold, k=cfg.k)
    report.unseen_accuracy = classification_accuracy(clf, test)
    if cfg.paths.get("features"):
        report.silhouette = silhouette(_features(cfg))
    out = Path(cfg.out_dir) / "report_cls.json"
    io.write_json(out, report.to_dict())
    return {"report": str(out), "accuracy": report.unseen_accuracy, "silhouette": report.silhouette}


def cmd_eval_det(cfg):
    cfg.validate(required=("semantics", "detections", "ground_truth"))
    semantics = _semantics(cfg)
    dets = load_detections(io.read_jsonl(cfg.path("detections")))
    gts = load_ground_truth(io.read_jsonl(cfg.path("ground_truth")))
    maps, recalls, aps = evaluate_gzsd(dets, gts, semantics.seen_ids, semantics.unseen_ids, cfg.iou_threshold, cfg.k)
    report = EvalReport(iou_threshold=cfg.iou_threshold, k=cfg.k, gzsd_map=maps, gzsd_recall=recalls, per_class_ap=aps)
    unseen = set(semantics.unseen_ids)
    images = {g.image_id for g in gts if g.class_id in unseen}
    zd = [d for d in dets if d.class_id in unseen and d.image_id in images]
    zg = [g for g in gts if g.class_id in unseen]
    if zg:
        report.zsd_map = mean_average_precision(zd, zg, sorted(unseen), cfg.iou_threshold)
        report.zsd_recall = recall_at_k(zd, zg, cfg.k, cfg.iou_threshold)
    out = Path(cfg.out_dir) / "report_det.json"
    io.write_json(out, report.to_dict())
    return {"report": str(out), "gzsd_map_hm": maps.hm, "gzsd_recall_hm": recalls.hm}


def cmd_pipeline(cfg):
    result = run_pipeline(cfg)
    return {"report": str(result.out_dir / "report.json"), **result.report.to_dict()}


COMMANDS = {
    "gen-bench": cmd_gen_bench,
    "build-graphs": cmd_build_graphs,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "fit-classifier": cmd_fit_classifier,
    "eval-cls": cmd_eval_cls,
    "eval-det": cmd_eval_det,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        cfg = config_from_args(args)
        summary = COMMANDS[args.command](cfg)
    except KefsError as exc:
        log.error(str(exc), extra={"error": type(exc).__name__, "exit_code": exc.exit_code})
        return exc.exit_code
    except OSError as exc:
        log.error(str(exc), extra={"error": type(exc).__name__, "exit_code": StorageError.exit_code})
        return StorageError.exit_code
    log.info("done", extra={"command": args.command, "summary": summary})
    return 0


if __name__ == "__main__":
    sys.exit(main())
