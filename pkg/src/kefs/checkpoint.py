"""Save/load trained parameters and classifiers as named-array files."""

from __future__ import annotations

import numpy as np
import torch

from .errors import CheckpointError
from .io import load_arrays, save_arrays
from .rfdm import DiffusionSchedule
from .training import DTYPE, KefsModel, KefsParameters, UnseenClassifier

PARAMS_KIND = "kefs-parameters"
CLASSIFIER_KIND = "unseen-classifier"


def parameter_arrays(params: KefsParameters) -> dict:
    return {name: t.detach().cpu().numpy() for name, t in params.model.state_dict().items()}


def save_parameters(path, params: KefsParameters, binary: bool | None = None) -> None:
    meta = {
        "kind": PARAMS_KIND,
        "arch": params.arch,
        "class_ids": list(params.class_ids),
        "schedule": params.schedule.to_dict(),
    }
    save_arrays(path, parameter_arrays(params), meta, binary)


def load_parameters(path) -> KefsParameters:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != PARAMS_KIND:
        raise CheckpointError(f"{path} holds {meta.get('kind')!r}, not model parameters")
    try:
        model = KefsModel(meta["arch"]).to(DTYPE)
        schedule = DiffusionSchedule.from_dict(meta["schedule"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete checkpoint metadata ({exc})") from None
    expected = model.state_dict()
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{path}: parameter names differ (missing {missing[:5]}, unexpected {extra[:5]})")
    for name, ref in expected.items():
        if tuple(ref.shape) != arrays[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, model expects {tuple(ref.shape)}")
    model.load_state_dict({k: torch.as_tensor(v, dtype=DTYPE) for k, v in arrays.items()})
    return KefsParameters(model=model, schedule=schedule, class_ids=list(meta["class_ids"]))


def save_classifier(path, clf: UnseenClassifier, binary: bool | None = None) -> None:
    arrays = {"weight": clf.weight, "bias": clf.bias, "mean": clf.mean, "scale": clf.scale}
    save_arrays(path, arrays, {"kind": CLASSIFIER_KIND, "class_ids": [int(c) for c in clf.class_ids]}, binary)


def load_classifier(path) -> UnseenClassifier:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != CLASSIFIER_KIND:
        raise CheckpointError(f"{path} holds {meta.get('kind')!r}, not a classifier")
    try:
        clf = UnseenClassifier(
            class_ids=list(meta["class_ids"]),
            weight=arrays["weight"],
            bias=arrays["bias"],
            mean=arrays["mean"],
            scale=arrays["scale"],
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: classifier array {exc} missing") from None
    K = len(clf.class_ids)
    a = clf.weight.shape[0] if clf.weight.ndim == 2 else -1
    if clf.weight.shape != (a, K) or clf.bias.shape != (K,) or clf.mean.shape != (a,) or clf.scale.shape != (a,):
        raise CheckpointError(f"{path}: classifier arrays have inconsistent shapes")
    return clf
