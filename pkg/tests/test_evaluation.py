import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import silhouette_samples as sk_silhouette_samples

from helpers import brute_ap, brute_map, brute_recall, random_detection_instance
from kefs import _pykernels
from kefs.errors import ConfigError, InputDataError
from kefs.evaluation import (
    EvalReport,
    MetricTriple,
    average_precision,
    classification_accuracy,
    evaluate_gzsd,
    harmonic_mean,
    iou,
    load_detections,
    load_ground_truth,
    mean_average_precision,
    recall_at_k,
    silhouette,
)
from kefs.training import RegionFeatureSet, UnseenClassifier


def gt(img, cls, box):
    return {"image_id": img, "class_id": cls, "box": box}


def det(img, cls, box, score):
    return {"image_id": img, "class_id": cls, "box": box, "score": score}


def test_iou_hand_values(kernels):
    assert iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7)
    assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert iou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0


def test_ap_hand_example(kernels):
    gts = load_ground_truth([gt(0, 0, [0, 0, 10, 10]), gt(0, 0, [20, 20, 30, 30])])
    dets = load_detections(
        [
            det(0, 0, [0, 0, 10, 10], 0.9),  # TP
            det(0, 0, [0, 0, 10, 10], 0.8),  # duplicate -> FP
            det(0, 0, [20, 20, 30, 30], 0.7),  # TP
        ]
    )
    # precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1 -> envelope 1, 2/3, 2/3
    assert average_precision(dets, gts, 0) == pytest.approx(0.5 * 1 + 0.5 * 2 / 3)
    assert average_precision(dets, gts, 1) is None


def test_greedy_takes_best_unmatched_gt(kernels):
    gts = load_ground_truth([gt(0, 0, [0, 0, 10, 10]), gt(0, 0, [2, 0, 12, 10])])
    dets = load_detections([det(0, 0, [2, 0, 12, 10], 0.9), det(0, 0, [1, 0, 11, 10], 0.8)])
    assert average_precision(dets, gts, 0) == 1.0


def test_tie_break_by_input_order(kernels):
    gts = load_ground_truth([gt(0, 0, [0, 0, 10, 10])])
    fp, tp = det(0, 0, [50, 50, 60, 60], 0.5), det(0, 0, [0, 0, 10, 10], 0.5)
    assert average_precision(load_detections([tp, fp]), gts, 0) == 1.0
    assert average_precision(load_detections([fp, tp]), gts, 0) == 0.5


def test_no_detections_gives_zero_ap_and_recall(kernels):
    gts = load_ground_truth([gt(0, 0, [0, 0, 1, 1])])
    assert average_precision([], gts, 0) == 0.0
    assert recall_at_k([], gts, 5) == 0.0


def test_recall_respects_per_image_k(kernels):
    gts = load_ground_truth([gt(0, 0, [0, 0, 10, 10]), gt(1, 0, [0, 0, 10, 10])])
    dets = load_detections(
        [det(0, 0, [50, 50, 60, 60], 0.9), det(0, 0, [0, 0, 10, 10], 0.1), det(1, 0, [0, 0, 10, 10], 0.2)]
    )
    assert recall_at_k(dets, gts, 1) == 0.5
    assert recall_at_k(dets, gts, 2) == 1.0
    with pytest.raises(ConfigError):
        recall_at_k(dets, gts, 0)
    with pytest.raises(InputDataError):
        recall_at_k(dets, [], 1)


def test_metrics_match_brute_force(kernels):
    rng = np.random.default_rng(7)
    for _ in range(60):
        d, g = random_detection_instance(rng)
        dets, gts = load_detections(d), load_ground_truth(g)
        thr = float(rng.choice([0.4, 0.5, 0.6]))
        k = int(rng.integers(1, 8))
        classes = sorted({x["class_id"] for x in g})
        for c in range(3):
            ref = brute_ap(d, g, c, thr)
            got = average_precision(dets, gts, c, thr)
            assert (got is None) == (ref is None)
            if ref is not None:
                assert got == pytest.approx(ref, abs=1e-10)
        assert mean_average_precision(dets, gts, classes, thr) == pytest.approx(brute_map(d, g, classes, thr), abs=1e-10)
        assert recall_at_k(dets, gts, k, thr) == pytest.approx(brute_recall(d, g, k, thr), abs=1e-10)


def test_backends_agree_on_kernels():
    from kefs import _ckernels

    rng = np.random.default_rng(3)
    for _ in range(30):
        a = rng.uniform(0, 10, (int(rng.integers(0, 6)), 2))
        a = np.hstack([a, a + rng.uniform(0.5, 5, a.shape)])
        b = rng.uniform(0, 10, (int(rng.integers(0, 6)), 2))
        b = np.hstack([b, b + rng.uniform(0.5, 5, b.shape)])
        M = _pykernels.iou_matrix(a, b)
        np.testing.assert_allclose(_ckernels.iou_matrix(a, b), M, atol=1e-15)
        np.testing.assert_array_equal(_ckernels.greedy_match(M, 0.3), _pykernels.greedy_match(M, 0.3))
        hits = rng.integers(0, 2, int(rng.integers(0, 10))).astype(float)
        n_gt = int(hits.sum()) + int(rng.integers(0, 3))
        assert _ckernels.average_precision_from_hits(hits, n_gt) == pytest.approx(
            _pykernels.average_precision_from_hits(hits, n_gt), abs=1e-15
        )
        X = rng.normal(size=(12, 3))
        labels = rng.integers(0, 3, 12)
        np.testing.assert_allclose(_ckernels.silhouette_samples(X, labels), _pykernels.silhouette_samples(X, labels), atol=1e-12)


def test_evaluation_bad_boxes():
    with pytest.raises(InputDataError):
        load_ground_truth([gt(0, 0, [0, 0, 0, 5])])
    with pytest.raises(InputDataError):
        load_detections([det(0, 0, [0, 0, 1, 1], float("nan"))])
    with pytest.raises(InputDataError):
        load_detections([{"image_id": 0, "box": [0, 0, 1, 1], "score": 1.0}])
    with pytest.raises(InputDataError):
        mean_average_precision([], load_ground_truth([gt(0, 0, [0, 0, 1, 1])]), [3])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_properties(seed):
    rng = np.random.default_rng(seed)
    d, g = random_detection_instance(rng, max_dets=15, max_gts=6)
    dets, gts = load_detections(d), load_ground_truth(g)
    classes = sorted({x["class_id"] for x in g})
    m = mean_average_precision(dets, gts, classes)
    r = recall_at_k(dets, gts, 100)
    assert 0.0 <= m <= 1.0 and 0.0 <= r <= 1.0
    # shuffling detections with distinct scores leaves AP unchanged
    distinct = [dict(x, score=x["score"] + 1e-6 * i) for i, x in enumerate(d)]
    perm = [distinct[i] for i in rng.permutation(len(distinct))]
    assert mean_average_precision(load_detections(perm), gts, classes) == pytest.approx(
        mean_average_precision(load_detections(distinct), gts, classes), abs=1e-12
    )
    # a duplicate of a detection never raises recall
    if d:
        dup = d + [dict(d[0], score=d[0]["score"] + 1.0)]
        assert recall_at_k(load_detections(dup), gts, 100) <= r + 1e-12


def test_harmonic_mean_values():
    assert harmonic_mean(0.0, 0.0) == 0.0
    assert harmonic_mean(0.4, 0.4) == pytest.approx(0.4)
    assert harmonic_mean(1.0, 0.0) == 0.0
    with pytest.raises(InputDataError):
        harmonic_mean(-1.0, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100))
def test_harmonic_mean_bounds(s, u):
    hm = harmonic_mean(s, u)
    assert hm <= (s + u) / 2 + 1e-9
    assert hm <= 2 * min(s, u) + 1e-9


def loop_silhouette(X, y):
    n = len(y)
    D = [[float(np.sqrt(((X[i] - X[j]) ** 2).sum())) for j in range(n)] for i in range(n)]
    out = []
    for i in range(n):
        own = [D[i][j] for j in range(n) if y[j] == y[i] and j != i]
        if not own:
            out.append(0.0)
            continue
        a = sum(own) / len(own)
        b = min(np.mean([D[i][j] for j in range(n) if y[j] == c]) for c in set(y) if c != y[i])
        out.append(0.0 if max(a, b) == 0 else (b - a) / max(a, b))
    return float(np.mean(out))


def test_silhouette_oracles(kernels):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(12, 3))
    y = np.array([0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 5])
    got = silhouette(RegionFeatureSet(y, X))
    assert got == pytest.approx(loop_silhouette(X, y.tolist()), abs=1e-10)
    y2 = y.copy()
    y2[-1] = 2
    assert silhouette(RegionFeatureSet(y2, X)) == pytest.approx(float(np.mean(sk_silhouette_samples(X, y2))), abs=1e-10)


def test_silhouette_edge_cases(kernels):
    far = np.vstack([np.zeros((5, 2)) + 1e-3 * np.arange(5)[:, None], 100 + np.zeros((5, 2))])
    assert silhouette(RegionFeatureSet([0] * 5 + [1] * 5, far)) > 0.9
    assert silhouette(RegionFeatureSet([0, 0, 1, 1], np.ones((4, 3)))) == 0.0
    with pytest.raises(InputDataError):
        silhouette(RegionFeatureSet([0, 0], np.ones((2, 2))))


def clf_for(class_ids, W):
    a = W.shape[0]
    return UnseenClassifier(list(class_ids), W, np.zeros(len(class_ids)), np.zeros(a), np.ones(a))


def test_classification_accuracy_loop_oracle():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(10, 3))
    y = rng.integers(0, 2, 10) + 4
    clf = clf_for([4, 5], rng.normal(size=(3, 2)))
    pred = [[4, 5][int(np.argmax(x @ clf.weight))] for x in X]
    assert classification_accuracy(clf, RegionFeatureSet(y, X)) == pytest.approx(np.mean([p == t for p, t in zip(pred, y)]))
    perfect = clf_for([0, 1], np.array([[1.0, -1.0]]))
    assert classification_accuracy(perfect, RegionFeatureSet([0, 1], [[1.0], [-1.0]])) == 1.0
    with pytest.raises(InputDataError):
        classification_accuracy(perfect, RegionFeatureSet([7], [[1.0]]))


def test_gzsd_triples_and_report(kernels):
    gts = load_ground_truth([gt(0, 0, [0, 0, 10, 10]), gt(0, 1, [20, 20, 30, 30])])
    dets = load_detections([det(0, 0, [0, 0, 10, 10], 0.9), det(0, 1, [0, 0, 10, 10], 0.8)])
    maps, recalls, aps = evaluate_gzsd(dets, gts, [0], [1], 0.5, 10)
    assert maps == MetricTriple(1.0, 0.0, 0.0)
    assert recalls.seen == 1.0 and recalls.unseen == 0.0
    assert aps == {0: 1.0, 1: 0.0}
    doc = EvalReport(0.5, 10, gzsd_map=maps, gzsd_recall=recalls, per_class_ap=aps).to_dict()
    assert doc["interpolation"] == "all-points"
    assert doc["gzsd"]["map"]["hm"] == 0.0 and "recall@10" in doc["zsd"]
    with pytest.raises(InputDataError):
        evaluate_gzsd(dets, gts, [0, 1], [1])
