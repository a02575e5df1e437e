"""Acceptance criteria for the primary component, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary and printed
when run as a script: ``python tests/test_acceptance.py``).
"""

import contextlib
import math
import time

import numpy as np
import pytest
import torch

import conftest
from helpers import (
    brute_ap,
    brute_map,
    brute_recall,
    model_gradient_errors,
    random_detection_instance,
    tiny_benchmark,
    tiny_graphs,
)
from kefs import _kernels, _pykernels, evaluation, io
from kefs.bench import generate_synthetic_benchmark
from kefs.config import build_config
from kefs.errors import InputDataError
from kefs.evaluation import (
    average_precision,
    classification_accuracy,
    harmonic_mean,
    load_detections,
    load_ground_truth,
    mean_average_precision,
    recall_at_k,
    silhouette,
)
from kefs.graphs import (
    ClassTaxonomy,
    CooccurrenceCounts,
    IngredientTable,
    build_graph_set,
    build_hyperclass_adjacency,
    laplacian_normalize,
    normalize_and_quantize,
)
from kefs.msgf import adain
from kefs.pipeline import run_pipeline, synth_generator, write_benchmark
from kefs.rfdm import Denoiser, forward_marginal, forward_step, make_schedule, posterior_mean, reverse_step
from kefs.training import RegionFeatureSet, fit_unseen_classifier, synthesize_unseen, train_kefs

SEED = 0


@contextlib.contextmanager
def criterion(name, budget_s):
    """Record one PASS/FAIL line; the runtime budget is part of the criterion."""
    info = {}
    start = time.perf_counter()
    try:
        yield info
        elapsed = time.perf_counter() - start
        assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
    except BaseException as exc:
        line = f"FAIL  {name}: {exc}".splitlines()[0]
        conftest.ACCEPTANCE.append(line)
        print(line)
        raise
    detail = info.get("detail", "")
    line = f"PASS  {name} ({time.perf_counter() - start:.1f}s){': ' + detail if detail else ''}"
    conftest.ACCEPTANCE.append(line)
    print(line)


def test_harmonic_mean_oracle():
    with criterion("harmonic-mean oracle", 1.0) as info:
        got = [round(harmonic_mean(82.7, 2.7), 1), round(harmonic_mean(82.8, 3.6), 1), round(harmonic_mean(86.6, 47.6), 1)]
        assert got == [5.2, 6.9, 61.4], got
        info["detail"] = f"{got}"


def _use_kernels(monkeypatch, mod):
    for name in ("iou_matrix", "greedy_match", "average_precision_from_hits", "silhouette_samples"):
        monkeypatch.setattr(_kernels, name, getattr(mod, name))
    monkeypatch.setattr(evaluation, "_kernels", _kernels)


def test_metric_oracle_equivalence(monkeypatch):
    backends = [("python", _pykernels)] + [(b, __import__("kefs._ckernels", fromlist=["x"])) for b in conftest.KERNEL_BACKENDS if b == "cython"]
    with criterion("metric oracle equivalence (200 instances)", 10.0) as info:
        worst = 0.0
        for _, mod in backends:
            _use_kernels(monkeypatch, mod)
            rng = np.random.default_rng(SEED)
            for _ in range(200):
                d, g = random_detection_instance(rng, max_dets=30, max_gts=10)
                dets, gts = load_detections(d), load_ground_truth(g)
                thr = float(rng.choice([0.4, 0.5, 0.6]))
                k = int(rng.integers(1, 10))
                classes = sorted({x["class_id"] for x in g})
                for c in classes:
                    worst = max(worst, abs(average_precision(dets, gts, c, thr) - brute_ap(d, g, c, thr)))
                worst = max(worst, abs(mean_average_precision(dets, gts, classes, thr) - brute_map(d, g, classes, thr)))
                worst = max(worst, abs(recall_at_k(dets, gts, k, thr) - brute_recall(d, g, k, thr)))
        assert worst <= 1e-10, worst
        info["detail"] = f"backends {[b for b, _ in backends]}, max |diff| {worst:.1e}"


def test_gradient_suite():
    with criterion("gradient suite (float64 central differences)", 60.0) as info:
        # three classes, every width at most 8
        bench = tiny_benchmark(0, n_groups=1, classes_per_group=3, families=1, unseen=(1, 2), feature_dim=6, word_dim=5, attr_dim=4)
        graphs = tiny_graphs(bench)
        arch = dict(
            T=3, gamma_1=0.05, gamma_T=0.5, layers=2, gcn_latent=4, width=8, know_dim=6, content_dim=5, heads=2,
            denoiser_width=6, temb_dim=3, critic_width=8,
        )
        gen, crit = model_gradient_errors(bench, graphs, arch, batch=(0, 0, 0, 0))
        errs = {**gen, **{"critic." + k: v for k, v in crit.items()}}
        groups = ["gcn", "fusion", "value_encoder", "knowledge_encoder", "content", "decoder", "graph_head", "denoiser", "critic"]
        for g in groups:
            assert any(g in k for k in errs), f"no parameters checked for {g}"
        bad = {k: v for k, v in errs.items() if v >= 1e-4}
        assert not bad, bad
        info["detail"] = f"{len(errs)} tensors, max rel err {max(errs.values()):.1e}"


def test_diffusion_consistency():
    with criterion("diffusion consistency", 30.0) as info:
        a, T, n = 8, 10, 10_000
        sched = make_schedule(T, 0.02, 0.6)
        rng = np.random.default_rng(SEED)
        h0 = rng.normal(size=a)
        closed = forward_marginal(h0[None, :], T, sched, rng.normal(size=(n, a)))
        h = np.repeat(h0[None, :], n, axis=0)
        for t in range(1, T + 1):
            h = forward_step(h, sched.gamma[t - 1], rng.normal(size=(n, a)))
        # difference of two independent sample means / covariances, 3 standard errors each
        var = 1 - sched.beta_bar[-1]
        se_mean = math.sqrt(2 * var / n)
        mean_gap = np.abs(closed.mean(0) - h.mean(0))
        assert np.all(mean_gap <= 3 * se_mean), mean_gap.max() / se_mean
        C1, C2 = np.cov(closed.T), np.cov(h.T)
        diag = np.diag((C1 + C2) / 2)
        se_cov = np.sqrt(2 * (np.outer(diag, diag) + ((C1 + C2) / 2) ** 2) / n)
        cov_z = np.abs(C1 - C2) / se_cov
        assert np.all(cov_z <= 3), cov_z.max()

        # scalar oracles for the posterior mean and one reverse step
        torch.manual_seed(SEED)
        den = Denoiser(a, 4, T, width=8, temb_dim=4).double()
        cond = torch.randn(5, 4, dtype=torch.float64)
        h_t = torch.randn(5, a, dtype=torch.float64)
        worst = 0.0
        for t in range(1, T + 1):
            z_pred = den(h_t, t, cond)
            g, bb = sched.gamma[t - 1], sched.beta_bar[t - 1]
            pm = posterior_mean(h_t, t, z_pred, sched)
            for i in range(5):
                for j in range(a):
                    ref = (h_t[i, j].item() - g / math.sqrt(1 - bb) * z_pred[i, j].item()) / math.sqrt(1 - g)
                    worst = max(worst, abs(pm[i, j].item() - ref))
            step = reverse_step(h_t, t, cond, den, sched, torch.Generator().manual_seed(t))
            eps = torch.randn(h_t.shape, generator=torch.Generator().manual_seed(t), dtype=torch.float64)
            for i in range(5):
                for j in range(a):
                    ref = pm[i, j].item() + (math.sqrt(g) * eps[i, j].item() if t > 1 else 0.0)
                    worst = max(worst, abs(step[i, j].item() - ref))
        assert worst <= 1e-12, worst
        info["detail"] = f"mean gap {mean_gap.max() / se_mean:.2f} SE, cov gap {cov_z.max():.2f} SE, oracle diff {worst:.1e}"


def test_adain_identities():
    with criterion("AdaIN identities (100 instances)", 5.0) as info:
        g = torch.Generator().manual_seed(SEED)
        worst = 0.0
        for _ in range(100):
            n, d = int(torch.randint(1, 6, (1,), generator=g)), int(torch.randint(2, 17, (1,), generator=g))
            N = torch.randn(n, d, generator=g, dtype=torch.float64) * 2 + 0.5
            S = torch.randn(n, d, generator=g, dtype=torch.float64) * 3 - 1
            worst = max(worst, (adain(N, N) - N).abs().max().item())
            out = adain(N, S)
            worst = max(worst, (out.mean(1) - S.mean(1)).abs().max().item())
            worst = max(worst, (out.std(1, unbiased=False) - S.std(1, unbiased=False)).abs().max().item())
        assert worst <= 1e-6, worst
        info["detail"] = f"max deviation {worst:.1e}"


def random_tree(rng):
    levels = int(rng.integers(1, 5))
    nodes = [{"id": "r", "parent": None, "level": 0}]
    frontier = ["r"]
    for lvl in range(1, levels + 1):
        nxt = []
        for p in frontier:
            for _ in range(int(rng.integers(1, 4))):
                nid = f"n{len(nodes)}"
                nodes.append({"id": nid, "parent": p, "level": lvl})
                nxt.append(nid)
        frontier = nxt[:32] if lvl == levels else nxt
    keep = {n["id"] for n in nodes if n["level"] < levels} | set(frontier)
    nodes = [n for n in nodes if n["id"] in keep]
    # internal nodes whose children were all trimmed would become short leaves; drop them level by level
    for lvl in range(levels - 1, 0, -1):
        parents = {n["parent"] for n in nodes}
        nodes = [n for n in nodes if n["level"] != lvl or n["id"] in parents]
    return levels, nodes


def brute_lca_level(nodes, a, b):
    parent = {n["id"]: n["parent"] for n in nodes}
    level = {n["id"]: n["level"] for n in nodes}

    def ancestors(x):
        out = set()
        while x is not None:
            out.add(x)
            x = parent[x]
        return out

    return max(level[x] for x in ancestors(a) & ancestors(b))


def test_graph_construction_oracles():
    with criterion("graph-construction oracles", 10.0) as info:
        rng = np.random.default_rng(SEED)
        leaves_seen = []
        for _ in range(100):
            levels, nodes = random_tree(rng)
            tax = ClassTaxonomy.from_nodes(levels, nodes)
            assert 1 <= len(tax.class_ids) <= 32
            leaves_seen.append(len(tax.class_ids))
            A = build_hyperclass_adjacency(tax)
            for i, a in enumerate(tax.class_ids):
                for j, b in enumerate(tax.class_ids):
                    assert A[i, j] == brute_lca_level(nodes, a, b)
        worst_radius = 0.0
        for _ in range(100):
            C = int(rng.integers(1, 12))
            raw = rng.random((C, C)) * (rng.random((C, C)) < 0.6)
            taus = np.sort(rng.random(4))
            Qs = [normalize_and_quantize(raw, t) for t in taus]
            for lo, hi in zip(Qs, Qs[1:]):
                assert np.all(hi <= lo)
            for Q in Qs:
                worst_radius = max(worst_radius, np.max(np.abs(np.linalg.eigvals(laplacian_normalize(Q)))))
        assert worst_radius <= 1 + 1e-9, worst_radius
        info["detail"] = f"trees with {min(leaves_seen)}-{max(leaves_seen)} leaves, max spectral radius {worst_radius:.12f}"


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Benchmark files plus one timed desk-profile pipeline run."""
    root = tmp_path_factory.mktemp("acceptance")
    cfg = build_config({"profile": "desk", "seed": SEED})
    bench = generate_synthetic_benchmark(cfg.bench, SEED)
    paths = write_benchmark(bench, root / "bench")
    start = time.perf_counter()
    result = run_pipeline(build_config({"profile": "desk", "seed": SEED, "paths": paths, "out_dir": str(root / "run1")}))
    return {"root": root, "paths": paths, "bench": bench, "result": result, "seconds": time.perf_counter() - start}


def test_end_to_end_zero_shot(desk_run):
    with criterion("end-to-end zero-shot property", 300.0) as info:
        root, paths, bench = desk_run["root"], desk_run["paths"], desk_run["bench"]
        unseen = bench.semantics.unseen_ids
        assert len(bench.semantics.seen_ids) == 6 and len(unseen) == 2
        # poisoned loader: a single unseen record in the training file is rejected before training
        poisoned = io.read_jsonl(paths["features"]) + [r for r in io.read_jsonl(paths["test_features"]) if r["class_id"] in unseen][:1]
        io.write_jsonl(root / "poisoned.jsonl", poisoned)
        bad = build_config({"profile": "desk", "seed": SEED, "paths": {**paths, "features": str(root / "poisoned.jsonl")}, "out_dir": str(root / "poisoned")})
        with pytest.raises(InputDataError, match=r"\[train\].*unseen"):
            run_pipeline(bad)
        assert not (root / "poisoned").exists()

        trace = io.read_jsonl(root / "run1" / "train_log.jsonl")
        first, at50 = trace[0]["total"], trace[49]["total"]
        assert at50 < first, (first, at50)
        report = desk_run["result"].report
        chance = 1 / len(unseen)
        assert report.unseen_accuracy >= 0.75, report.unseen_accuracy
        assert desk_run["seconds"] < 300
        info["detail"] = (
            f"loss {first:.3f} -> {at50:.3f}, unseen accuracy {report.unseen_accuracy:.3f} "
            f"({report.unseen_accuracy / chance:.2f}x chance), pipeline {desk_run['seconds']:.0f}s"
        )


def test_silhouette_direction():
    with criterion("silhouette direction vs ablation (5 seeds)", 600.0) as info:
        wins, rows = 0, []
        for seed in range(5):
            cfg = build_config({"profile": "desk", "seed": seed})
            bench = generate_synthetic_benchmark(cfg.bench, seed)
            graphs = build_graph_set(
                ClassTaxonomy.from_dict(bench.taxonomy),
                CooccurrenceCounts.from_dict(bench.counts),
                IngredientTable.from_dict(bench.ingredients),
                cfg.tau,
            )
            scores = []
            for ablated in (False, True):
                tc = cfg.train
                if ablated:
                    tc = type(tc).from_dict({**tc.to_dict(), "lambda2": 0.0, "graph_conditioning": False})
                params = train_kefs(bench.train, bench.semantics, graphs, tc)
                synth = synthesize_unseen(params, bench.semantics, graphs, tc.count_per_class, synth_generator(seed), tc.graph_conditioning)
                scores.append(silhouette(synth))
            wins += scores[0] > scores[1]
            rows.append(f"{scores[0]:.3f}/{scores[1]:.3f}")
        assert wins >= 3, rows
        info["detail"] = f"KEFS higher on {wins}/5 seeds (kefs/ablated: {', '.join(rows)})"


def test_determinism(desk_run):
    with criterion("determinism (byte-identical rerun)", 300.0) as info:
        root, paths = desk_run["root"], desk_run["paths"]
        run_pipeline(build_config({"profile": "desk", "seed": SEED, "paths": paths, "out_dir": str(root / "run2")}))
        names = ["checkpoint.json", "report.json", "synthesized.jsonl", "train_log.jsonl", "graphs.json", "unseen_classifier.json", "gzsd_classifier.json"]
        for name in names:
            assert (root / "run1" / name).read_bytes() == (root / "run2" / name).read_bytes(), name
        info["detail"] = f"{len(names)} files identical"


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
