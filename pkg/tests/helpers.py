"""Shared test utilities: central finite differences and tiny model configs."""

import numpy as np
import torch


def fd_relative_errors(loss_fn, params, h=1e-6, max_entries=12, seed=0, floor=1e-4, analytic_fn=None):
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    ``params`` maps names to leaf tensors. Tensors with more than
    ``max_entries`` elements are probed at a random subset of entries.
    Returns ``{name: relative error}`` over the probed entries. The error is
    ``|analytic - fd| / max(|analytic|, |fd|, floor)``: below a gradient norm of
    ``floor`` the check becomes absolute, since central differences cannot
    resolve a relative error there (parameters with exactly zero gradient).
    ``analytic_fn`` (default ``loss_fn``) supplies the backward pass, for
    objectives whose autograd graph stops gradients that ``loss_fn`` holds fixed.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    (analytic_fn or loss_fn)().backward()
    out = {}
    for name, p in params.items():
        g = p.grad.detach().clone().reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        n = p.numel()
        probe = np.arange(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
        flat = p.data.view(-1)
        fd = []
        for i in probe:
            orig = flat[i].item()
            # evaluated with autograd on: some objectives differentiate internally
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd.append((up - down) / (2 * h))
        fd = np.array(fd)
        an = g.numpy()[probe]
        diff = np.linalg.norm(an - fd)
        scale = max(np.linalg.norm(an), np.linalg.norm(fd))
        out[name] = diff / max(scale, floor)
    return out


def leaf(shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return (scale * torch.randn(shape, generator=g, dtype=torch.float64)).requires_grad_(True)


# Brute-force detection metrics, written independently of the package.


def box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def brute_hits(dets, gts, thr):
    """dets already in rank order; list of 0/1 per det."""
    used = [False] * len(gts)
    hits = []
    for d in dets:
        best, best_j = -1.0, None
        for j, g in enumerate(gts):
            if used[j] or g["image_id"] != d["image_id"] or g["class_id"] != d["class_id"]:
                continue
            o = box_iou(d["box"], g["box"])
            if o > best:
                best, best_j = o, j
        if best_j is not None and best >= thr:
            used[best_j] = True
            hits.append(1)
        else:
            hits.append(0)
    return hits


def brute_ap(dets, gts, cls, thr):
    d = sorted([x for x in dets if x["class_id"] == cls], key=lambda x: -x["score"])
    g = [x for x in gts if x["class_id"] == cls]
    if not g:
        return None
    hits = brute_hits(d, g, thr)
    prec, rec, tp = [], [], 0
    for i, h in enumerate(hits):
        tp += h
        prec.append(tp / (i + 1))
        rec.append(tp / len(g))
    ap, prev = 0.0, 0.0
    for i in range(len(hits)):
        ap += (rec[i] - prev) * max(prec[i:])
        prev = rec[i]
    return ap


def brute_map(dets, gts, classes, thr):
    aps = [a for a in (brute_ap(dets, gts, c, thr) for c in classes) if a is not None]
    return sum(aps) / len(aps)


def brute_recall(dets, gts, k, thr):
    ranked = sorted(dets, key=lambda x: -x["score"])
    seen = {}
    kept = []
    for d in ranked:
        seen[d["image_id"]] = seen.get(d["image_id"], 0) + 1
        if seen[d["image_id"]] <= k:
            kept.append(d)
    return sum(brute_hits(kept, gts, thr)) / len(gts)


def random_detection_instance(rng, max_dets=30, max_gts=10, n_images=3, n_classes=3):
    def box():
        x, y = rng.uniform(0, 50, 2)
        w, h = rng.uniform(5, 30, 2)
        return [float(x), float(y), float(x + w), float(y + h)]

    gts = [
        {"image_id": int(rng.integers(n_images)), "class_id": int(rng.integers(n_classes)), "box": box()}
        for _ in range(int(rng.integers(1, max_gts + 1)))
    ]
    dets = []
    for _ in range(int(rng.integers(0, max_dets + 1))):
        if gts and rng.random() < 0.6:
            g = gts[int(rng.integers(len(gts)))]
            b = [v + rng.normal(0, 4) for v in g["box"]]
            b = [b[0], b[1], max(b[2], b[0] + 1), max(b[3], b[1] + 1)]
            img, cls = g["image_id"], g["class_id"] if rng.random() < 0.8 else int(rng.integers(n_classes))
        else:
            b, img, cls = box(), int(rng.integers(n_images)), int(rng.integers(n_classes))
        # coarse scores force ties
        dets.append({"image_id": img, "class_id": cls, "box": b, "score": float(np.round(rng.random(), 1))})
    return dets, gts


def tiny_benchmark(seed=0, **overrides):
    from kefs.bench import SyntheticBenchmarkSpec, generate_synthetic_benchmark

    spec = dict(
        n_groups=2, classes_per_group=2, families=1, unseen=(1, 3), feature_dim=6, latent_dim=2,
        word_dim=5, attr_dim=4, train_per_class=10, test_per_class=6, n_scenes=12, ingredients_per_group=4,
    )
    spec.update(overrides)
    return generate_synthetic_benchmark(SyntheticBenchmarkSpec(**spec), seed)


def tiny_graphs(bench):
    from kefs.graphs import ClassTaxonomy, CooccurrenceCounts, IngredientTable, build_graph_set

    return build_graph_set(
        ClassTaxonomy.from_dict(bench.taxonomy),
        CooccurrenceCounts.from_dict(bench.counts),
        IngredientTable.from_dict(bench.ingredients),
        0.4,
    )


TINY_TRAIN = dict(
    T=3, gamma_1=0.05, gamma_T=0.5, layers=1, gcn_latent=4, width=8, know_dim=6, content_dim=5, heads=2,
    denoiser_width=6, temb_dim=3, critic_width=8, epochs=2, batch_size=8, n_critic=2, lr=1e-3, count_per_class=7,
)


def model_gradient_errors(bench, graphs, train_overrides, batch=(0, 0, 0, 0)):
    """FD relative errors for every trainable tensor of a full model.

    Generator tensors are checked against the total objective and critic
    tensors against the critic objective (gradient penalty included). The
    critic scores fakes against the condition with gradients stopped, so the
    reference objective holds that condition at its current value.
    """
    from kefs.msgf import graph_denoising_loss
    from kefs.rfdm import make_schedule, reconstruction_loss
    from kefs.training import GraphContext, TrainConfig, build_arch, critic_loss, init_parameters, total_loss

    cfg = TrainConfig(**train_overrides)
    sched = make_schedule(cfg.T, cfg.gamma_1, cfg.gamma_T)
    params = init_parameters(build_arch(bench.semantics, graphs, bench.train.dim, cfg), sched, bench.semantics.class_ids, 0)
    model = params.model
    ctx = GraphContext(bench.semantics, graphs)
    n = len(batch)
    X = torch.as_tensor(bench.train.features[:n])
    idx = torch.tensor(batch)
    t = torch.arange(n) % cfg.T + 1
    z = leaf((n, X.shape[1]), 5).detach()
    Z = leaf((n, model.msgf.noise_dim), 6).detach()

    def objective(frozen_cond=None):
        S = model.msgf.knowledge(ctx.V_w, ctx.V_a, ctx.A_hat)
        cond = model.msgf.condition(S[idx], ctx.V_w[idx], Z)
        fake = model.msgf.decode(cond, S[idx])
        c0 = cond if frozen_cond is None else frozen_cond
        L_W = model.critic(X, c0).mean() - model.critic(fake, c0).mean()
        L_R = reconstruction_loss(X, cond, model.denoiser, sched, t=t, z=z)
        L_G = graph_denoising_loss(S, ctx.labels, ctx.A_logical, model.msgf.graph_head, cfg.alpha)
        return L_W + cfg.lambda1 * L_R + cfg.lambda2 * L_G, cond

    with torch.no_grad():
        c0 = objective()[1]
    production = lambda: total_loss((idx, X), params, ctx, cfg, t=t, z=z, Z=Z)[0]
    if abs(production().item() - objective(c0)[0].item()) > 1e-12 * max(1.0, abs(production().item())):
        raise AssertionError("reference objective disagrees with total_loss")
    gen_params = {k: p for k, p in model.named_parameters() if not k.startswith("critic.")}
    gen = fd_relative_errors(lambda: objective(c0)[0], gen_params, analytic_fn=production)

    fake, cond = leaf((n, X.shape[1]), 7).detach(), leaf((n, cfg.content_dim), 8).detach()
    mix = torch.rand((n, 1), generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    crit = fd_relative_errors(
        lambda: critic_loss(X, fake, cond, model.critic, cfg.gp_weight, mix=mix), dict(model.critic.named_parameters())
    )
    return gen, crit
