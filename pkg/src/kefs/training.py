"""Joint training of the feature synthesizer, unseen-feature synthesis and the
unseen classifier.

The generator (MSGF + diffusion denoiser) minimizes
``L_W + lambda1 * L_R + lambda2 * L_G``; a conditional critic with gradient
penalty supplies the Wasserstein term.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, InputDataError, TrainingDivergence
from .gcn import LEAKY_SLOPE, SemanticTable
from .graphs import MultiSourceGraphSet
from .msgf import MSGF, GraphPairing, graph_denoising_loss
from .rfdm import Denoiser, DiffusionSchedule, make_schedule, reconstruction_loss, sample

log = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass
class RegionFeatureSet:
    class_ids: np.ndarray
    features: np.ndarray
    synthesized: bool = False

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2 or self.features.shape[0] != self.class_ids.shape[0]:
            raise InputDataError(
                f"{self.class_ids.shape[0]} labels for a feature array of shape {self.features.shape}"
            )
        if not np.isfinite(self.features).all():
            raise InputDataError("region features contain non-finite values")

    def __len__(self) -> int:
        return self.class_ids.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, class_ids: Sequence) -> "RegionFeatureSet":
        keep = np.isin(self.class_ids, list(class_ids))
        return RegionFeatureSet(self.class_ids[keep], self.features[keep], self.synthesized)

    @classmethod
    def from_records(cls, records: Sequence[Mapping]) -> "RegionFeatureSet":
        if not records:
            raise InputDataError("feature file has no records")
        try:
            ids = [r["class_id"] for r in records]
            feats = [r["feature"] for r in records]
            synth = any(r.get("split") == "synthesized" for r in records)
        except KeyError as exc:
            raise InputDataError(f"feature record missing key {exc}") from None
        if len({len(f) for f in feats}) != 1:
            raise InputDataError("feature vectors have inconsistent dimensions")
        return cls(ids, feats, synth)

    def to_records(self) -> list:
        split = "synthesized" if self.synthesized else "real"
        return [
            {"class_id": int(c), "feature": f.tolist(), "split": split}
            for c, f in zip(self.class_ids, self.features)
        ]


@dataclass
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    alpha: float = 0.7
    lr: float = 1e-5
    adam_betas: tuple = (0.5, 0.999)
    batch_size: int = 32
    epochs: int = 200
    n_critic: int = 5
    gp_weight: float = 10.0
    seed: int = 0
    count_per_class: int = 500
    # diffusion
    T: int = 100
    gamma_1: float = 8.5e-4
    gamma_T: float = 1.2e-2
    reverse_variance: str = "fixed"
    share_timestep_params: bool = False
    # dimensions
    gcn_latent: int = 32
    width: int = 64
    know_dim: int = 64
    content_dim: int = 64
    noise_dim: int | None = None
    heads: int = 4
    layers: int = 6
    denoiser_width: int = 64
    temb_dim: int = 16
    critic_width: int | None = None
    # ablation: replace every graph with the identity
    graph_conditioning: bool = True
    # unseen classifier
    clf_lr: float = 1.0
    clf_max_epochs: int = 2000
    clf_tol: float = 1e-6
    clf_l2: float = 1e-4

    def validate(self) -> "TrainConfig":
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha={self.alpha} outside [0, 1]")
        for name in ("batch_size", "epochs", "n_critic", "count_per_class", "T", "heads", "layers", "clf_max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.lr <= 0 or self.clf_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        make_schedule(self.T, self.gamma_1, self.gamma_T, self.reverse_variance)
        return self

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        doc = dict(doc)
        if "adam_betas" in doc:
            doc["adam_betas"] = tuple(doc["adam_betas"])
        return cls(**doc).validate()

    def to_dict(self) -> dict:
        out = asdict(self)
        out["adam_betas"] = list(self.adam_betas)
        return out


class Critic(nn.Module):
    """Scores a (feature, condition) pair with a scalar."""

    def __init__(self, feature_dim: int, cond_dim: int, width: int):
        super().__init__()
        self.fc1 = nn.Linear(feature_dim + cond_dim, width)
        self.fc2 = nn.Linear(width, width)
        self.fc3 = nn.Linear(width, 1)

    def forward(self, x, cond):
        h = F.leaky_relu(self.fc1(torch.cat([x, cond], dim=1)), LEAKY_SLOPE)
        h = F.leaky_relu(self.fc2(h), LEAKY_SLOPE)
        return self.fc3(h).squeeze(1)


class KefsModel(nn.Module):
    """Every trainable tensor: MSGF, diffusion denoiser, critic, plus feature standardization buffers."""

    def __init__(self, arch: Mapping):
        super().__init__()
        self.arch = dict(arch)
        a = arch["feature_dim"]
        self.msgf = MSGF(
            arch["n_classes"],
            arch["word_dim"],
            arch["attr_dim"],
            a,
            arch["graphs"],
            gcn_latent=arch["gcn_latent"],
            width=arch["width"],
            know_dim=arch["know_dim"],
            content_dim=arch["content_dim"],
            noise_dim=arch["noise_dim"],
            heads=arch["heads"],
            layers=arch["layers"],
            pairing=GraphPairing(*(tuple(p) for p in arch.get("pairing", astuple_pairing(GraphPairing())))),
        )
        self.denoiser = Denoiser(
            a,
            arch["content_dim"],
            arch["T"],
            width=arch["denoiser_width"],
            temb_dim=arch["temb_dim"],
            share_timestep_params=arch["share_timestep_params"],
        )
        self.critic = Critic(a, arch["content_dim"], arch["critic_width"])
        self.register_buffer("feature_mean", torch.zeros(a))
        self.register_buffer("feature_scale", torch.ones(a))

    def generator_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("critic.")]


def astuple_pairing(p: GraphPairing) -> list:
    return [list(p.query), list(p.key), list(p.value)]


@dataclass
class KefsParameters:
    model: KefsModel
    schedule: DiffusionSchedule
    class_ids: list
    trace: list = field(default_factory=list)

    @property
    def arch(self) -> dict:
        return self.model.arch


def build_arch(semantics: SemanticTable, graphs: MultiSourceGraphSet, feature_dim: int, config: TrainConfig) -> dict:
    return {
        "n_classes": len(semantics.class_ids),
        "word_dim": semantics.word.shape[1],
        "attr_dim": semantics.attr.shape[1],
        "feature_dim": feature_dim,
        "graphs": graphs.available(),
        "gcn_latent": config.gcn_latent,
        "width": config.width,
        "know_dim": config.know_dim,
        "content_dim": config.content_dim,
        "noise_dim": semantics.word.shape[1] if config.noise_dim is None else config.noise_dim,
        "heads": config.heads,
        "layers": config.layers,
        "T": config.T,
        "denoiser_width": config.denoiser_width,
        "temb_dim": config.temb_dim,
        "share_timestep_params": config.share_timestep_params,
        "critic_width": 4 * feature_dim if config.critic_width is None else config.critic_width,
        "pairing": astuple_pairing(GraphPairing()),
    }


def init_parameters(arch: Mapping, schedule: DiffusionSchedule, class_ids: Sequence, seed: int) -> KefsParameters:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = KefsModel(arch).to(DTYPE)
    return KefsParameters(model=model, schedule=schedule, class_ids=list(class_ids))


class GraphContext:
    """Tensors a forward pass needs: semantic matrices plus normalized and logical graphs."""

    def __init__(self, semantics: SemanticTable, graphs: MultiSourceGraphSet, graph_conditioning: bool = True):
        if list(semantics.class_ids) != list(graphs.class_ids):
            raise InputDataError("semantic table and graphs cover different classes (or a different order)")
        if not graph_conditioning:
            graphs = MultiSourceGraphSet.identity(graphs.class_ids, graphs.tau, "A1" in graphs.available())
        self.semantics = semantics
        self.graphs = graphs
        self.V_w = torch.as_tensor(semantics.word, dtype=DTYPE)
        self.V_a = torch.as_tensor(semantics.attr, dtype=DTYPE)
        self.A_hat = {k: torch.as_tensor(graphs.normalized[k], dtype=DTYPE) for k in graphs.available()}
        self.A_logical = [torch.as_tensor(graphs.logical[k], dtype=DTYPE) for k in graphs.available()]
        self.labels = torch.arange(len(semantics.class_ids))


def _conditions(model: KefsModel, ctx: GraphContext, S, idx, generator, Z=None):
    if Z is None:
        Z = torch.randn((len(idx), model.msgf.noise_dim), generator=generator, dtype=DTYPE)
    return model.msgf.condition(S[idx], ctx.V_w[idx], Z)


def condition_vector(class_id, params: KefsParameters, ctx: GraphContext, generator=None, Z=None) -> torch.Tensor:
    """Fused conditioning row for one class (content of fresh noise styled by its knowledge row)."""
    i = ctx.semantics.index(class_id)
    S = params.model.msgf.knowledge(ctx.V_w, ctx.V_a, ctx.A_hat)
    return _conditions(params.model, ctx, S, torch.tensor([i]), generator, Z)[0]


def critic_loss(real, fake, conditions, critic: Critic, gp_weight: float, generator=None, mix=None) -> torch.Tensor:
    """Critic objective (minimized): ``D(fake) - D(real)`` plus the interpolate gradient penalty."""
    if real.shape != fake.shape:
        raise InputDataError(f"real batch {tuple(real.shape)} and fake batch {tuple(fake.shape)} differ")
    if mix is None:
        mix = torch.rand((real.shape[0], 1), generator=generator, dtype=real.dtype)
    x_hat = (mix * real + (1.0 - mix) * fake).detach().requires_grad_(True)
    score = critic(x_hat, conditions)
    (grad,) = torch.autograd.grad(score.sum(), x_hat, create_graph=True)
    penalty = ((grad.norm(dim=1) - 1.0) ** 2).mean()
    return critic(fake, conditions).mean() - critic(real, conditions).mean() + gp_weight * penalty


def generator_loss(fake, conditions, critic: Critic) -> torch.Tensor:
    return -critic(fake, conditions).mean()


def total_loss(batch, params: KefsParameters, ctx: GraphContext, config: TrainConfig, generator=None, t=None, z=None, Z=None):
    """Generator objective for one batch ``(class_index, standardized_features)``.

    Returns ``(total, terms)``. ``L_W`` is the critic's Wasserstein estimate;
    its generator gradient equals that of :func:`generator_loss` because the
    critic sees the condition detached.
    """
    idx, real = batch
    model = params.model
    S = model.msgf.knowledge(ctx.V_w, ctx.V_a, ctx.A_hat)
    cond = _conditions(model, ctx, S, idx, generator, Z)
    fake = model.msgf.decode(cond, S[idx])
    frozen = cond.detach()
    L_W = model.critic(real, frozen).mean() + generator_loss(fake, frozen, model.critic)
    L_R = reconstruction_loss(real, cond, model.denoiser, params.schedule, generator, t=t, z=z)
    L_G = graph_denoising_loss(S, ctx.labels, ctx.A_logical, model.msgf.graph_head, config.alpha)
    terms = {"L_W": L_W, "L_R": L_R, "L_G": L_G}
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise TrainingDivergence(f"{name} became non-finite ({value.item()})")
    total = L_W + config.lambda1 * L_R + config.lambda2 * L_G
    return total, terms


def _critic_step(batch, params, ctx, config, generator):
    idx, real = batch
    model = params.model
    with torch.no_grad():
        S = model.msgf.knowledge(ctx.V_w, ctx.V_a, ctx.A_hat)
        cond = _conditions(model, ctx, S, idx, generator)
        fake = model.msgf.decode(cond, S[idx])
    loss = critic_loss(real, fake, cond, model.critic, config.gp_weight, generator)
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"critic loss became non-finite ({loss.item()})")
    return loss


def train_kefs(
    features: RegionFeatureSet,
    semantics: SemanticTable,
    graphs: MultiSourceGraphSet,
    config: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> KefsParameters:
    """Alternate ``n_critic`` critic updates with one generator update per batch.

    Only seen-class features are accepted.
    """
    config.validate()
    known = set(semantics.class_ids)
    unseen = set(semantics.unseen_ids)
    present = set(np.unique(features.class_ids).tolist())
    if present - known:
        raise InputDataError(f"features reference unknown classes {sorted(present - known)}")
    if present & unseen:
        raise InputDataError(f"training features include unseen classes {sorted(present & unseen)}")
    if len(features) == 0:
        raise InputDataError("no training features")

    ctx = GraphContext(semantics, graphs, config.graph_conditioning)
    schedule = make_schedule(config.T, config.gamma_1, config.gamma_T, config.reverse_variance)
    arch = build_arch(semantics, graphs, features.dim, config)
    params = init_parameters(arch, schedule, semantics.class_ids, config.seed)
    model = params.model

    mean = features.features.mean(axis=0)
    scale = features.features.std(axis=0)
    scale = np.where(scale > 1e-8, scale, 1.0)
    model.feature_mean.copy_(torch.as_tensor(mean))
    model.feature_scale.copy_(torch.as_tensor(scale))
    X = torch.as_tensor((features.features - mean) / scale, dtype=DTYPE)
    Y = torch.as_tensor([semantics.index(int(c)) for c in features.class_ids])

    gen = torch.Generator().manual_seed(config.seed)
    opt_g = torch.optim.Adam(model.generator_parameters(), lr=config.lr, betas=tuple(config.adam_betas))
    opt_d = torch.optim.Adam(model.critic.parameters(), lr=config.lr, betas=tuple(config.adam_betas))

    m = X.shape[0]
    for epoch in range(1, config.epochs + 1):
        sums = {"L_W": 0.0, "L_R": 0.0, "L_G": 0.0, "total": 0.0}
        order = torch.randperm(m, generator=gen)
        n_batches = 0
        for start in range(0, m, config.batch_size):
            rows = order[start : start + config.batch_size]
            batch = (Y[rows], X[rows])
            for _ in range(config.n_critic):
                opt_d.zero_grad()
                _critic_step(batch, params, ctx, config, gen).backward()
                opt_d.step()
            opt_g.zero_grad()
            total, terms = total_loss(batch, params, ctx, config, gen)
            total.backward()
            opt_g.step()
            model.critic.zero_grad()
            for k, v in terms.items():
                sums[k] += v.item()
            sums["total"] += total.item()
            n_batches += 1
        record = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        params.trace.append(record)
        log.debug("epoch %d total=%.6g L_W=%.6g L_R=%.6g L_G=%.6g", epoch, record["total"], record["L_W"], record["L_R"], record["L_G"])
        if on_epoch is not None:
            on_epoch(record)
    return params


@torch.no_grad()
def synthesize_unseen(
    params: KefsParameters,
    semantics: SemanticTable,
    graphs: MultiSourceGraphSet,
    count_per_class: int,
    generator: torch.Generator | None = None,
    graph_conditioning: bool = True,
    class_ids: Sequence | None = None,
) -> RegionFeatureSet:
    """Draw ``count_per_class`` diffusion samples for every unseen class."""
    if count_per_class < 1:
        raise ConfigError("count_per_class must be at least 1")
    targets = semantics.unseen_ids if class_ids is None else list(class_ids)
    if not targets:
        raise InputDataError("semantic table has no unseen classes to synthesize")
    ctx = GraphContext(semantics, graphs, graph_conditioning)
    model = params.model
    S = model.msgf.knowledge(ctx.V_w, ctx.V_a, ctx.A_hat)
    labels, out = [], []
    for cid in targets:
        idx = torch.full((count_per_class,), semantics.index(cid))
        cond = _conditions(model, ctx, S, idx, generator)
        h = sample(cond, model.denoiser, params.schedule, generator)
        out.append(h * model.feature_scale + model.feature_mean)
        labels.extend([cid] * count_per_class)
    return RegionFeatureSet(labels, torch.cat(out).numpy(), synthesized=True)


@dataclass
class UnseenClassifier:
    """Linear softmax classifier over standardized features."""

    class_ids: list
    weight: np.ndarray  # a x K
    bias: np.ndarray  # K
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.weight.shape[0]:
            raise InputDataError(f"classifier expects {self.weight.shape[0]}-dim features, got {X.shape}")
        return ((X - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.class_ids)[np.argmax(self.logits(X), axis=1)]

    def probabilities(self, X: np.ndarray) -> np.ndarray:
        return _softmax(self.logits(X))


def _softmax(L: np.ndarray) -> np.ndarray:
    L = L - L.max(axis=1, keepdims=True)
    E = np.exp(L)
    return E / E.sum(axis=1, keepdims=True)


def fit_unseen_classifier(synth: RegionFeatureSet, config: TrainConfig | None = None, class_ids: Sequence | None = None) -> UnseenClassifier:
    """Full-batch gradient descent on L2-regularized softmax cross-entropy.

    Starts from zero weights, so the fit is deterministic. Stops when the loss
    changes by less than ``clf_tol`` or after ``clf_max_epochs`` steps. The
    step size is ``clf_lr / (1 + mean squared norm)`` of the standardized inputs.
    """
    config = config or TrainConfig()
    classes = sorted(np.unique(synth.class_ids).tolist()) if class_ids is None else list(class_ids)
    if len(classes) < 2:
        raise InputDataError("classifier needs at least two classes")
    pos = {c: i for i, c in enumerate(classes)}
    try:
        y = np.array([pos[int(c)] for c in synth.class_ids])
    except KeyError as exc:
        raise InputDataError(f"feature label {exc} not among classifier classes") from None
    mean = synth.features.mean(axis=0)
    scale = synth.features.std(axis=0)
    scale = np.where(scale > 1e-8, scale, 1.0)
    X = (synth.features - mean) / scale
    n, a = X.shape
    K = len(classes)
    Y = np.eye(K)[y]
    W = np.zeros((a, K))
    b = np.zeros(K)
    step = config.clf_lr / (1.0 + float((X**2).sum(axis=1).mean()))
    prev = np.inf
    for _ in range(config.clf_max_epochs):
        P = _softmax(X @ W + b)
        loss = -np.log(np.clip((P * Y).sum(axis=1), 1e-300, None)).mean() + 0.5 * config.clf_l2 * (W**2).sum()
        if abs(prev - loss) < config.clf_tol:
            break
        prev = loss
        G = (P - Y) / n
        W = W - step * (X.T @ G + config.clf_l2 * W)
        b = b - step * G.sum(axis=0)
    return UnseenClassifier(class_ids=classes, weight=W, bias=b, mean=mean, scale=scale)
