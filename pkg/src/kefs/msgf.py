"""Multi-source graph fusion: graph embeddings -> knowledge representations,
word vectors + noise -> content vectors, and the AdaIN fusion decoder that
turns both into instance features.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass
from typing import Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, InputDataError, StateError, TrainingDivergence
from .gcn import LEAKY_SLOPE, GcnWeights

ADAIN_EPS = 1e-5
_TINY = 1e-24


def _lrelu(x):
    return F.leaky_relu(x, LEAKY_SLOPE)


def multi_head_attention(
    query: torch.Tensor,
    key: torch.Tensor,
    value: torch.Tensor,
    Wq: torch.Tensor,
    Wk: torch.Tensor,
    Wv: torch.Tensor,
    Wo: torch.Tensor,
    heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product attention split over ``heads`` column blocks.

    All projections are bias-free, so zero values give a zero output.
    """
    q, k, v = query @ Wq, key @ Wk, value @ Wv
    n_q, width = q.shape
    if k.shape[1] != width or v.shape[1] != width:
        raise InputDataError(f"attention widths disagree: q={width}, k={k.shape[1]}, v={v.shape[1]}")
    if width % heads:
        raise ConfigError(f"model width {width} not divisible by {heads} heads")
    dh = width // heads
    # (heads, n, dh)
    qh = q.reshape(n_q, heads, dh).transpose(0, 1)
    kh = k.reshape(k.shape[0], heads, dh).transpose(0, 1)
    vh = v.reshape(v.shape[0], heads, dh).transpose(0, 1)
    weights = torch.softmax(qh @ kh.transpose(1, 2) / math.sqrt(dh), dim=-1)
    out = (weights @ vh).transpose(0, 1).reshape(n_q, width) @ Wo
    return (out, weights) if return_weights else out


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ConfigError(f"model width {width} not divisible by {heads} heads")
        self.heads = heads
        for name in ("Wq", "Wk", "Wv", "Wo"):
            w = nn.Parameter(torch.empty(width, width))
            nn.init.xavier_uniform_(w)
            setattr(self, name, w)

    def forward(self, query, key, value, return_weights=False):
        return multi_head_attention(
            query, key, value, self.Wq, self.Wk, self.Wv, self.Wo, self.heads, return_weights
        )


class AttentionLayer(nn.Module):
    """Post-norm transformer layer: attention and feed-forward, each residual + LayerNorm."""

    def __init__(self, width: int, heads: int, ffn_mult: int = 2):
        super().__init__()
        self.attn = MultiHeadAttention(width, heads)
        self.norm1 = nn.LayerNorm(width)
        self.ff1 = nn.Linear(width, ffn_mult * width)
        self.ff2 = nn.Linear(ffn_mult * width, width)
        self.norm2 = nn.LayerNorm(width)

    def forward(self, x, key=None, value=None):
        key = x if key is None else key
        value = key if value is None else value
        x = self.norm1(x + self.attn(x, key, value))
        return self.norm2(x + self.ff2(torch.relu(self.ff1(x))))


class AttentionStack(nn.Module):
    """``layers`` attention layers; keys/values default to the running input (self-attention)."""

    def __init__(self, width: int, heads: int, layers: int):
        super().__init__()
        if layers < 0:
            raise ConfigError("layer count must be non-negative")
        self.width = width
        self.heads = heads
        self.layers = nn.ModuleList(AttentionLayer(width, heads) for _ in range(layers))

    def forward(self, x, key=None, value=None):
        for layer in self.layers:
            x = layer(x, key, value)
        return x


def fuse_graph_embeddings(E_word: torch.Tensor, E_attr: torch.Tensor, stack: AttentionStack) -> torch.Tensor:
    """Word embeddings attend over attribute embeddings (cross-attention)."""
    if E_word.shape[1] != E_attr.shape[1] or E_word.shape[1] != stack.width:
        raise InputDataError(
            f"fusion widths disagree: word={E_word.shape[1]}, attr={E_attr.shape[1]}, stack={stack.width}"
        )
    return stack(E_word, E_attr, E_attr)


class KnowledgeEncoder(nn.Module):
    """Learnable queries refined against (E_f keys, E_w2v values); the last attention
    output is mapped bias-free to the knowledge dimension."""

    def __init__(self, n_classes: int, width: int, out_dim: int, heads: int, layers: int):
        super().__init__()
        if layers < 1:
            raise ConfigError("knowledge encoder needs at least one layer")
        self.Q = nn.Parameter(torch.randn(n_classes, width))
        self.refine = AttentionStack(width, heads, layers - 1)
        self.final = MultiHeadAttention(width, heads)
        self.W_out = nn.Parameter(torch.empty(width, out_dim))
        nn.init.xavier_uniform_(self.W_out)

    def forward(self, E_f, E_w2v):
        return knowledge_encode(self.Q, E_f, E_w2v, self.refine, self.final, self.W_out)


def knowledge_encode(Q, E_f, E_w2v, refine: AttentionStack, final: MultiHeadAttention, W_out) -> torch.Tensor:
    if Q is None:
        raise StateError("knowledge queries are not initialized")
    if Q.shape[0] != E_f.shape[0] or E_f.shape != E_w2v.shape:
        raise InputDataError(
            f"knowledge encoder inputs disagree: Q{tuple(Q.shape)}, E_f{tuple(E_f.shape)}, E_w2v{tuple(E_w2v.shape)}"
        )
    x = refine(Q, E_f, E_w2v)
    return final(x, E_f, E_w2v) @ W_out


class ContentEncoder(nn.Module):
    def __init__(self, word_dim: int, noise_dim: int, content_dim: int):
        super().__init__()
        self.noise_dim = noise_dim
        self.fc1 = nn.Linear(word_dim + noise_dim, content_dim)
        self.fc2 = nn.Linear(content_dim, content_dim)

    def forward(self, V_w, Z):
        return content_encode(V_w, Z, self.fc1, self.fc2)


def content_encode(V_w: torch.Tensor, Z: torch.Tensor, fc1: nn.Linear, fc2: nn.Linear) -> torch.Tensor:
    if V_w.shape[0] != Z.shape[0]:
        raise InputDataError(f"{V_w.shape[0]} word rows but {Z.shape[0]} noise rows")
    return _lrelu(fc2(_lrelu(fc1(torch.cat([V_w, Z], dim=1)))))


def adain(N: torch.Tensor, style: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Row-wise AdaIN: re-center and re-scale each row of ``N`` to the row mean/std of ``style``.

    Standard deviations are population (ddof=0); the content std is floored at ``eps``.
    """
    mu_n = N.mean(dim=1, keepdim=True)
    sd_n = torch.sqrt(((N - mu_n) ** 2).mean(dim=1, keepdim=True) + _TINY).clamp_min(eps)
    mu_s = style.mean(dim=1, keepdim=True)
    sd_s = torch.sqrt(((style - mu_s) ** 2).mean(dim=1, keepdim=True) + _TINY)
    return sd_s * (N - mu_n) / sd_n + mu_s


class FusionDecoder(nn.Module):
    """adain(N, style1(S)) -> linear + LeakyReLU -> adain(., style2(S)) -> linear to features.

    The first AdaIN output doubles as the diffusion condition.
    """

    def __init__(self, know_dim: int, content_dim: int, feature_dim: int):
        super().__init__()
        self.style1 = nn.Linear(know_dim, content_dim)
        self.style2 = nn.Linear(know_dim, content_dim)
        self.mid = nn.Linear(content_dim, content_dim)
        self.out = nn.Linear(content_dim, feature_dim)

    def condition(self, N, S):
        return adain(N, self.style1(S))

    def finish(self, cond, S):
        return self.out(adain(_lrelu(self.mid(cond)), self.style2(S)))

    def forward(self, N, S):
        return self.finish(self.condition(N, S), S)


def fusion_decode(N: torch.Tensor, S: torch.Tensor, decoder: FusionDecoder) -> torch.Tensor:
    if N.shape[0] != S.shape[0]:
        raise InputDataError(f"{N.shape[0]} content rows but {S.shape[0]} knowledge rows")
    return decoder(N, S)


def graph_denoising_loss(
    S: torch.Tensor,
    labels: torch.Tensor,
    adjacency: Sequence[torch.Tensor],
    head: torch.Tensor,
    alpha: float,
) -> torch.Tensor:
    """Sigmoid cross-entropy of class logits ``S @ head`` against one-hot labels, minus
    ``alpha`` times the agreement between the scores and graph-propagated logits.

    ``adjacency`` holds the logical matrices; the result is averaged over graphs and rows.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha={alpha} outside [0, 1]")
    if not adjacency:
        raise InputDataError("graph denoising loss needs at least one graph")
    logits = S @ head
    if not torch.isfinite(logits).all():
        bad = (~torch.isfinite(logits)).nonzero()[0].tolist()
        raise TrainingDivergence(
            f"non-finite graph-head logits at {bad}; |S|max={S.detach().abs().max().item():.3g}, "
            f"|head|max={head.detach().abs().max().item():.3g}"
        )
    target = F.one_hot(labels.long(), logits.shape[1]).to(logits.dtype)
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none").sum(dim=1)
    scores = torch.sigmoid(logits)
    agree = torch.stack([(scores * F.logsigmoid(A @ logits)).sum(dim=1) for A in adjacency])
    return (ce.unsqueeze(0) - alpha * agree).mean()


@dataclass(frozen=True)
class GraphPairing:
    """Which graphs embed which semantic source. Missing graphs are skipped."""

    query: tuple = ("A2",)  # word vectors -> fusion queries
    key: tuple = ("A1", "A2")  # attribute vectors -> fusion keys/values
    value: tuple = ("A3",)  # word vectors -> self-attention value branch


class MSGF(nn.Module):
    """All parameters that map semantics (and noise) to knowledge S, content N and features H."""

    def __init__(
        self,
        n_classes: int,
        word_dim: int,
        attr_dim: int,
        feature_dim: int,
        available_graphs: Sequence[str],
        *,
        gcn_latent: int = 32,
        width: int = 64,
        know_dim: int = 64,
        content_dim: int = 64,
        noise_dim: int | None = None,
        heads: int = 4,
        layers: int = 6,
        pairing: GraphPairing = GraphPairing(),
    ):
        super().__init__()
        self.n_classes = n_classes
        self.feature_dim = feature_dim
        self.content_dim = content_dim
        self.pairing = GraphPairing(
            *(tuple(k for k in branch if k in available_graphs) for branch in (pairing.query, pairing.key, pairing.value))
        )
        for branch, names in zip(("query", "key", "value"), astuple(self.pairing)):
            if not names:
                raise InputDataError(f"no available graph for the {branch} branch")
        self.gcn = nn.ModuleDict()
        for k in self.pairing.query + self.pairing.value:
            if f"word_{k}" not in self.gcn:
                self.gcn[f"word_{k}"] = GcnWeights(word_dim, gcn_latent)
        for k in self.pairing.key:
            self.gcn[f"attr_{k}"] = GcnWeights(attr_dim, gcn_latent)
        self.proj_query = nn.Linear(word_dim * len(self.pairing.query), width)
        self.proj_key = nn.Linear(attr_dim * len(self.pairing.key), width)
        self.proj_value = nn.Linear(word_dim * len(self.pairing.value), width)
        self.fusion = AttentionStack(width, heads, layers)
        self.value_encoder = AttentionStack(width, heads, layers)
        self.knowledge_encoder = KnowledgeEncoder(n_classes, width, know_dim, heads, layers)
        self.content = ContentEncoder(word_dim, word_dim if noise_dim is None else noise_dim, content_dim)
        self.decoder = FusionDecoder(know_dim, content_dim, feature_dim)
        self.graph_head = nn.Parameter(torch.empty(know_dim, n_classes))
        nn.init.xavier_uniform_(self.graph_head)

    @property
    def noise_dim(self) -> int:
        return self.content.noise_dim

    def knowledge(self, V_w: torch.Tensor, V_a: torch.Tensor, A_hat: dict) -> torch.Tensor:
        """Knowledge representations S (one row per class)."""
        emb_q = torch.cat([self.gcn[f"word_{k}"](V_w, A_hat[k]) for k in self.pairing.query], dim=1)
        emb_k = torch.cat([self.gcn[f"attr_{k}"](V_a, A_hat[k]) for k in self.pairing.key], dim=1)
        emb_v = torch.cat([self.gcn[f"word_{k}"](V_w, A_hat[k]) for k in self.pairing.value], dim=1)
        E_f = fuse_graph_embeddings(self.proj_query(emb_q), self.proj_key(emb_k), self.fusion)
        E_w2v = self.value_encoder(self.proj_value(emb_v))
        return self.knowledge_encoder(E_f, E_w2v)

    def condition(self, S_rows, V_w_rows, Z):
        """Diffusion/critic condition: first AdaIN block over content from (word vector, noise)."""
        return self.decoder.condition(self.content(V_w_rows, Z), S_rows)

    def decode(self, cond, S_rows):
        return self.decoder.finish(cond, S_rows)
