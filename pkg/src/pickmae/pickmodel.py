"""Pick success head: pick-feature embedding, token weighting, MLP, loss.

The encoder tokens (global token excluded) are collapsed to a single vector
either by mean pooling or by cross-attention with the projected pick features
as the query; the pooled vector and the pick embedding feed an MLP that
returns a raw success logit.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .multimae import Block, MultiMae, ShapeError  # noqa: F401  (Block re-exported for tests)


class TokenWeighting(nn.Module):
    """mean_pool or cross_attention collapse of N tokens to one d-vector."""

    def __init__(self, dim: int, mode: str = "cross_attention", heads: int = 1):
        super().__init__()
        if mode not in ("mean_pool", "cross_attention"):
            raise ValueError(f"unknown weighting mode {mode!r}")
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.mode = mode
        self.heads = heads
        self.dim = dim
        if mode == "cross_attention":
            self.w_q = nn.Linear(dim, dim)
            self.w_k = nn.Linear(dim, dim)
            self.w_v = nn.Linear(dim, dim)
            self.out_proj = nn.Linear(dim, dim) if heads > 1 else None

    def forward(self, tokens: torch.Tensor, pick_embedding: torch.Tensor):
        """tokens (B, N, d), pick_embedding (B, d) -> ((B, d), weights (B, h, N))."""
        b, n, d = tokens.shape
        if n < 1:
            raise ShapeError("token weighting requires at least one token")
        if self.mode == "mean_pool":
            weights = tokens.new_full((b, 1, n), 1.0 / n)
            return tokens.mean(dim=1), weights
        h = self.heads
        dk = d // h
        q = self.w_q(pick_embedding).reshape(b, h, 1, dk)
        k = self.w_k(tokens).reshape(b, n, h, dk).transpose(1, 2)
        v = self.w_v(tokens).reshape(b, n, h, dk).transpose(1, 2)
        logits = (q @ k.transpose(-2, -1)) / (dk ** 0.5)      # (B, h, 1, N)
        weights = torch.softmax(logits, dim=-1)
        pooled = (weights @ v).reshape(b, d)
        if self.out_proj is not None:
            pooled = self.out_proj(pooled)
        return pooled, weights.squeeze(2)


class PredictionHead(nn.Module):
    """MLP on [pooled tokens, pick embedding]; returns a raw logit."""

    def __init__(self, dim: int, hidden: int, depth: int = 2):
        super().__init__()
        layers: list[nn.Module] = []
        width = 2 * dim
        for _ in range(depth):
            layers += [nn.Linear(width, hidden), nn.GELU()]
            width = hidden
        layers.append(nn.Linear(width, 1))
        self.mlp = nn.Sequential(*layers)

    def forward(self, pooled: torch.Tensor, pick_embedding: torch.Tensor) -> torch.Tensor:
        return self.mlp(torch.cat([pooled, pick_embedding], dim=-1)).squeeze(-1)


class PickSuccessModel(nn.Module):
    """Visual encoder (from pretraining or fresh) + pick fusion + head."""

    def __init__(self, backbone: MultiMae, feature_dim: int,
                 modalities: tuple[str, ...], weighting: str = "cross_attention",
                 heads: int = 1, head_hidden: int = 128, head_depth: int = 2):
        super().__init__()
        missing = [m for m in modalities if m not in backbone.adapter]
        if missing:
            raise ShapeError(f"backbone lacks adapters for {missing}")
        self.backbone = backbone
        self.modalities = tuple(modalities)
        dim = backbone.grid_cfg.embed_dim
        self.pick_embed = nn.Linear(feature_dim, dim)
        self.weighting = TokenWeighting(dim, weighting, heads)
        self.head = PredictionHead(dim, head_hidden, head_depth)
        self.to(backbone.dtype)

    def forward(self, images: dict[str, torch.Tensor], pick_features: torch.Tensor,
                return_weights: bool = False):
        encoded = self.backbone.encode_full(
            {m: images[m] for m in self.modalities}, order=self.modalities)
        tokens = encoded[:, :-1]                   # global token omitted
        emb = self.pick_embed(pick_features)
        pooled, weights = self.weighting(tokens, emb)
        logit = self.head(pooled, emb)
        if return_weights:
            return logit, weights
        return logit

    def encoder_parameters(self):
        """Backbone parameters (adapters + encoder blocks + decoders)."""
        return self.backbone.parameters()

    def head_parameters(self):
        for mod in (self.pick_embed, self.weighting, self.head):
            yield from mod.parameters()


def embed_pick_features(features: torch.Tensor, layer: nn.Linear) -> torch.Tensor:
    """Single affine projection of the pick feature vector."""
    return layer(features)


def weighted_bce(logits: torch.Tensor, labels: torch.Tensor,
                 pos_weight: float = 1.0, neg_weight: float = 1.0) -> torch.Tensor:
    """Mean over the batch of class-weighted binary cross entropy on raw logits."""
    if logits.numel() == 0:
        raise ValueError("weighted_bce: empty batch")
    if logits.shape != labels.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    if pos_weight <= 0 or neg_weight <= 0:
        raise ValueError("class weights must be > 0")
    y = labels.to(logits.dtype)
    # log sigma(z) = -softplus(-z); log(1 - sigma(z)) = -softplus(z)
    loss = pos_weight * y * F.softplus(-logits) + neg_weight * (1.0 - y) * F.softplus(logits)
    return loss.mean()


def class_weights_from_ratio(ratio: float) -> tuple[float, float]:
    """Inverse-frequency weights for a success:fail ratio, normalized so that
    the example-weighted average weight over the split equals 1."""
    n_pos, n_neg = ratio, 1.0
    total = n_pos + n_neg
    pos_w = total / (2.0 * n_pos)
    neg_w = total / (2.0 * n_neg)
    return pos_w, neg_w
