"""Multimodal masked autoencoder: adapters, mask plans, encoder, decoders.

Each modality is patchified by its own input adapter into G*G tokens sharing
one fixed 2-D sine-cosine positional embedding; a portion of tokens is masked
per a Dirichlet-allocated plan; the shared transformer encodes the visible
set plus one learned global token; shallow per-modality decoders reconstruct
the masked patches.
"""

import dataclasses
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rng as rngmod

MODALITY_CHANNELS = {"rgb": 3, "depth": 1, "pickloc": 1, "stacked": 13}


class ShapeError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class TokenGridConfig:
    input_size: int = 64
    grid: int = 8
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    dec_depth: int = 2
    dec_dim: int = 64
    class_embed_dim: int = 16
    num_classes: int = 9
    semantic_downsample: int = 4

    def __post_init__(self):
        if self.input_size % self.grid:
            raise ShapeError(f"input_size {self.input_size} not divisible by grid {self.grid}")
        if (self.input_size // self.semantic_downsample) % self.grid:
            raise ShapeError(
                f"semantic plane {self.input_size // self.semantic_downsample} "
                f"not divisible by grid {self.grid}"
            )
        if self.embed_dim % self.heads:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def patch(self) -> int:
        return self.input_size // self.grid

    @property
    def sem_patch(self) -> int:
        return self.patch // self.semantic_downsample

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @staticmethod
    def from_config(cfg: dict) -> "TokenGridConfig":
        return TokenGridConfig(
            input_size=int(cfg["model.input_size"]),
            grid=int(cfg["model.grid"]),
            embed_dim=int(cfg["model.embed_dim"]),
            depth=int(cfg["model.depth"]),
            heads=int(cfg["model.heads"]),
            mlp_ratio=float(cfg["model.mlp_ratio"]),
            dec_depth=int(cfg["model.dec_depth"]),
            dec_dim=int(cfg["model.dec_dim"]),
            class_embed_dim=int(cfg["model.class_embed_dim"]),
            num_classes=int(cfg["model.num_classes"]),
            semantic_downsample=int(cfg["model.semantic_downsample"]),
        )


def sincos_posembed_2d(grid: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine-cosine positional embedding, (grid*grid, dim), float64.

    Pure function of (grid, dim); identical across runs and platforms.
    """
    if dim % 4:
        raise ShapeError(f"posembed dim must be divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter))
    pos = np.arange(grid, dtype=np.float64)
    angles = np.outer(pos, omega)                         # (grid, quarter)
    axis = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)  # (grid, dim/2)
    ys = np.repeat(axis, grid, axis=0)                    # row-major grid walk
    xs = np.tile(axis, (grid, 1))
    return np.concatenate([ys, xs], axis=1)


@dataclasses.dataclass(frozen=True)
class MaskPlan:
    visible: dict[str, tuple[int, ...]]
    masked: dict[str, tuple[int, ...]]
    budget: int

    def check(self, tokens: int) -> None:
        full = tuple(range(tokens))
        for m in self.visible:
            combined = tuple(sorted(self.visible[m] + self.masked[m]))
            if combined != full:
                raise ShapeError(f"mask plan for {m!r} does not partition {tokens} tokens")
        if sum(len(v) for v in self.visible.values()) != self.budget:
            raise ShapeError("mask plan visible counts do not sum to budget")


def _largest_remainder(shares: np.ndarray, total: int, cap: int) -> list[int]:
    base = np.floor(shares).astype(int)
    frac = shares - base
    base = np.minimum(base, cap)
    order = np.argsort(-frac, kind="stable")
    i = 0
    while base.sum() < total:
        j = order[i % len(order)]
        if base[j] < cap:
            base[j] += 1
        i += 1
        if i > 10 * len(order) * (cap + 1):
            raise ShapeError("cannot allocate visible budget under per-modality cap")
    return [int(b) for b in base]


def sample_mask_plan(
    rng_seed: int,
    modalities: list[str],
    tokens: int,
    budget: int,
    alpha: float = 1.0,
    equal_allocation: bool = False,
) -> MaskPlan:
    """Dirichlet(alpha) split of the visible budget across modalities."""
    m = len(modalities)
    if budget > m * tokens:
        raise ShapeError(f"budget {budget} exceeds {m}x{tokens} tokens")
    rng = rngmod.stream(rng_seed, "maskplan")
    if equal_allocation or math.isinf(alpha):
        shares = np.full(m, budget / m)
    else:
        shares = rng.dirichlet(np.full(m, alpha)) * budget
    counts = _largest_remainder(shares, budget, cap=tokens)
    visible: dict[str, tuple[int, ...]] = {}
    masked: dict[str, tuple[int, ...]] = {}
    for name, n_vis in zip(modalities, counts):
        vis = np.sort(rng.choice(tokens, size=n_vis, replace=False))
        vis_set = set(int(i) for i in vis)
        visible[name] = tuple(int(i) for i in vis)
        masked[name] = tuple(i for i in range(tokens) if i not in vis_set)
    return MaskPlan(visible=visible, masked=masked, budget=budget)


def patchify_tensor(img: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, G*G, C*patch*patch), patch vectors laid out (C, p, p)."""
    b, c, h, w = img.shape
    if h % patch or w % patch or h != w:
        raise ShapeError(f"image {h}x{w} not square-divisible by patch {patch}")
    g = h // patch
    x = img.reshape(b, c, g, patch, g, patch)
    x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * patch * patch)
    return x


def unpatchify_tensor(x: torch.Tensor, patch: int, channels: int) -> torch.Tensor:
    b, n, _ = x.shape
    g = int(round(math.sqrt(n)))
    x = x.reshape(b, g, g, channels, patch, patch)
    x = x.permute(0, 3, 1, 4, 2, 5).reshape(b, channels, g * patch, g * patch)
    return x


class PatchAdapter(nn.Module):
    """Linear projection of flattened patches plus a learned modality embedding."""

    def __init__(self, in_chans: int, patch: int, dim: int):
        super().__init__()
        self.in_chans = in_chans
        self.patch = patch
        self.proj = nn.Linear(in_chans * patch * patch, dim)
        self.modality_embed = nn.Parameter(torch.zeros(dim))

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.shape[1] != self.in_chans:
            raise ShapeError(f"expected {self.in_chans} channels, got {img.shape[1]}")
        return self.proj(patchify_tensor(img, self.patch)) + self.modality_embed


class SemanticAdapter(nn.Module):
    """Per-pixel learned class-embedding lookup, then patch projection."""

    def __init__(self, num_classes: int, class_embed_dim: int, patch: int, dim: int):
        super().__init__()
        self.patch = patch
        self.class_embed = nn.Embedding(num_classes, class_embed_dim)
        self.proj = nn.Linear(patch * patch * class_embed_dim, dim)
        self.modality_embed = nn.Parameter(torch.zeros(dim))

    def forward(self, sem: torch.Tensor) -> torch.Tensor:
        # sem: (B, Hs, Ws) integer classes
        e = self.class_embed(sem.long())                  # (B, Hs, Ws, ce)
        e = e.permute(0, 3, 1, 2)
        return self.proj(patchify_tensor(e, self.patch)) + self.modality_embed


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-normalization transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Decoder(nn.Module):
    def __init__(self, enc_dim: int, dec_dim: int, depth: int, heads: int,
                 mlp_ratio: float, out_dim: int, grid: int):
        super().__init__()
        self.proj = nn.Linear(enc_dim, dec_dim)
        self.mask_token = nn.Parameter(torch.zeros(dec_dim))
        self.blocks = nn.ModuleList(Block(dec_dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dec_dim)
        self.head = nn.Linear(dec_dim, out_dim)
        self.register_buffer(
            "posembed",
            torch.from_numpy(sincos_posembed_2d(grid, dec_dim)),
            persistent=False,
        )

    def forward(self, enc_visible: torch.Tensor, visible_idx, tokens: int) -> torch.Tensor:
        b = enc_visible.shape[0]
        dec_dim = self.mask_token.shape[0]
        seq = self.mask_token.expand(b, tokens, dec_dim).clone()
        if len(visible_idx):
            idx = torch.as_tensor(visible_idx, dtype=torch.long, device=enc_visible.device)
            seq = seq.index_copy(1, idx, self.proj(enc_visible))
        seq = seq + self.posembed.to(seq.dtype)
        for blk in self.blocks:
            seq = blk(seq)
        return self.head(self.norm(seq))


class MultiMae(nn.Module):
    """Shared encoder plus per-modality adapters and shallow decoders."""

    DECODED = ("rgb", "depth", "semantic", "stacked")

    def __init__(self, grid_cfg: TokenGridConfig,
                 modalities: tuple[str, ...] = ("rgb", "depth", "semantic"),
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.grid_cfg = grid_cfg
        self.modalities = tuple(modalities)
        g = grid_cfg
        self.adapter = nn.ModuleDict()
        self.decoder = nn.ModuleDict()
        dec_heads = max(1, g.heads // 2)
        for m in self.modalities:
            if m == "semantic":
                self.adapter[m] = SemanticAdapter(
                    g.num_classes, g.class_embed_dim, g.sem_patch, g.embed_dim)
                out_dim = g.num_classes * g.sem_patch * g.sem_patch
            else:
                chans = MODALITY_CHANNELS[m]
                self.adapter[m] = PatchAdapter(chans, g.patch, g.embed_dim)
                out_dim = chans * g.patch * g.patch
            if m in self.DECODED:
                self.decoder[m] = Decoder(
                    g.embed_dim, g.dec_dim, g.dec_depth, dec_heads,
                    g.mlp_ratio, out_dim, g.grid)
        self.blocks = nn.ModuleList(
            Block(g.embed_dim, g.heads, g.mlp_ratio) for _ in range(g.depth))
        self.global_token = nn.Parameter(torch.zeros(g.embed_dim))
        self.register_buffer(
            "posembed",
            torch.from_numpy(sincos_posembed_2d(g.grid, g.embed_dim)),
            persistent=False,
        )
        self._init_weights()
        self.to(dtype)

    def _init_weights(self):
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.xavier_uniform_(mod.weight)
                nn.init.zeros_(mod.bias)
            elif isinstance(mod, nn.Embedding):
                nn.init.normal_(mod.weight, std=0.02)
        nn.init.normal_(self.global_token, std=0.02)
        for dec in self.decoder.values():
            nn.init.normal_(dec.mask_token, std=0.02)

    @property
    def dtype(self) -> torch.dtype:
        return self.global_token.dtype

    def tokenize(self, images: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        """Adapter projection + positional embedding per modality."""
        out = {}
        for m, img in images.items():
            if m not in self.adapter:
                raise ShapeError(f"no adapter for modality {m!r}")
            out[m] = self.adapter[m](img) + self.posembed.to(self.dtype)
        return out

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, N, d) visible tokens -> (B, N+1, d); global token appended last."""
        if tokens.shape[1] == 0:
            raise ShapeError("encode requires at least one visible token")
        b = tokens.shape[0]
        g = self.global_token.expand(b, 1, -1)
        x = torch.cat([tokens, g], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return x

    def encode_full(self, images: dict[str, torch.Tensor],
                    order: tuple[str, ...] | None = None) -> torch.Tensor:
        """Unmasked encoding of every token of the given modalities."""
        toks = self.tokenize(images)
        names = order if order is not None else tuple(images)
        return self.encode(torch.cat([toks[m] for m in names], dim=1))

    def forward_pretrain(self, images: dict[str, torch.Tensor], plan: MaskPlan,
                         loss_weights: dict[str, float] | None = None):
        """Masked reconstruction losses; returns (losses dict, decoded dict)."""
        g = self.grid_cfg
        plan.check(g.tokens)
        names = [m for m in self.modalities if m in images]
        toks = self.tokenize({m: images[m] for m in names})
        vis_list, counts = [], []
        for m in names:
            idx = torch.as_tensor(plan.visible[m], dtype=torch.long,
                                  device=toks[m].device)
            vis_list.append(toks[m].index_select(1, idx))
            counts.append(len(plan.visible[m]))
        encoded = self.encode(torch.cat(vis_list, dim=1))
        # split back per modality (global token at the end is not decoded)
        offsets = np.cumsum([0] + counts)
        losses: dict[str, torch.Tensor] = {}
        decoded: dict[str, torch.Tensor] = {}
        weights = loss_weights or {}
        total = None
        for i, m in enumerate(names):
            enc_m = encoded[:, offsets[i]:offsets[i + 1]]
            pred = self.decoder[m](enc_m, plan.visible[m], g.tokens)
            decoded[m] = pred
            masked = torch.as_tensor(plan.masked[m], dtype=torch.long, device=pred.device)
            losses[m] = self._recon_loss(m, pred, images[m], masked)
            w = float(weights.get(m, 1.0))
            term = w * losses[m]
            total = term if total is None else total + term
        losses["total"] = total
        return losses, decoded

    def _recon_loss(self, modality: str, pred: torch.Tensor,
                    target_img: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        g = self.grid_cfg
        if masked.numel() == 0:
            return pred.sum() * 0.0
        if modality == "semantic":
            target = patchify_tensor(
                target_img.long().unsqueeze(1).to(torch.float64), g.sem_patch).long()
            tgt = target.index_select(1, masked)                     # (B, M, ps*ps)
            logits = pred.index_select(1, masked)
            b, nm, _ = logits.shape
            pp = g.sem_patch * g.sem_patch
            logits = logits.reshape(b, nm, g.num_classes, pp)
            logits = logits.permute(0, 1, 3, 2).reshape(-1, g.num_classes)
            return F.cross_entropy(logits, tgt.reshape(-1))
        patch = g.patch
        target = patchify_tensor(target_img.to(self.dtype), patch)
        if modality == "rgb":
            mean = target.mean(dim=-1, keepdim=True)
            var = target.var(dim=-1, unbiased=False, keepdim=True)
            target = (target - mean) / torch.sqrt(var + 1e-6)
        pred_m = pred.index_select(1, masked)
        tgt_m = target.index_select(1, masked)
        return F.mse_loss(pred_m, tgt_m)

    @torch.no_grad()
    def reconstruct_preview(self, images: dict[str, torch.Tensor],
                            plan: MaskPlan) -> dict[str, torch.Tensor]:
        """Full images: visible patches copied from input, masked from decoder."""
        g = self.grid_cfg
        _, decoded = self.forward_pretrain(images, plan)
        out: dict[str, torch.Tensor] = {}
        for m, pred in decoded.items():
            masked = list(plan.masked[m])
            if m == "semantic":
                b, n, _ = pred.shape
                pp = g.sem_patch * g.sem_patch
                cls = pred.reshape(b, n, g.num_classes, pp).argmax(dim=2)  # (B, N, pp)
                target = patchify_tensor(
                    images[m].long().unsqueeze(1).to(torch.float64), g.sem_patch).long()
                full = target.clone()
                if masked:
                    idx = torch.as_tensor(masked, dtype=torch.long)
                    full[:, idx] = cls[:, idx]
                img = unpatchify_tensor(full.to(torch.float64), g.sem_patch, 1)
                out[m] = img.squeeze(1).to(torch.uint8)
                continue
            chans = MODALITY_CHANNELS[m]
            target = patchify_tensor(images[m].to(self.dtype), g.patch)
            full = target.clone()
            if masked:
                idx = torch.as_tensor(masked, dtype=torch.long)
                patch_pred = pred[:, idx]
                if m == "rgb":
                    mean = target[:, idx].mean(dim=-1, keepdim=True)
                    var = target[:, idx].var(dim=-1, unbiased=False, keepdim=True)
                    patch_pred = patch_pred * torch.sqrt(var + 1e-6) + mean
                full[:, idx] = patch_pred
            out[m] = unpatchify_tensor(full, g.patch, chans)
        return out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(p.shape) for name, p in self.named_parameters()}
