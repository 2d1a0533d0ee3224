"""Video transformer encoder, narrow predictor and the EMA target encoder."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .config import EncoderConfig
from .errors import InvalidArgumentError


@dataclass
class TokenSequence:
    """Tokens of shape ``(B, n, d)`` on a ``(T, H, W)`` token grid.

    ``indices`` gives the grid position of each token (ascending); ``None`` means
    the full sequence in raster order.
    """

    tokens: torch.Tensor
    grid: tuple
    indices: Optional[torch.Tensor] = None

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def positions(self) -> torch.Tensor:
        if self.indices is None:
            return torch.arange(self.num_tokens)
        return self.indices


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed_3d(dim: int, grid: Sequence[int]) -> np.ndarray:
    """Fixed separable sine-cosine embedding, shape ``(T*H*W, dim)``.

    A quarter of the channels encode time and the rest split evenly between
    height and width; the concatenation is truncated to ``dim`` when the even
    split overshoots.
    """
    gt, gh, gw = grid
    d_t = 2 * max(1, round(dim / 8))
    d_s = 2 * max(1, math.ceil((dim - d_t) / 4))
    t, h, w = np.meshgrid(np.arange(gt), np.arange(gh), np.arange(gw), indexing="ij")
    emb = np.concatenate([
        _sincos_1d(d_t, t.ravel()),
        _sincos_1d(d_s, h.ravel()),
        _sincos_1d(d_s, w.ravel()),
    ], axis=1)
    return emb[:, :dim]


def _check_indices(idx, n: int, what: str) -> torch.Tensor:
    idx = torch.as_tensor(idx, dtype=torch.long).flatten()
    idx = torch.unique(idx, sorted=True)
    if idx.numel() and (idx[0] < 0 or idx[-1] >= n):
        raise InvalidArgumentError(f"{what} indices out of range [0, {n})")
    return idx


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (C // self.heads) ** -0.5
        x = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv3d)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class VideoEncoder(nn.Module):
    """Tubelet tokenizer plus a stack of transformer blocks.

    Runs on any subset of token positions (``keep``); the output follows
    ascending grid index no matter the order ``keep`` was given in.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.patch_embed = nn.Conv3d(cfg.in_chans, cfg.dim, kernel_size=tuple(cfg.tubelet),
                                     stride=tuple(cfg.tubelet))
        self.register_buffer("pos_embed",
                             torch.from_numpy(sincos_pos_embed_3d(cfg.dim, cfg.grid)).float(),
                             persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio)
                                    for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim)
        init_weights(self)

    def patchify(self, x: torch.Tensor) -> TokenSequence:
        """``(B, frames, S, S, 3)`` video (or one unbatched clip) to positioned tokens."""
        cfg = self.cfg
        expected = (cfg.frames, cfg.image_size, cfg.image_size, cfg.in_chans)
        if x.dim() == 4:
            x = x.unsqueeze(0)
        if x.dim() != 5 or tuple(x.shape[1:]) != expected:
            raise InvalidArgumentError(f"expected video of shape (B, *{expected}), got {tuple(x.shape)}")
        x = x.to(self.patch_embed.weight.dtype).permute(0, 4, 1, 2, 3)
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        tokens = tokens + self.pos_embed.to(tokens.dtype)
        return TokenSequence(tokens, cfg.grid)

    def encode(self, tokens: TokenSequence, keep=None) -> TokenSequence:
        n = tokens.num_tokens
        if keep is None:
            keep = torch.arange(n)
        keep = _check_indices(keep, n, "keep")
        if keep.numel() == 0:
            raise InvalidArgumentError("encode needs at least one kept token")
        x = tokens.tokens[:, keep]
        for blk in self.blocks:
            x = blk(x)
        return TokenSequence(self.norm(x), tokens.grid, keep)

    def forward(self, x: torch.Tensor, keep=None) -> torch.Tensor:
        return self.encode(self.patchify(x), keep).tokens


class Predictor(nn.Module):
    """Narrow transformer that fills masked positions from context tokens.

    Context tokens are projected to the predictor width; each target position
    gets a shared learnable mask token plus its positional embedding.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        pd = cfg.predictor_dim
        self.embed = nn.Linear(cfg.dim, pd)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, pd))
        self.register_buffer("pos_embed",
                             torch.from_numpy(sincos_pos_embed_3d(pd, cfg.grid)).float(),
                             persistent=False)
        self.blocks = nn.ModuleList(Block(pd, cfg.predictor_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.predictor_depth))
        self.norm = nn.LayerNorm(pd)
        self.proj = nn.Linear(pd, cfg.dim)
        init_weights(self)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def predict(self, context: TokenSequence, target_indices) -> TokenSequence:
        n = self.cfg.num_tokens
        ctx_idx = _check_indices(context.positions, n, "context")
        tgt_idx = _check_indices(target_indices, n, "target")
        if np.intersect1d(ctx_idx.numpy(), tgt_idx.numpy()).size:
            raise InvalidArgumentError("context and target indices overlap")
        B = context.tokens.shape[0]
        if tgt_idx.numel() == 0:
            return TokenSequence(context.tokens.new_zeros(B, 0, self.cfg.dim), context.grid, tgt_idx)
        pos = self.pos_embed.to(context.tokens.dtype)
        ctx = self.embed(context.tokens) + pos[ctx_idx]
        tgt = self.mask_token.expand(B, tgt_idx.numel(), -1) + pos[tgt_idx]
        x = torch.cat([ctx, tgt], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x[:, ctx_idx.numel():])
        return TokenSequence(self.proj(x), context.grid, tgt_idx)

    def forward(self, context: TokenSequence, target_indices) -> torch.Tensor:
        return self.predict(context, target_indices).tokens


class JEPAModel(nn.Module):
    """Context encoder, predictor and frozen EMA target encoder.

    The target starts as an exact copy of the context encoder and only ever
    changes through :func:`ema_update`.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.context_encoder = VideoEncoder(cfg)
        self.predictor = Predictor(cfg)
        self.target_encoder = copy.deepcopy(self.context_encoder)
        for p in self.target_encoder.parameters():
            p.requires_grad_(False)

    def trainable_parameters(self):
        yield from self.context_encoder.named_parameters(prefix="context_encoder")
        yield from self.predictor.named_parameters(prefix="predictor")


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, momentum: float) -> nn.Module:
    """``target <- m * target + (1 - m) * online`` for every parameter, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise InvalidArgumentError(f"momentum must lie in [0, 1], got {momentum}")
    tgt = dict(target.named_parameters())
    onl = dict(online.named_parameters())
    if tgt.keys() != onl.keys():
        raise InvalidArgumentError(
            f"parameter names differ: {sorted(set(tgt) ^ set(onl))[:5]}")
    for name, t in tgt.items():
        o = onl[name]
        if t.shape != o.shape:
            raise InvalidArgumentError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(o.shape)}")
        t.mul_(momentum).add_(o.detach(), alpha=1.0 - momentum)
    return target


def param_count(params: Union[nn.Module, Mapping, None]) -> int:
    """Total number of parameter entries in a module or a name -> array mapping."""
    if params is None:
        return 0
    if isinstance(params, nn.Module):
        return sum(p.numel() for p in params.parameters())
    return int(sum(np.prod(np.shape(v), dtype=np.int64) for v in params.values()))
