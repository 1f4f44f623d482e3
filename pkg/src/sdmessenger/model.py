"""Hierarchical encoder with channel-wise cross-attention blocks and an
all-stage-fusion decoder.

Each encoder block carries two learning flows.  Queries of the labeled flow
attend over channels of the unlabeled flow; the result is blended with the
labeled flow's own channel self-attention before the output projection.
The unlabeled flow only ever sees itself.  At inference both flows reduce to
self-attention, so a single flow is enough.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, NumericalError

PSI_EPS = 1e-5
MODES = ("train", "infer")


@dataclass(frozen=True)
class StageConfig:
    channels: int
    patch_stride: int
    num_blocks: int = 1
    ffn_expansion: int = 4


MESSENGER_TINY = (
    StageConfig(16, 4, 1),
    StageConfig(32, 2, 1),
    StageConfig(64, 2, 2),
    StageConfig(128, 2, 1),
)


def validate_stages(stages: Sequence[StageConfig]):
    if len(stages) != 4:
        raise ConfigError(f"encoder needs 4 stages, got {len(stages)}")
    if math.prod(s.patch_stride for s in stages) != 32 or stages[0].patch_stride != 4:
        raise ConfigError("stage strides must give resolutions H/4, H/8, H/16, H/32")
    for a, b in zip(stages, stages[1:]):
        if b.channels <= a.channels:
            raise ConfigError("stage channels must strictly increase")
    for s in stages:
        if min(s.channels, s.patch_stride, s.num_blocks, s.ffn_expansion) < 1:
            raise ConfigError(f"invalid stage {s}")


def _check_finite(x: torch.Tensor, where: str):
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite values in {where}", {"where": where})


def channel_affinity(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """``softmax(psi(Q^T K))`` over the key-channel axis.

    ``q`` and ``k`` are token-major ``[..., N, D]``; the result is ``[..., D, D]``.
    ``psi`` standardizes each row (one query channel) to zero mean and unit
    variance with epsilon ``1e-5`` and no affine part.
    """
    if q.shape != k.shape:
        raise ContractError(f"Q and K shapes differ: {tuple(q.shape)} vs {tuple(k.shape)}")
    if q.shape[-2] < 2:
        raise ContractError("channel affinity needs at least 2 tokens")
    s = q.transpose(-1, -2) @ k
    mean = s.mean(-1, keepdim=True)
    var = s.var(-1, unbiased=False, keepdim=True)
    return torch.softmax((s - mean) / torch.sqrt(var + PSI_EPS), dim=-1)


def channel_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int = 1,
                      record: list | None = None) -> torch.Tensor:
    """Token-major ``[b, N, D]`` inputs -> ``(A V^T)^T`` as ``[b, N, D]``.

    With several heads the D channels split into equal groups attended
    independently.
    """
    b, n, d = q.shape
    if heads > 1:
        q, k, v = (t.reshape(b, n, heads, d // heads).transpose(1, 2) for t in (q, k, v))
    a = channel_affinity(q, k)
    if record is not None:
        record.append(a.detach())
    out = v @ a.transpose(-1, -2)
    if heads > 1:
        out = out.transpose(1, 2).reshape(b, n, d)
    return out


def to_tokens(f: torch.Tensor) -> torch.Tensor:
    """[b, C, h, w] -> [b, h*w, C]."""
    return f.flatten(2).transpose(1, 2)


def to_map(t: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return t.transpose(1, 2).reshape(t.shape[0], t.shape[2], h, w)


def _trunc_normal(t: torch.Tensor, std: float = 0.02):
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


class MessengerAttention(nn.Module):
    """Q/K/V projections ``C -> 2C`` and output projection ``2C -> C``, stored
    as plain matrices applied on the right of token-major features."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        if (2 * dim) % heads:
            raise ConfigError(f"2C={2 * dim} not divisible by heads={heads}")
        self.dim, self.heads = dim, heads
        self.w_q = nn.Parameter(torch.empty(dim, 2 * dim))
        self.w_k = nn.Parameter(torch.empty(dim, 2 * dim))
        self.w_v = nn.Parameter(torch.empty(dim, 2 * dim))
        self.w_o = nn.Parameter(torch.empty(2 * dim, dim))
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            _trunc_normal(w)

    def attend(self, x_q: torch.Tensor, x_kv: torch.Tensor, record: list | None = None) -> torch.Tensor:
        """Width-2C attention output (before ``W_O``)."""
        return channel_attention(x_q @ self.w_q, x_kv @ self.w_k, x_kv @ self.w_v, self.heads, record)


def u2l_cross_attention(f_l: torch.Tensor, f_u: torch.Tensor, attn: MessengerAttention) -> torch.Tensor:
    """Labeled queries against unlabeled keys/values: ``[b, C, h, w]`` x2 -> ``[b, 2C, h, w]``.

    Sample ``j`` of the labeled flow only sees sample ``j`` of the unlabeled flow.
    """
    if f_l.shape != f_u.shape:
        raise ContractError(f"flow shapes differ: {tuple(f_l.shape)} vs {tuple(f_u.shape)}")
    h, w = f_l.shape[-2:]
    return to_map(attn.attend(to_tokens(f_l), to_tokens(f_u)), h, w)


def channel_self_attention(f: torch.Tensor, attn: MessengerAttention) -> torch.Tensor:
    h, w = f.shape[-2:]
    t = to_tokens(f)
    return to_map(attn.attend(t, t), h, w)


class MixFFN(nn.Module):
    def __init__(self, dim: int, expansion: int = 4):
        super().__init__()
        hidden = dim * expansion
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        x = self.fc1(x)
        x = to_tokens(self.dwconv(to_map(x, h, w)))
        return self.fc2(F.gelu(x))


class MessengerBlock(nn.Module):
    """One encoder block acting on both flows.

    ``cross=False`` builds the plain self-attention block used by the
    baseline: the labeled flow never looks at the unlabeled one.
    """

    def __init__(self, dim: int, alpha: float = 0.5, ffn_expansion: int = 4, heads: int = 1,
                 cross: bool = True):
        super().__init__()
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
        self.alpha = float(alpha)
        self.cross = cross
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MessengerAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFFN(dim, ffn_expansion)
        self.record: list | None = None

    def _finish(self, f: torch.Tensor, mixed: torch.Tensor, h: int, w: int) -> torch.Tensor:
        f = f + mixed @ self.attn.w_o
        return f + self.ffn(self.norm2(f), h, w)

    def forward(self, f_l: torch.Tensor, f_u: torch.Tensor | None, h: int, w: int,
                mode: str = "train") -> tuple[torch.Tensor, torch.Tensor | None]:
        """Token-major flows ``[b, h*w, C]``; ``f_u`` may be None for a single flow."""
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        x_l = self.norm1(f_l)
        g_l = self.attn.attend(x_l, x_l, self.record)
        if f_u is None:
            return self._finish(f_l, g_l, h, w), None
        if f_u.shape != f_l.shape:
            raise ContractError(f"flow shapes differ: {tuple(f_l.shape)} vs {tuple(f_u.shape)}")
        x_u = self.norm1(f_u)
        g_u = self.attn.attend(x_u, x_u, self.record)
        if mode == "train" and self.cross:
            f_hat = self.attn.attend(x_l, x_u, self.record)
            g_l = self.alpha * f_hat + (1.0 - self.alpha) * g_l
        return self._finish(f_l, g_l, h, w), self._finish(f_u, g_u, h, w)


class PatchEmbed(nn.Module):
    """Overlapping patch merging: strided conv then LayerNorm."""

    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        kernel = 2 * stride - 1
        self.proj = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.LayerNorm(out_ch)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        x = self.proj(x)
        h, w = x.shape[-2:]
        return self.norm(to_tokens(x)), h, w


class MessengerEncoder(nn.Module):
    def __init__(self, stages: Sequence[StageConfig] = MESSENGER_TINY, in_channels: int = 1,
                 alpha: float = 0.5, heads: int = 1, cross: bool = True):
        super().__init__()
        validate_stages(stages)
        self.stages = tuple(stages)
        self.embeds = nn.ModuleList()
        self.blocks = nn.ModuleList()
        self.norms = nn.ModuleList()
        prev = in_channels
        for st in stages:
            self.embeds.append(PatchEmbed(prev, st.channels, st.patch_stride))
            self.blocks.append(nn.ModuleList(
                MessengerBlock(st.channels, alpha, st.ffn_expansion, heads, cross) for _ in range(st.num_blocks)
            ))
            self.norms.append(nn.LayerNorm(st.channels))
            prev = st.channels

    def forward(self, x_l: torch.Tensor, x_u: torch.Tensor | None = None,
                mode: str = "train") -> list[tuple[torch.Tensor, torch.Tensor | None]]:
        """Per-stage ``(f_l, f_u)`` feature maps ``[b, C_k, h_k, w_k]``."""
        if x_u is not None and x_u.shape != x_l.shape:
            raise ContractError(f"flow image shapes differ: {tuple(x_l.shape)} vs {tuple(x_u.shape)}")
        outs = []
        for k, (embed, blocks, norm) in enumerate(zip(self.embeds, self.blocks, self.norms)):
            f_l, h, w = embed(x_l)
            f_u = embed(x_u)[0] if x_u is not None else None
            for j, block in enumerate(blocks):
                _check_finite(f_l, f"stage {k} block {j} labeled input")
                if f_u is not None:
                    _check_finite(f_u, f"stage {k} block {j} unlabeled input")
                f_l, f_u = block(f_l, f_u, h, w, mode)
            x_l = to_map(norm(f_l), h, w)
            x_u = to_map(norm(f_u), h, w) if f_u is not None else None
            outs.append((x_l, x_u))
        return outs


class FusionDecoder(nn.Module):
    """Project every stage to a shared width, upsample to the first stage,
    concatenate, fuse and classify; logits are upsampled to the input size."""

    def __init__(self, in_channels: Sequence[int], num_classes: int, embed_dim: int = 64):
        super().__init__()
        self.proj = nn.ModuleList(nn.Linear(c, embed_dim) for c in in_channels)
        self.fuse = nn.Linear(embed_dim * len(in_channels), embed_dim)
        self.classify = nn.Linear(embed_dim, num_classes)

    def forward(self, features: Sequence[torch.Tensor], out_size: tuple[int, int]) -> torch.Tensor:
        h, w = features[0].shape[-2:]
        maps = []
        for f, proj in zip(features, self.proj):
            m = to_map(proj(to_tokens(f)), *f.shape[-2:])
            if m.shape[-2:] != (h, w):
                m = F.interpolate(m, size=(h, w), mode="bilinear", align_corners=False)
            maps.append(m)
        x = to_tokens(torch.cat(maps[::-1], dim=1))
        x = self.classify(F.relu(self.fuse(x)))
        return F.interpolate(to_map(x, h, w), size=out_size, mode="bilinear", align_corners=False)


class MessengerNet(nn.Module):
    def __init__(self, num_classes: int, stages: Sequence[StageConfig] = MESSENGER_TINY,
                 in_channels: int = 1, alpha: float = 0.5, heads: int = 1, embed_dim: int = 64,
                 cross: bool = True):
        super().__init__()
        if num_classes < 2:
            raise ConfigError("need at least 2 classes")
        self.num_classes = num_classes
        self.alpha = alpha
        self.cross = cross
        self.encoder = MessengerEncoder(stages, in_channels, alpha, heads, cross)
        self.decoder = FusionDecoder([s.channels for s in stages], num_classes, embed_dim)
        self.apply(_init_weights)

    def forward(self, x_l: torch.Tensor, x_u: torch.Tensor | None = None,
                mode: str = "train") -> tuple[torch.Tensor, torch.Tensor | None]:
        feats = self.encoder(x_l, x_u, mode)
        size = tuple(x_l.shape[-2:])
        logits_l = self.decoder([f for f, _ in feats], size)
        logits_u = self.decoder([f for _, f in feats], size) if x_u is not None else None
        return logits_l, logits_u

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Single self-attention flow; returns ``(logits, class_map)``."""
        logits, _ = self(images, None, mode="infer")
        return logits, argmax_lowest(logits)

    @torch.no_grad()
    def predict_doubled(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """The literal route: feed the batch to both flows in infer mode."""
        logits, other = self(images, images, mode="infer")
        if not torch.equal(logits, other):
            raise NumericalError("doubled inference flows disagree")
        return logits, argmax_lowest(logits)

    def affinity_record(self, enable: bool = True) -> list:
        """Start (or stop) collecting every affinity matrix computed by the encoder."""
        store: list | None = [] if enable else None
        for m in self.modules():
            if isinstance(m, MessengerBlock):
                m.record = store
        return store

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def argmax_lowest(logits: torch.Tensor) -> torch.Tensor:
    """Channel argmax with ties going to the lowest index."""
    best = logits.max(dim=1, keepdim=True).values
    idx = torch.arange(logits.shape[1], device=logits.device).view(1, -1, *([1] * (logits.dim() - 2)))
    masked = torch.where(logits == best, idx, logits.shape[1])
    return masked.min(dim=1).values


def _init_weights(m: nn.Module):
    if isinstance(m, nn.Linear):
        _trunc_normal(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)
