"""Labeled-to-unlabeled delivery: paste a foreground-bearing labeled patch,
image and annotation, into an unlabeled sample and its pseudo-label."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ContractError


@dataclass(frozen=True)
class PatchSpec:
    """Square patch with top-left corner ``(p_h, p_w)`` and side ``s``; ``s == 0`` is a no-op."""

    p_h: int
    p_w: int
    s: int

    def validate(self, height: int, width: int):
        if not 0 <= self.s <= min(height, width):
            raise ContractError(f"patch side {self.s} outside [0, {min(height, width)}]")
        if not (0 <= self.p_h <= height - self.s and 0 <= self.p_w <= width - self.s):
            raise ContractError(f"patch {self} does not fit in {height}x{width}")

    def region(self) -> tuple[slice, slice]:
        return slice(self.p_h, self.p_h + self.s), slice(self.p_w, self.p_w + self.s)


def _clamp(v: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, v))


def select_patch(label: torch.Tensor, s: int, rng: torch.Generator) -> PatchSpec:
    """Pick a patch of side ``s`` centred on a uniformly drawn foreground pixel.

    ``label`` is one-hot ``[L, H, W]`` or ``[1, L, H, W]``.  Patches are clamped
    to the image; an all-background label falls back to a uniform position.
    ``s == 0`` returns the no-op patch without consuming ``rng``.
    """
    if label.dim() == 4:
        label = label[0]
    height, width = label.shape[-2:]
    if not 0 <= s <= min(height, width):
        raise ContractError(f"patch side {s} outside [0, {min(height, width)}]")
    if s == 0:
        return PatchSpec(0, 0, 0)
    foreground = torch.nonzero(label[1:].sum(0) > 0)
    if len(foreground):
        r, c = foreground[int(torch.randint(len(foreground), (1,), generator=rng))].tolist()
        p_h = _clamp(r - s // 2, 0, height - s)
        p_w = _clamp(c - s // 2, 0, width - s)
    else:
        p_h = int(torch.randint(height - s + 1, (1,), generator=rng))
        p_w = int(torch.randint(width - s + 1, (1,), generator=rng))
    return PatchSpec(p_h, p_w, s)


def paste(dst: torch.Tensor, src: torch.Tensor, patch: PatchSpec) -> torch.Tensor:
    """Copy of ``dst`` with the patch region taken from ``src``."""
    if dst.shape != src.shape:
        raise ContractError(f"paste shape mismatch: {tuple(dst.shape)} vs {tuple(src.shape)}")
    patch.validate(*dst.shape[-2:])
    out = dst.clone()
    if patch.s:
        rows, cols = patch.region()
        out[..., rows, cols] = src[..., rows, cols]
    return out


def mix(unlabeled_image: torch.Tensor, pseudo_label: torch.Tensor,
        labeled_image: torch.Tensor, labeled_label: torch.Tensor,
        patch: PatchSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(mixed_image, mixed_pseudo_label)``; inputs are left untouched."""
    if unlabeled_image.shape[-2:] != pseudo_label.shape[-2:]:
        raise ContractError("image and pseudo-label spatial shapes differ")
    return paste(unlabeled_image, labeled_image, patch), paste(pseudo_label, labeled_label, patch)
