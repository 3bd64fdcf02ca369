"""Patch-grid masks shared by the MAE and JEPA branches, and patch gather/scatter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MaskConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MaskPair:
    grid: tuple[int, int]
    ctx_visible: np.ndarray
    tgt_visible: np.ndarray
    seed: int

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def masked(self) -> np.ndarray:
        """Positions hidden from the context encoder (the reconstruction set)."""
        keep = np.ones(self.n_patches, dtype=bool)
        keep[self.ctx_visible] = False
        return np.flatnonzero(keep)


def mask_sizes(n_patches: int, ratio: float, target_fraction: float) -> tuple[int, int]:
    if not 0.0 < ratio < 1.0:
        raise MaskConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    if not 0.0 < target_fraction <= ratio:
        raise MaskConfigError(f"target_fraction must lie in (0, ratio={ratio}], got {target_fraction}")
    n_ctx = int(round((1.0 - ratio) * n_patches))
    n_tgt = int(round(target_fraction * n_patches))
    if n_ctx == 0 or n_tgt == 0:
        raise MaskConfigError(f"mask sizes round to zero on {n_patches} patches (ctx={n_ctx}, tgt={n_tgt})")
    n_tgt = min(n_tgt, n_patches - n_ctx)
    return n_ctx, n_tgt


def make_masks(grid: tuple[int, int], ratio: float = 0.70, target_fraction: float = 0.25,
               seed: int = 0) -> MaskPair:
    n = grid[0] * grid[1]
    n_ctx, n_tgt = mask_sizes(n, ratio, target_fraction)
    perm = np.random.default_rng(seed).permutation(n)
    ctx = np.sort(perm[:n_ctx])
    # targets come from the masked complement, so disjointness holds by construction
    tgt = np.sort(perm[n_ctx:n_ctx + n_tgt])
    return MaskPair(grid=(int(grid[0]), int(grid[1])), ctx_visible=ctx, tgt_visible=tgt, seed=seed)


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """(C, H, W) -> (N, C*patch*patch), patches in row-major grid order,
    values within a patch ordered (channel, row, col)."""
    c, h, w = x.shape
    if h % patch or w % patch:
        raise MaskConfigError(f"raster {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    return (x.reshape(c, gh, patch, gw, patch)
             .transpose(1, 3, 0, 2, 4)
             .reshape(gh * gw, c * patch * patch))


def unpatchify(patches: np.ndarray, channels: int, grid: tuple[int, int], patch: int) -> np.ndarray:
    gh, gw = grid
    return (patches.reshape(gh, gw, channels, patch, patch)
                   .transpose(2, 0, 3, 1, 4)
                   .reshape(channels, gh * patch, gw * patch))


def gather_visible(x: np.ndarray, visible, patch: int) -> np.ndarray:
    visible = np.asarray(visible, dtype=np.int64)
    patches = patchify(x, patch)
    if visible.size and (visible.min() < 0 or visible.max() >= patches.shape[0]):
        raise IndexError(f"patch index out of grid of {patches.shape[0]} patches")
    return patches[np.sort(visible)]


def scatter_visible(seq: np.ndarray, visible, shape: tuple[int, int, int], patch: int,
                    out: np.ndarray | None = None) -> np.ndarray:
    """Write a visible-patch sequence back into a (C, H, W) raster; other pixels are left as-is."""
    c, h, w = shape
    grid = (h // patch, w // patch)
    full = patchify(np.zeros(shape) if out is None else out, patch).copy()
    visible = np.sort(np.asarray(visible, dtype=np.int64))
    if visible.size:
        full[visible] = seq
    return unpatchify(full, c, grid, patch)
