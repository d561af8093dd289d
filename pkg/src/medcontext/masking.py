"""Volumetric patch masking with a learnable mask embedding.

A mask is drawn on the (H/P1, W/P2) patch grid and repeated along depth, so a
region hidden in the first slice stays hidden in every slice. Masked patch
tokens are replaced by a single learnable C-vector shared across positions:

    X^M = X * (1 - I) + token * I

Tokens are laid out depth-major: token ``n`` of a (D/P3, H/P1, W/P2) grid is
``n = k * (H/P1 * W/P2) + i * (W/P2) + j`` for depth tile ``k``, row ``i`` and
column ``j``. This is exactly the row-major flattening of a ``[B, C, d, h, w]``
feature map, so ``tokens_from_volume`` is a reshape plus a transpose.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .autodiff import Tensor, broadcast_to, reshape, transpose
from .autodiff.ops import add, mul
from .errors import ShapeError


@dataclass(frozen=True)
class MaskSpec:
    ratio: float
    patch: tuple[int, int, int]  # (P1, P2, P3) along (H, W, D)
    seed: int
    exact_count: bool = False

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1], got {self.ratio}")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ValueError(f"patch must be three positive extents, got {self.patch}")


@dataclass(frozen=True)
class MaskGrid:
    grid: np.ndarray  # bool, (H/P1, W/P2)
    depth_tiles: int
    patch: tuple[int, int, int]

    @property
    def num_tokens(self) -> int:
        return self.grid.size * self.depth_tiles

    @property
    def num_masked(self) -> int:
        return int(self.grid.sum())

    def realized(self) -> np.ndarray:
        """The 3D indicator over (depth tile, row, column)."""
        return np.broadcast_to(self.grid, (self.depth_tiles,) + self.grid.shape)

    def token_indicator(self) -> np.ndarray:
        return self.realized().reshape(-1)

    def voxel_indicator(self) -> np.ndarray:
        """Boolean (D, H, W) volume marking every masked voxel."""
        p1, p2, p3 = self.patch
        plane = np.repeat(np.repeat(self.grid, p1, axis=0), p2, axis=1)
        return np.broadcast_to(plane, (self.depth_tiles * p3,) + plane.shape)


GridArg = Union[MaskGrid, Sequence[MaskGrid]]


def check_tiling(patch: Sequence[int], dims: Sequence[int]) -> tuple[int, int, int]:
    """Grid extents (H/P1, W/P2, D/P3) for ``dims = (H, W, D)``."""
    H, W, D = dims
    p1, p2, p3 = patch
    if H % p1 or W % p2 or D % p3:
        raise ShapeError(f"patch {tuple(patch)} does not tile volume (H, W, D) = {tuple(dims)}")
    return H // p1, W // p2, D // p3


def sample_mask(spec: MaskSpec, dims: Sequence[int]) -> MaskGrid:
    """Draw a depth-consistent Bernoulli(ratio) mask over the patch grid.

    ``dims`` is ``(H, W, D)``. With ``spec.exact_count`` exactly
    ``round(ratio * cells)`` cells are masked instead.
    """
    h, w, d = check_tiling(spec.patch, dims)
    gen = np.random.default_rng(spec.seed)
    if spec.exact_count:
        cells = h * w
        flat = np.zeros(cells, dtype=bool)
        flat[gen.permutation(cells)[: int(round(spec.ratio * cells))]] = True
        grid = flat.reshape(h, w)
    else:
        grid = gen.random((h, w)) < spec.ratio
    return MaskGrid(grid=grid, depth_tiles=d, patch=tuple(spec.patch))


def _per_sample(grid: GridArg, batch: int) -> list[MaskGrid]:
    if isinstance(grid, MaskGrid):
        return [grid] * batch
    grids = list(grid)
    if len(grids) != batch:
        raise ShapeError(f"got {len(grids)} mask grids for a batch of {batch}")
    return grids


def tokens_from_volume(features: Tensor) -> Tensor:
    """[B, C, d, h, w] feature map -> [B, N, C] depth-major tokens."""
    B, C = features.shape[:2]
    return transpose(reshape(features, (B, C, -1)), (0, 2, 1))


def volume_from_tokens(tokens: Tensor, grid_shape: Sequence[int]) -> Tensor:
    """Inverse of ``tokens_from_volume`` for a ``(d, h, w)`` token grid."""
    B, N, C = tokens.shape
    return reshape(transpose(tokens, (0, 2, 1)), (B, C) + tuple(grid_shape))


def _blend(x: Tensor, indicator: np.ndarray, fill: Tensor) -> Tensor:
    ind = indicator.astype(x.dtype)
    keep = mul(x, 1.0 - ind)
    return add(keep, mul(fill, ind))


def apply_mask(tokens: Tensor, grid: GridArg, mask_token: Tensor) -> Tensor:
    """Replace masked tokens of ``tokens[B, N, C]`` with ``mask_token[C]``."""
    if tokens.ndim != 3:
        raise ShapeError(f"apply_mask expects [B, N, C] tokens, got {tokens.shape}")
    B, N, C = tokens.shape
    if mask_token.shape != (C,):
        raise ShapeError(f"mask token shape {mask_token.shape} != ({C},)")
    grids = _per_sample(grid, B)
    for g in grids:
        if g.num_tokens != N:
            raise ShapeError(f"mask grid covers {g.num_tokens} tokens, input has {N}")
    ind = np.stack([g.token_indicator() for g in grids])[:, :, None]
    ind = np.broadcast_to(ind, (B, N, C))
    fill = broadcast_to(reshape(mask_token, (1, 1, C)), (B, N, C))
    return _blend(tokens, ind, fill)


def mask_voxels(volume: Tensor, grid: GridArg, mask_value: Tensor) -> Tensor:
    """Voxel-space masking: every voxel of a masked patch column takes ``mask_value``.

    Interpretation for convolution-only backbones that have no token stage.
    """
    if volume.ndim != 5 or volume.shape[1] != 1:
        raise ShapeError(f"mask_voxels expects [B, 1, D, H, W], got {volume.shape}")
    if mask_value.shape != (1,):
        raise ShapeError(f"mask value shape {mask_value.shape} != (1,)")
    B, _, D, H, W = volume.shape
    grids = _per_sample(grid, B)
    inds = []
    for g in grids:
        check_tiling(g.patch, (H, W, D))
        vi = g.voxel_indicator()
        if vi.shape != (D, H, W):
            raise ShapeError(f"mask grid covers {vi.shape} voxels, volume is {(D, H, W)}")
        inds.append(vi)
    ind = np.stack(inds)[:, None]
    fill = broadcast_to(reshape(mask_value, (1, 1, 1, 1, 1)), volume.shape)
    return _blend(volume, ind, fill)
