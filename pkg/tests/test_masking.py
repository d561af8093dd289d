import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medcontext import autodiff as ad
from medcontext.autodiff import Tensor
from medcontext.errors import ShapeError
from medcontext.masking import (
    MaskGrid,
    MaskSpec,
    apply_mask,
    check_tiling,
    mask_voxels,
    sample_mask,
    tokens_from_volume,
    volume_from_tokens,
)


def spec(ratio, seed=0, patch=(2, 2, 2), exact=False):
    return MaskSpec(ratio, patch, seed, exact)


def test_degenerate_ratios():
    assert not sample_mask(spec(0.0), (8, 8, 8)).grid.any()
    assert sample_mask(spec(1.0), (8, 8, 8)).grid.all()


def test_tiling_errors():
    with pytest.raises(ShapeError):
        sample_mask(spec(0.5, patch=(3, 2, 2)), (8, 8, 8))
    assert check_tiling((4, 2, 1), (8, 6, 5)) == (2, 3, 5)
    with pytest.raises(ValueError):
        MaskSpec(1.5, (2, 2, 2), 0)


def test_grid_shape_and_determinism():
    a = sample_mask(spec(0.4, seed=11, patch=(2, 4, 8)), (8, 16, 32))
    b = sample_mask(spec(0.4, seed=11, patch=(2, 4, 8)), (8, 16, 32))
    assert a.grid.shape == (4, 4) and a.depth_tiles == 4
    assert np.array_equal(a.grid, b.grid)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**63 - 1), st.floats(0, 1))
def test_depth_consistency(seed, ratio):
    g = sample_mask(spec(ratio, seed), (8, 8, 16))
    real = g.realized()
    assert all(np.array_equal(real[k], real[0]) for k in range(g.depth_tiles))
    vox = g.voxel_indicator()
    assert all(np.array_equal(vox[d], vox[0]) for d in range(vox.shape[0]))


def test_exact_count_mode():
    for seed in range(20):
        g = sample_mask(spec(0.4, seed, exact=True), (16, 16, 8))
        assert g.num_masked == round(0.4 * 64)


def test_mask_fraction_is_near_ratio():
    fr = [sample_mask(spec(0.4, s), (16, 16, 2)).grid.mean() for s in range(2000)]
    assert abs(np.mean(fr) - 0.4) < 0.01


def test_token_order_is_depth_major():
    feat = np.arange(2 * 3 * 2 * 2 * 4, dtype=np.float64).reshape(2, 3, 2, 2, 4)  # [B, C, d, h, w]
    tokens = tokens_from_volume(Tensor(feat)).data
    h, w = 2, 4
    for k in range(2):
        for i in range(h):
            for j in range(w):
                np.testing.assert_array_equal(tokens[:, k * h * w + i * w + j, :], feat[:, :, k, i, j])
    back = volume_from_tokens(Tensor(tokens), (2, 2, 4)).data
    np.testing.assert_array_equal(back, feat)


def tokens_and_grid(ratio, seed=0):
    g = sample_mask(spec(ratio, seed), (4, 4, 4))
    x = np.random.default_rng(seed).normal(size=(2, g.num_tokens, 3))
    return x, g


def test_apply_mask_identity_and_full():
    x, g0 = tokens_and_grid(0.0)
    token = Tensor(np.array([7.0, 8.0, 9.0]))
    np.testing.assert_array_equal(apply_mask(Tensor(x), g0, token).data, x)
    _, g1 = tokens_and_grid(1.0)
    out = apply_mask(Tensor(x), g1, token).data
    np.testing.assert_array_equal(out, np.broadcast_to([7.0, 8.0, 9.0], x.shape))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_apply_mask_preserves_unmasked_and_is_idempotent(seed, ratio):
    x, g = tokens_and_grid(ratio, seed)
    token = Tensor(np.array([0.5, -1.0, 2.0]))
    once = apply_mask(Tensor(x), g, token).data
    keep = ~g.token_indicator()
    assert np.array_equal(once[:, keep], x[:, keep])
    twice = apply_mask(Tensor(once), g, token).data
    assert np.array_equal(once, twice)


def test_mask_token_gradient_counts_masked_positions():
    x, g = tokens_and_grid(0.5, seed=3)
    token = Tensor(np.zeros(3), requires_grad=True)
    xt = Tensor(x, requires_grad=True)
    ad.sum(apply_mask(xt, g, token)).backward()
    m = g.num_masked * g.depth_tiles * x.shape[0]
    np.testing.assert_array_equal(token.grad, np.full(3, m))
    np.testing.assert_array_equal(xt.grad[:, g.token_indicator()], 0.0)


def test_apply_mask_per_sample_grids_and_errors():
    x, _ = tokens_and_grid(0.0)
    grids = [sample_mask(spec(0.0), (4, 4, 4)), sample_mask(spec(1.0), (4, 4, 4))]
    token = Tensor(np.ones(3))
    out = apply_mask(Tensor(x), grids, token).data
    np.testing.assert_array_equal(out[0], x[0])
    np.testing.assert_array_equal(out[1], 1.0)
    with pytest.raises(ShapeError):
        apply_mask(Tensor(x[:, :-1]), grids[0], token)
    with pytest.raises(ShapeError):
        apply_mask(Tensor(x), grids[:1], token)


def test_mask_voxels_single_cell():
    grid = np.zeros((2, 2), dtype=bool)
    grid[0, 0] = True
    g = MaskGrid(grid, depth_tiles=2, patch=(2, 3, 4))  # H=4, W=6, D=8
    vol = np.random.default_rng(0).normal(size=(1, 1, 8, 4, 6))
    out = mask_voxels(Tensor(vol), g, Tensor(np.array([-5.0]))).data
    np.testing.assert_array_equal(out[0, 0, :, 0:2, 0:3], -5.0)
    changed = out != vol
    assert changed.sum() == 1 * 2 * 3 * 8  # cells * P1 * P2 * D


def test_mask_voxels_identity_and_count():
    vol = np.random.default_rng(1).normal(size=(2, 1, 8, 8, 8))
    g0 = sample_mask(spec(0.0), (8, 8, 8))
    np.testing.assert_array_equal(mask_voxels(Tensor(vol), g0, Tensor(np.array([0.3]))).data, vol)
    g = sample_mask(spec(0.5, seed=4), (8, 8, 8))
    out = mask_voxels(Tensor(vol), g, Tensor(np.array([100.0]))).data
    assert (out == 100.0).sum() == 2 * g.num_masked * 2 * 2 * 8
