import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pe1d_mp, pe_sum_mp
from rgbdseg.posenc import (
    DomainError,
    PeSpec,
    TokenCoords,
    block_mean,
    embedding_matrix,
    fill_invalid,
    grid_coords,
    normalize_disparity,
    pe1d,
    pe1d_unique,
    pe2d,
    pe3d,
    similarity_map,
    to_gray8,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


def test_pe1d_zero():
    np.testing.assert_array_equal(pe1d(0.0, PeSpec(4, 512)), [0.0, 1.0, 0.0, 1.0])


def test_pe1d_half_first_component_exact():
    assert pe1d(0.5, PeSpec(4, 512))[0] == 1.0


def test_pe1d_half_against_oracle():
    got = pe1d(0.5, PeSpec(4, 512))
    want = np.array([float(x) for x in pe1d_mp(0.5, 4, 512)])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_pe2d_origin():
    np.testing.assert_array_equal(pe2d(0.0, 0.0, PeSpec(4, 512)), [0.0, 2.0, 0.0, 2.0])


def test_pe2d_oracle_point():
    np.testing.assert_allclose(pe2d(0.25, 0.75, PeSpec(64, 512)), pe_sum_mp((0.25, 0.75), 64, (512, 512)),
                               rtol=0, atol=1e-12)


def test_pe3d_oracle_point():
    np.testing.assert_allclose(pe3d(0.2, 0.7, 0.4, PeSpec(32, 512)), pe_sum_mp((0.2, 0.7, 0.4), 32, (512,) * 3),
                               rtol=0, atol=1e-12)


def test_pe3d_separate_depth_scale_against_oracle():
    got = pe3d(0.3, 0.6, 0.9, PeSpec(16, 64), PeSpec(16, 48))
    np.testing.assert_allclose(got, pe_sum_mp((0.3, 0.6, 0.9), 16, (64, 64, 48)), rtol=0, atol=1e-12)


def test_pe3d_additive_decomposition():
    spec = PeSpec(32, 512)
    np.testing.assert_allclose(pe3d(0.3, 0.8, 0.0, spec), pe2d(0.3, 0.8, spec) + pe1d(0.0, spec),
                               rtol=0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(unit, unit, unit, st.sampled_from([2, 8, 32, 64]), st.floats(1.5, 4096))
def test_pe3d_permutation_symmetric_bitwise(u, v, d, c, i_max):
    spec = PeSpec(c, i_max)
    ref = pe3d(u, v, d, spec)
    for perm in itertools.permutations((u, v, d)):
        assert pe3d(*perm, spec).tobytes() == ref.tobytes()


@settings(max_examples=100, deadline=None)
@given(unit, unit)
def test_pe2d_commutative(a, b):
    spec = PeSpec(16, 512)
    assert pe2d(a, b, spec).tobytes() == pe2d(b, a, spec).tobytes()


@settings(max_examples=100, deadline=None)
@given(unit, unit, unit)
def test_component_bounds(u, v, d):
    spec = PeSpec(64, 512)
    assert np.abs(pe1d(u, spec)).max() <= 1.0
    assert np.abs(pe3d(u, v, d, spec)).max() <= 3.0


@pytest.mark.parametrize("c", [16, 32, 64])
def test_pe1d_injective_on_grid(c):
    enc = pe1d(np.arange(512) / 511, PeSpec(c, 512))
    assert len(np.unique(enc, axis=0)) == 512
    # not just bitwise distinct: nearest pair is well separated
    d2 = ((enc[:, None] - enc[None]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    assert d2.min() > 1e-6


def test_top_frequency_below_pi_times_i():
    for c, i_max in [(4, 512), (64, 512), (128, 64)]:
        f = PeSpec(c, i_max).frequencies()
        assert f[0] == np.pi
        assert f[-1] < np.pi * i_max


@pytest.mark.parametrize("bad", [-0.01, 1.0001, np.nan])
def test_domain_errors(bad):
    with pytest.raises(DomainError):
        pe1d(bad, PeSpec(4, 512))


@pytest.mark.parametrize("c,i_max", [(3, 512), (0, 512), (4, 1.0), (4, 0.5)])
def test_spec_validation(c, i_max):
    with pytest.raises(ValueError):
        PeSpec(c, i_max)


def test_pe1d_unique_matches_direct():
    rng = np.random.default_rng(0)
    i = rng.integers(0, 20, size=(3, 7)) / 19
    spec = PeSpec(16, 64)
    assert pe1d_unique(i, spec).tobytes() == pe1d(i, spec).tobytes()


def test_token_coords_validation():
    with pytest.raises(DomainError):
        TokenCoords(np.zeros(3), np.zeros(3), np.full(3, 1.5))
    with pytest.raises(ValueError):
        TokenCoords(np.zeros(3), np.zeros(2), np.zeros(3))


# -- disparity handling --------------------------------------------------------


def test_fill_invalid_takes_nearest_valid():
    d = np.array([[5.0, 0.0, 0.0, 9.0]])
    np.testing.assert_array_equal(fill_invalid(d), [[5.0, 5.0, 9.0, 9.0]])


def test_normalize_disparity_range():
    d = np.array([[0.0, 32.0], [64.0, 80.0]])
    out = normalize_disparity(d, 64)
    assert out.min() >= 0 and out.max() == 1.0
    assert out[0, 1] == 0.5


def test_block_mean():
    f = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(block_mean(f, 2), [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ValueError):
        block_mean(np.ones((3, 4)), 2)


def test_grid_coords_token_centres():
    c = grid_coords(16, 16, 4)
    assert c.shape == (4, 4)
    np.testing.assert_allclose(c.u[0], [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(c.v[:, 0], [0.125, 0.375, 0.625, 0.875])
    assert not c.d.any()


# -- similarity maps ---------------------------------------------------------------


def two_plane_grid(h=32, w=32, near=48.0, far=16.0, max_disp=64.0):
    """Left half far, right half near."""
    disp = np.full((h, w), far)
    disp[:, w // 2:] = near
    v, u = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return TokenCoords(u, v, normalize_disparity(disp, max_disp)), disp


def test_self_similarity_is_one():
    coords, _ = two_plane_grid()
    for mode in ("2d", "3d"):
        sim = similarity_map((5, 20), coords, PeSpec(32, 32), mode, PeSpec(32, 64))
        assert sim[5, 20] == 1.0
        assert sim.min() >= -1.0 and sim.max() <= 1.0


def test_similarity_map_errors():
    coords, _ = two_plane_grid(4, 4)
    with pytest.raises(IndexError):
        similarity_map((4, 0), coords, PeSpec(8, 4), "2d")
    empty = TokenCoords(np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0)))
    with pytest.raises(ValueError):
        similarity_map((0, 0), empty, PeSpec(8, 4), "2d")


def test_equidistant_pixel_sharing_depth_scores_higher():
    # target on the boundary diagonal; p_same is k rows below (same plane),
    # p_other is k columns left (other plane): same spatial distance
    coords, disp = two_plane_grid()
    spec, dspec = PeSpec(32, 32), PeSpec(32, 64)
    r, c = 10, 16
    sim = similarity_map((r, c), coords, spec, "3d", dspec)
    for k in (1, 3, 6):
        same, other = (r + k, c), (r, c - k)
        assert disp[same] == disp[r, c] != disp[other]
        assert sim[same] > sim[other]


def test_two_plane_scene_separates_planes_in_3d():
    coords, disp = two_plane_grid()
    target = (10, 24)
    sim = similarity_map(target, coords, PeSpec(32, 32), "3d", PeSpec(32, 64))
    mask = np.ones_like(sim, dtype=bool)
    mask[target] = False
    same = disp == disp[target]
    assert sim[same & mask].mean() > sim[~same].mean()


def test_flat_depth_keeps_nearest_neighbour_ranking():
    coords, _ = two_plane_grid(near=30.0, far=30.0)
    spec, dspec = PeSpec(32, 32), PeSpec(32, 64)
    target = (12, 7)
    maps = [similarity_map(target, coords, spec, m, dspec) for m in ("2d", "3d")]
    for sim in maps:
        sim[target] = -np.inf
    assert np.argmax(maps[0]) == np.argmax(maps[1])


def test_2d_map_ignores_depth_bitwise():
    a, _ = two_plane_grid()
    b, _ = two_plane_grid(near=5.0, far=60.0)
    spec = PeSpec(32, 32)
    assert similarity_map((3, 3), a, spec, "2d").tobytes() == similarity_map((3, 3), b, spec, "2d").tobytes()
    assert similarity_map((3, 3), a, spec, "3d").tobytes() != similarity_map((3, 3), b, spec, "3d").tobytes()


def test_embedding_matrix_and_gray_mapping():
    m = embedding_matrix(PeSpec(8, 16), 16)
    assert m.shape == (16, 8)
    np.testing.assert_array_equal(m[0], pe1d(0.0, PeSpec(8, 16)))
    np.testing.assert_array_equal(to_gray8(np.array([-1.0, 0.0, 1.0, 2.0])), [0, 128, 255, 255])
