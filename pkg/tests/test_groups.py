import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from equirl.groups import (
    REGULAR,
    STANDARD,
    TRIVIAL,
    CyclicGroup,
    FactoredAction,
    FeatureField,
    GroupError,
    Representation,
    act_on_action,
    act_on_action_with_sigma,
    act_on_field,
    act_on_image,
    compose,
    rep_matrix,
    rotate_image,
    rotation_source_coords,
)

ORDERS = [2, 3, 4, 8, 12, 16]


def test_compose_identity_and_examples():
    for g in range(8):
        assert compose(0, g, 8) == g
    assert compose(1, 1, 8) == 2
    assert compose(3, 5, 8) == 0


def test_compose_rejects_out_of_range():
    with pytest.raises(GroupError):
        compose(8, 0, 8)
    with pytest.raises(GroupError):
        compose(0, -1, 8)


@pytest.mark.parametrize("n", ORDERS)
def test_group_axioms_exhaustive(n):
    group = CyclicGroup(n)
    elems = list(group.elements())
    for g in elems:
        assert group.compose(group.identity, g) == g
        assert group.compose(g, group.inverse(g)) == group.identity
        for h in elems:
            assert group.compose(g, h) in elems
            for k in elems:
                lhs = group.compose(group.compose(g, h), k)
                rhs = group.compose(g, group.compose(h, k))
                assert lhs == rhs


def test_rep_matrix_examples():
    np.testing.assert_array_equal(
        rep_matrix(STANDARD, 2, 8), np.array([[0.0, -1.0], [1.0, 0.0]])
    )
    x = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(rep_matrix(REGULAR, 1, 4) @ x, [4.0, 1.0, 2.0, 3.0])
    for g in range(8):
        np.testing.assert_array_equal(rep_matrix(TRIVIAL, g, 8), [[1.0]])


@pytest.mark.parametrize("n", ORDERS)
@pytest.mark.parametrize("kind", [TRIVIAL, STANDARD, REGULAR])
def test_rep_matrix_homomorphism_and_orthogonality(n, kind):
    group = CyclicGroup(n)
    mats = [rep_matrix(kind, g, n) for g in group.elements()]
    for g in group.elements():
        np.testing.assert_allclose(mats[g].T @ mats[g], np.eye(mats[g].shape[0]), atol=1e-12)
        for h in group.elements():
            np.testing.assert_allclose(
                mats[group.compose(g, h)], mats[g] @ mats[h], atol=1e-12
            )


@pytest.mark.parametrize("n", [4, 8])
def test_rep_matrix_homomorphism_exact_for_permutation_elements(n):
    # elements realized as signed permutations compose bitwise-exactly
    group = CyclicGroup(n)
    for kind in (TRIVIAL, REGULAR):
        mats = [rep_matrix(kind, g, n) for g in group.elements()]
        for g in group.elements():
            for h in group.elements():
                np.testing.assert_array_equal(mats[group.compose(g, h)], mats[g] @ mats[h])
    quarters = [g for g in group.elements() if group.quarter_turns(g) is not None]
    mats = {g: rep_matrix(STANDARD, g, n) for g in quarters}
    for g in quarters:
        for h in quarters:
            np.testing.assert_array_equal(mats[group.compose(g, h)], mats[g] @ mats[h])


def test_mixed_representation_dim_and_block_diagonal():
    rep = Representation(8, ((STANDARD, 1), (TRIVIAL, 3), (REGULAR, 2)))
    assert rep.dim == 2 + 3 + 16
    m = rep.matrix(3)
    np.testing.assert_allclose(m @ m.T, np.eye(rep.dim), atol=1e-12)
    np.testing.assert_array_equal(m[2:5, 2:5], np.eye(3))
    assert np.all(m[:2, 2:] == 0) and np.all(m[2:, :2] == 0)


# --- image action ---------------------------------------------------------


def _state_field(data, n=8):
    return FeatureField(data=data, rep=Representation.trivial(n, data.shape[0]))


def test_act_on_image_identity():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(2, 9, 9))
    out = act_on_image(CyclicGroup(8), 0, _state_field(img))
    np.testing.assert_array_equal(out.data, img)


def test_act_on_image_quarter_turn_moves_hot_pixel():
    # hot pixel at world offset (r, 0) -> (0, r) under a quarter turn
    group = CyclicGroup(4)
    img = np.zeros((1, 9, 9))
    c = 4
    img[0, c, c + 3] = 1.0  # world offset (3, 0)
    out = act_on_image(group, 1, _state_field(img, n=4))
    expected = np.zeros_like(img)
    expected[0, c - 3, c] = 1.0  # world offset (0, 3)
    np.testing.assert_array_equal(out.data, expected)


def test_act_on_image_quarter_turns_are_pixel_bijections():
    rng = np.random.default_rng(1)
    img = rng.normal(size=(2, 13, 13))
    group = CyclicGroup(8)
    for g in group.elements():
        if group.quarter_turns(g) is None:
            continue
        out = act_on_image(group, g, _state_field(img))
        np.testing.assert_array_equal(np.sort(out.data.ravel()), np.sort(img.ravel()))


def test_act_on_image_rejects_nonspatial_and_nontrivial():
    group = CyclicGroup(8)
    with pytest.raises(GroupError):
        act_on_image(group, 1, FeatureField(np.zeros(3), Representation.trivial(8, 3)))
    with pytest.raises(GroupError):
        act_on_image(group, 1, FeatureField(np.zeros((2, 5, 5)), Representation.standard(8)))


def test_rotate_image_45_matches_dense_grid_oracle():
    # oracle: bilinear-interpolate the image on a 16x-supersampled rotated
    # grid with an independent engine, then decimate back to pixel centers
    rng = np.random.default_rng(2)
    img = rng.normal(size=(15, 15))
    angle = math.pi / 4.0
    mine = rotate_image(img, angle)

    factor = 16
    h, w = img.shape
    fine = np.arange(h * factor) / factor  # fine grid containing pixel centers
    rows, cols = np.meshgrid(fine, fine, indexing="ij")
    cy = cx = (h - 1) / 2.0
    dx, dy = cols - cx, cy - rows
    c, s = math.cos(angle), math.sin(angle)
    src_r = cy - (-dx * s + dy * c)
    src_c = cx + (dx * c + dy * s)
    dense = ndimage.map_coordinates(img, [src_r, src_c], order=1, mode="constant")
    oracle = dense[::factor, ::factor]

    # compare away from the zero-fill boundary
    src_rows, src_cols = rotation_source_coords(img.shape, angle)
    interior = (
        (src_rows >= 1) & (src_rows <= h - 2) & (src_cols >= 1) & (src_cols <= w - 2)
    )
    assert interior.sum() > 50
    np.testing.assert_allclose(mine[interior], oracle[interior], atol=1e-6)


def test_rotate_image_zero_fill_outside_bounds():
    img = np.ones((9, 9))
    out = rotate_image(img, math.pi / 4.0)
    assert out[0, 0] == 0.0  # corners rotate out of support
    assert abs(out[4, 4] - 1.0) < 1e-12


# --- action transforms ----------------------------------------------------


def test_act_on_action_examples():
    group = CyclicGroup(4)
    a = FactoredAction(grip=1.0, xy=[0.05, 0.0], z=-0.02, theta=0.1)
    same = act_on_action(group, 0, a)
    np.testing.assert_array_equal(same.as_vector(), a.as_vector())
    rot = act_on_action(group, 1, a)
    np.testing.assert_array_equal(rot.xy, [0.0, 0.05])
    assert (rot.grip, rot.z, rot.theta) == (a.grip, a.z, a.theta)


@given(
    st.integers(min_value=0, max_value=7),
    st.integers(min_value=0, max_value=7),
    st.lists(st.floats(-1, 1, allow_nan=False), min_size=2, max_size=2),
)
@settings(max_examples=50, deadline=None)
def test_act_on_action_composition(g1, g2, xy):
    group = CyclicGroup(8)
    a = FactoredAction(grip=0.3, xy=xy, z=0.01, theta=-0.2)
    once = act_on_action(group, group.compose(g1, g2), a)
    twice = act_on_action(group, g1, act_on_action(group, g2, a))
    np.testing.assert_allclose(once.as_vector(), twice.as_vector(), atol=1e-12)


def test_act_on_action_with_sigma_passthrough():
    group = CyclicGroup(8)
    a = FactoredAction(grip=0.0, xy=[0.3, -0.4], z=0.0, theta=0.0)
    sigma = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    for g in group.elements():
        _, out_sigma = act_on_action_with_sigma(group, g, a, sigma)
        assert out_sigma is sigma
    rot, _ = act_on_action_with_sigma(group, 4, a, sigma)
    np.testing.assert_array_equal(rot.xy, [-0.3, 0.4])


# --- general field action -------------------------------------------------


def test_act_on_field_trivial_reduces_to_act_on_image():
    rng = np.random.default_rng(3)
    group = CyclicGroup(8)
    f = _state_field(rng.normal(size=(2, 9, 9)))
    np.testing.assert_array_equal(
        act_on_field(group, 3, f).data, act_on_image(group, 3, f).data
    )


def test_act_on_field_regular_pointwise_shifts_channels():
    group = CyclicGroup(4)
    f = FeatureField(np.array([1.0, 2.0, 3.0, 4.0]), Representation.regular(4))
    out = act_on_field(group, 1, f)
    np.testing.assert_array_equal(out.data, [4.0, 1.0, 2.0, 3.0])


def test_act_on_field_homomorphism_exact_for_c4():
    rng = np.random.default_rng(4)
    group = CyclicGroup(4)
    rep = Representation(4, ((TRIVIAL, 1), (STANDARD, 1), (REGULAR, 1)))
    f = FeatureField(rng.normal(size=(rep.dim, 9, 9)), rep)
    for g1 in group.elements():
        for g2 in group.elements():
            once = act_on_field(group, group.compose(g1, g2), f)
            twice = act_on_field(group, g1, act_on_field(group, g2, f))
            np.testing.assert_array_equal(once.data, twice.data)


def test_group_action_axioms_on_actions():
    group = CyclicGroup(8)
    a = FactoredAction(grip=0.7, xy=[0.02, -0.01], z=0.03, theta=0.05)
    ident = act_on_action(group, group.identity, a)
    np.testing.assert_array_equal(ident.as_vector(), a.as_vector())
    for g1 in group.elements():
        for g2 in group.elements():
            once = act_on_action(group, group.compose(g1, g2), a)
            twice = act_on_action(group, g1, act_on_action(group, g2, a))
            np.testing.assert_allclose(once.as_vector(), twice.as_vector(), atol=1e-12)


def test_feature_field_channel_mismatch_raises():
    with pytest.raises(GroupError):
        FeatureField(np.zeros((3, 5, 5)), Representation.standard(8))
