"""Rotation construction, per-chain transforms, and structure composition."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainfit.datagen import sample_conformation, HeterogeneityRecipe, GMMComponent
from chainfit.errors import DegenerateInputError, DimensionMismatchError
from chainfit.nma import ENMConfig, chain_bases
from chainfit.rigid import (
    ChainTransform,
    LatentState,
    apply_chain_transform,
    compose_structure,
    gram_schmidt_batch,
    gram_schmidt_backward,
    gram_schmidt_rotation,
    identity_latents,
    project_to_rotation,
    rotation_angle_deg,
)
from chainfit.structure import center_of_mass


class TestGramSchmidt:
    def test_canonical_frame_gives_identity(self):
        rotation = gram_schmidt_rotation([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        np.testing.assert_array_equal(rotation, np.eye(3))

    def test_quarter_turn_about_z(self):
        rotation = gram_schmidt_rotation([0.0, 1.0, 0.0], [-1.0, 0.0, 0.0])
        expected = np.array([
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
        expected[:, 1] *= -1.0  # columns are (e2, -e1, e3)
        np.testing.assert_array_equal(rotation, expected)

    def test_scale_and_shear_invariance(self):
        rotation = gram_schmidt_rotation([2.0, 0.0, 0.0], [3.0, 1.0, 0.0])
        np.testing.assert_array_equal(rotation, np.eye(3))

    def test_degenerate_inputs_rejected(self):
        with pytest.raises(DegenerateInputError):
            gram_schmidt_rotation([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
        with pytest.raises(DegenerateInputError):
            gram_schmidt_rotation([1.0, 0.0, 0.0], [2.0, 0.0, 0.0])

    def test_random_inputs_give_proper_rotations(self):
        rng = np.random.default_rng(0)
        v1 = rng.normal(size=(10_000, 3))
        v2 = rng.normal(size=(10_000, 3))
        rotations = gram_schmidt_batch(v1, v2)
        gram = np.einsum("bij,bik->bjk", rotations, rotations)
        assert np.max(np.abs(gram - np.eye(3))) < 1e-10
        assert np.max(np.abs(np.linalg.det(rotations) - 1.0)) < 1e-10

    def test_batch_matches_single(self):
        rng = np.random.default_rng(1)
        v1 = rng.normal(size=(8, 3))
        v2 = rng.normal(size=(8, 3))
        batch = gram_schmidt_batch(v1, v2)
        for row in range(8):
            np.testing.assert_allclose(
                batch[row], gram_schmidt_rotation(v1[row], v2[row]), atol=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=6, max_size=6))
    def test_first_column_follows_v1(self, values):
        v1 = np.asarray(values[:3])
        v2 = np.asarray(values[3:])
        if np.linalg.norm(v1) < 1e-3:
            return
        residual = v2 - (v2 @ v1) * v1 / (v1 @ v1)
        if np.linalg.norm(residual) < 1e-3:
            return
        rotation = gram_schmidt_rotation(v1, v2)
        np.testing.assert_allclose(
            rotation[:, 0], v1 / np.linalg.norm(v1), atol=1e-10)
        assert abs(rotation[:, 1] @ rotation[:, 0]) < 1e-10

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        v1 = rng.normal(size=(4, 3))
        v2 = rng.normal(size=(4, 3))
        upstream = rng.normal(size=(4, 3, 3))
        grad_v1, grad_v2 = gram_schmidt_backward(v1, v2, upstream)
        h = 1e-6
        for b in range(4):
            for j in range(3):
                for vec, grad in ((v1, grad_v1), (v2, grad_v2)):
                    plus = vec.copy()
                    plus[b, j] += h
                    minus = vec.copy()
                    minus[b, j] -= h
                    if vec is v1:
                        f_plus = gram_schmidt_batch(plus, v2)[b]
                        f_minus = gram_schmidt_batch(minus, v2)[b]
                    else:
                        f_plus = gram_schmidt_batch(v1, plus)[b]
                        f_minus = gram_schmidt_batch(v1, minus)[b]
                    fd = np.sum(upstream[b] * (f_plus - f_minus)) / (2 * h)
                    assert grad[b, j] == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestChainTransform:
    def test_identity_leaves_coords(self):
        coords = np.random.default_rng(3).normal(size=(6, 3))
        transform = ChainTransform.identity(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(apply_chain_transform(coords, transform), coords)

    def test_rotation_fixes_pivot(self):
        rng = np.random.default_rng(4)
        coords = rng.normal(size=(10, 3))
        pivot = coords.mean(axis=0)
        rotation = gram_schmidt_rotation(rng.normal(size=3), rng.normal(size=3))
        transform = ChainTransform.from_rotation(rotation, np.zeros(3), pivot)
        moved = apply_chain_transform(coords, transform)
        np.testing.assert_allclose(moved.mean(axis=0), pivot, atol=1e-12)
        np.testing.assert_allclose(
            apply_chain_transform(pivot[None], transform)[0], pivot, atol=1e-12)

    def test_pure_translation(self):
        coords = np.random.default_rng(5).normal(size=(4, 3))
        transform = ChainTransform.from_rotation(
            np.eye(3), np.array([1.0, 2.0, 3.0]), np.zeros(3))
        np.testing.assert_allclose(
            apply_chain_transform(coords, transform),
            coords + np.array([1.0, 2.0, 3.0]), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_pairwise_distances_preserved(self, seed):
        rng = np.random.default_rng(seed)
        coords = rng.normal(scale=10.0, size=(8, 3))
        transform = ChainTransform.from_vectors(
            rng.normal(size=3), rng.normal(size=3),
            rng.normal(size=3), rng.normal(size=3))
        moved = apply_chain_transform(coords, transform)
        before = np.linalg.norm(coords[:, None] - coords[None, :], axis=-1)
        after = np.linalg.norm(moved[:, None] - moved[None, :], axis=-1)
        np.testing.assert_allclose(after, before, atol=1e-9)

    def test_invalid_rotation_rejected(self):
        with pytest.raises(ValueError):
            ChainTransform.from_rotation(np.eye(3) * 2.0, np.zeros(3), np.zeros(3))


class TestComposeStructure:
    def test_identity_latents_reproduce_reference(self, two_chain, two_chain_bases):
        latents = identity_latents(two_chain, two_chain_bases)
        composed = compose_structure(two_chain, two_chain_bases, latents)
        np.testing.assert_array_equal(composed.coords, two_chain.coords)

    def test_untouched_chain_is_bit_identical(self, two_chain, two_chain_bases):
        rng = np.random.default_rng(6)
        weights = [rng.normal(size=5), np.zeros(5)]
        transforms = [
            ChainTransform.from_vectors(
                rng.normal(size=3), rng.normal(size=3), rng.normal(size=3),
                center_of_mass(two_chain, "A")),
            ChainTransform.identity(center_of_mass(two_chain, "B")),
        ]
        latents = LatentState(tuple(weights), tuple(transforms))
        composed = compose_structure(two_chain, two_chain_bases, latents)
        sl = two_chain.chain_slice("B")
        np.testing.assert_array_equal(composed.coords[sl], two_chain.coords[sl])
        assert np.any(composed.coords[two_chain.chain_slice("A")]
                      != two_chain.coords[two_chain.chain_slice("A")])

    def test_generator_latents_round_trip(self, two_chain):
        enm = ENMConfig(num_modes=5)
        bases = chain_bases(two_chain, enm)
        recipe = HeterogeneityRecipe(
            num_modes=5,
            gmm=(GMMComponent(1.0, 0.5, 0.2),),
            rotation_half_angles_deg=(6.0, 6.0, 6.0),
            train_count=1, val_count=1, test_count=1, snr_db=None, seed=0)
        rng = np.random.default_rng(10)
        conformation, latents = sample_conformation(two_chain, bases, recipe, rng)
        rebuilt = compose_structure(two_chain, bases, latents)
        delta = rebuilt.coords - conformation.coords
        assert float(np.sqrt(np.mean(np.sum(delta**2, axis=1)))) < 1e-9

    def test_rotation_equivariance(self, two_chain, two_chain_bases):
        rng = np.random.default_rng(7)
        q_rot = gram_schmidt_rotation(rng.normal(size=3), rng.normal(size=3))
        weights = tuple(np.zeros(5) for _ in two_chain.chain_ids)
        transforms = []
        rotated_transforms = []
        for cid in two_chain.chain_ids:
            pivot = center_of_mass(two_chain, cid)
            rotation = gram_schmidt_rotation(rng.normal(size=3), rng.normal(size=3))
            translation = rng.normal(size=3)
            transforms.append(ChainTransform.from_rotation(rotation, translation, pivot))
            rotated_transforms.append(ChainTransform.from_rotation(
                q_rot @ rotation @ q_rot.T, q_rot @ translation, q_rot @ pivot))
        rotated_reference = two_chain.with_coords(two_chain.coords @ q_rot.T)
        rotated_bases = chain_bases(rotated_reference, ENMConfig(num_modes=5))
        direct = compose_structure(
            two_chain, two_chain_bases, LatentState(weights, tuple(transforms)))
        conjugated = compose_structure(
            rotated_reference, rotated_bases,
            LatentState(weights, tuple(rotated_transforms)))
        np.testing.assert_allclose(
            conjugated.coords, direct.coords @ q_rot.T, atol=1e-8)

    def test_dimension_mismatch_names_chain(self, two_chain, two_chain_bases):
        weights = [np.zeros(3), np.zeros(5)]  # wrong K on chain A
        transforms = [ChainTransform.identity(center_of_mass(two_chain, cid))
                      for cid in two_chain.chain_ids]
        latents = LatentState(tuple(weights), tuple(transforms))
        with pytest.raises(DimensionMismatchError, match="'A'"):
            compose_structure(two_chain, two_chain_bases, latents)

    def test_wrong_chain_count_rejected(self, two_chain, two_chain_bases):
        latents = LatentState(
            (np.zeros(5),),
            (ChainTransform.identity(center_of_mass(two_chain, "A")),))
        with pytest.raises(DimensionMismatchError):
            compose_structure(two_chain, two_chain_bases, latents)


class TestRotationUtilities:
    def test_project_to_rotation_recovers_member(self):
        rng = np.random.default_rng(8)
        rotation = gram_schmidt_rotation(rng.normal(size=3), rng.normal(size=3))
        np.testing.assert_allclose(project_to_rotation(rotation), rotation, atol=1e-12)

    def test_project_to_rotation_from_noisy_matrix(self):
        rng = np.random.default_rng(9)
        rotation = gram_schmidt_rotation(rng.normal(size=3), rng.normal(size=3))
        noisy = rotation + 0.05 * rng.normal(size=(3, 3))
        projected = project_to_rotation(noisy)
        np.testing.assert_allclose(projected.T @ projected, np.eye(3), atol=1e-12)
        assert np.linalg.det(projected) == pytest.approx(1.0, abs=1e-12)

    def test_rotation_angle(self):
        assert rotation_angle_deg(np.eye(3)) == pytest.approx(0.0, abs=1e-12)
        quarter = gram_schmidt_rotation([0.0, 1.0, 0.0], [-1.0, 0.0, 0.0])
        assert rotation_angle_deg(quarter) == pytest.approx(90.0, abs=1e-9)


class TestLatentStateSerialization:
    def test_json_round_trip(self, two_chain, two_chain_bases):
        rng = np.random.default_rng(10)
        weights = tuple(rng.normal(size=5) for _ in two_chain.chain_ids)
        transforms = tuple(
            ChainTransform.from_vectors(
                rng.normal(size=3), rng.normal(size=3), rng.normal(size=3),
                center_of_mass(two_chain, cid))
            for cid in two_chain.chain_ids)
        pose_rotation = gram_schmidt_rotation(rng.normal(size=3), rng.normal(size=3))
        latents = LatentState(weights, transforms,
                              pose_rotation=pose_rotation,
                              pose_translation=np.array([1.5, -2.5]))
        rebuilt = LatentState.from_json_dict(latents.to_json_dict())
        composed_a = compose_structure(two_chain, two_chain_bases, latents)
        composed_b = compose_structure(two_chain, two_chain_bases, rebuilt)
        np.testing.assert_allclose(composed_b.coords, composed_a.coords, atol=1e-12)
        np.testing.assert_allclose(rebuilt.pose_rotation, pose_rotation, atol=1e-15)

    def test_pose_must_be_complete(self):
        with pytest.raises(ValueError):
            LatentState((), (), pose_rotation=np.eye(3), pose_translation=None)
