"""Accuracy metrics, error maps, and latent-space principal component analysis."""

import numpy as np
import pytest

from chainfit.analysis import (
    alpha_block_vector,
    error_map,
    latent_block_matrix,
    latent_pca,
    pca,
    rigid_block_vector,
    rigid_vector_to_transform,
    rmsd,
    traverse_pc,
)
from chainfit.errors import DimensionMismatchError, EmptyInputError
from chainfit.rigid import gram_schmidt_rotation


def make_entry(v1=(1, 0, 0), v2=(0, 1, 0), translation=(0, 0, 0), alpha=(),
               error=None, whole=None):
    if whole is not None:
        latents = {"whole": {"mode_weights": list(whole)}}
    else:
        latents = {"chains": [{
            "mode_weights": list(alpha),
            "v1": list(v1),
            "v2": list(v2),
            "translation": list(translation),
            "pivot": [0.0, 0.0, 0.0],
        }]}
    return {"error": error, "latents": None if error else latents}


class TestRmsd:
    def test_identical_is_zero(self):
        coords = np.random.default_rng(0).uniform(size=(7, 3))
        assert rmsd(coords, coords) == 0.0

    def test_uniform_unit_shift(self):
        coords = np.random.default_rng(1).uniform(size=(5, 3))
        assert rmsd(coords, coords + [1.0, 0.0, 0.0]) == pytest.approx(1.0)

    def test_single_displaced_atom(self):
        coords = np.zeros((4, 3))
        moved = coords.copy()
        moved[2, 1] = 2.0
        assert rmsd(coords, moved) == pytest.approx(2.0 / np.sqrt(4))

    def test_accepts_structures(self, two_chain):
        assert rmsd(two_chain, two_chain.coords) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            rmsd(np.zeros((3, 3)), np.zeros((4, 3)))

    def test_metric_properties(self):
        rng = np.random.default_rng(2)
        a, b, c = rng.uniform(size=(3, 6, 3))
        assert rmsd(a, b) == pytest.approx(rmsd(b, a))
        assert rmsd(a, c) <= rmsd(a, b) + rmsd(b, c) + 1e-12
        assert rmsd(a, b) > 0


class TestErrorMap:
    def test_identical_sets_give_zero(self):
        coords = np.random.default_rng(3).uniform(size=(6, 3))
        result = error_map([coords, coords + 1], [coords, coords + 1])
        np.testing.assert_array_equal(result.per_atom, np.zeros(6))
        assert result.hist_counts.sum() == 6
        assert result.max_error == 0.0

    def test_compares_means_not_pairs(self):
        # GT conformations straddle X symmetrically; fits sit exactly at X:
        # identical means, so the map must vanish despite pairwise mismatch
        base = np.random.default_rng(4).uniform(size=(5, 3))
        wobble = np.random.default_rng(5).normal(size=(5, 3))
        result = error_map([base + wobble, base - wobble], [base, base])
        np.testing.assert_allclose(result.per_atom, np.zeros(5), atol=1e-14)

    def test_localized_error_and_histogram(self):
        base = np.zeros((8, 3))
        fitted = base.copy()
        fitted[3, 0] = 0.6
        result = error_map([base], [fitted])
        expected = np.zeros(8)
        expected[3] = 0.6
        np.testing.assert_allclose(result.per_atom, expected, atol=1e-15)
        np.testing.assert_allclose(result.bin_edges, [0.0, 0.5, 1.0])
        np.testing.assert_array_equal(result.hist_counts, [7, 1])
        assert result.max_error == pytest.approx(0.6)

    def test_order_within_sets_is_irrelevant(self):
        rng = np.random.default_rng(6)
        gts = [rng.uniform(size=(4, 3)) for _ in range(3)]
        fits = [rng.uniform(size=(4, 3)) for _ in range(3)]
        forward = error_map(gts, fits)
        shuffled = error_map(gts[::-1], fits)
        np.testing.assert_allclose(shuffled.per_atom, forward.per_atom, atol=1e-14)

    def test_histogram_counts_every_atom(self):
        rng = np.random.default_rng(7)
        gts = [rng.uniform(-3, 3, size=(20, 3))]
        fits = [rng.uniform(-3, 3, size=(20, 3))]
        result = error_map(gts, fits)
        assert result.hist_counts.sum() == 20
        assert np.all(np.diff(result.bin_edges) == pytest.approx(0.5))

    def test_empty_inputs(self):
        coords = np.zeros((3, 3))
        with pytest.raises(EmptyInputError):
            error_map([], [coords])
        with pytest.raises(EmptyInputError):
            error_map([coords], [])

    def test_mismatches(self):
        coords = np.zeros((3, 3))
        with pytest.raises(DimensionMismatchError):
            error_map([coords, coords], [coords])
        with pytest.raises(DimensionMismatchError):
            error_map([coords], [np.zeros((4, 3))])


class TestPca:
    def test_one_dimensional_cloud(self):
        rng = np.random.default_rng(8)
        direction = rng.normal(size=5)
        direction /= np.linalg.norm(direction)
        samples = rng.normal(size=(200, 1)) * direction
        result = pca(samples)
        assert result.explained_variance_pct[0] == pytest.approx(100.0, abs=1e-9)
        assert abs(result.components[:, 0] @ direction) == pytest.approx(1.0)

    def test_isotropic_cloud_splits_variance(self):
        samples = np.random.default_rng(9).normal(size=(100_000, 2))
        result = pca(samples)
        np.testing.assert_allclose(result.explained_variance_pct, [50.0, 50.0],
                                   atol=1.0)

    def test_full_reconstruction(self):
        samples = np.random.default_rng(10).normal(size=(50, 4))
        result = pca(samples)
        rebuilt = result.projected @ result.components.T + result.mean
        np.testing.assert_allclose(rebuilt, samples, atol=1e-8)

    def test_components_orthonormal(self):
        samples = np.random.default_rng(11).normal(size=(40, 6))
        result = pca(samples)
        gram = result.components.T @ result.components
        np.testing.assert_allclose(gram, np.eye(6), atol=1e-10)

    def test_percentages_well_formed(self):
        samples = np.random.default_rng(12).normal(size=(30, 5)) * [5, 3, 2, 1, 0.5]
        pct = pca(samples).explained_variance_pct
        assert np.all(np.diff(pct) <= 1e-12)
        assert np.all((pct >= 0) & (pct <= 100))
        assert pct.sum() == pytest.approx(100.0)

    def test_zero_variance_warns(self):
        samples = np.ones((5, 3))
        with pytest.warns(UserWarning):
            result = pca(samples)
        np.testing.assert_array_equal(result.projected, np.zeros((5, 3)))

    def test_constant_column_gets_zero_share(self):
        rng = np.random.default_rng(13)
        samples = rng.normal(size=(60, 3))
        samples[:, 2] = 4.0
        result = pca(samples)
        assert result.explained_variance_pct[-1] == pytest.approx(0.0, abs=1e-12)
        assert abs(result.components[2, -1]) == pytest.approx(1.0, abs=1e-10)

    def test_truncation(self):
        samples = np.random.default_rng(14).normal(size=(20, 5))
        result = pca(samples, n_components=2)
        assert result.components.shape == (5, 2)
        assert result.projected.shape == (20, 2)
        assert result.explained_variance_pct.shape == (2,)

    def test_input_validation(self):
        with pytest.raises(EmptyInputError):
            pca(np.zeros((1, 3)))
        with pytest.raises(ValueError):
            pca(np.zeros(5))


class TestLatentBlocks:
    def test_rigid_vector_layout(self):
        entry = make_entry(v1=(2.0, 0.0, 0.0), v2=(1.0, 3.0, 0.0),
                           translation=(0.5, -1.0, 2.0))
        vector = rigid_block_vector(entry["latents"], 0)
        rotation = gram_schmidt_rotation(np.array([2.0, 0.0, 0.0]),
                                         np.array([1.0, 3.0, 0.0]))
        np.testing.assert_array_equal(vector[:9], rotation.reshape(-1))
        np.testing.assert_array_equal(vector[9:], [0.5, -1.0, 2.0])

    def test_alpha_vector(self):
        entry = make_entry(alpha=(0.1, -0.2, 0.3))
        np.testing.assert_array_equal(alpha_block_vector(entry["latents"], 0),
                                      [0.1, -0.2, 0.3])

    def test_failed_entries_skipped(self):
        entries = [make_entry(translation=(1, 0, 0)),
                   make_entry(error="non-finite loss at iteration 3"),
                   make_entry(translation=(2, 0, 0))]
        matrix = latent_block_matrix(entries, "rigid", 0)
        assert matrix.shape == (2, 12)
        np.testing.assert_array_equal(matrix[:, 9], [1.0, 2.0])

    def test_no_successful_entries(self):
        entries = [make_entry(error="bad")]
        with pytest.raises(EmptyInputError):
            latent_block_matrix(entries, "rigid", 0)

    def test_whole_structure_latents_rejected(self):
        entries = [make_entry(whole=(0.1, 0.2))]
        with pytest.raises(EmptyInputError):
            latent_block_matrix(entries, "alpha", 0)

    def test_chain_index_out_of_range(self):
        entries = [make_entry()]
        with pytest.raises(DimensionMismatchError):
            latent_block_matrix(entries, "rigid", 1)

    def test_unknown_block(self):
        with pytest.raises(ValueError):
            latent_block_matrix([make_entry()], "pose", 0)

    def test_latent_pca_recovers_translation_axis(self):
        shifts = np.linspace(-1.0, 1.0, 9)
        entries = [make_entry(translation=(s, 0.0, 0.0)) for s in shifts]
        result = latent_pca(entries, "rigid", chain_index=0)
        assert result.explained_variance_pct[0] == pytest.approx(100.0)
        assert abs(result.components[9, 0]) == pytest.approx(1.0)
        scores = result.projected[:, 0]
        corr = np.corrcoef(scores, shifts)[0, 1]
        assert abs(corr) == pytest.approx(1.0, abs=1e-12)


class TestTraversePc:
    def make_result(self):
        rng = np.random.default_rng(15)
        samples = rng.normal(size=(101, 4)) * [3.0, 1.0, 0.5, 0.1] + [1, 2, 3, 4]
        return pca(samples)

    def test_three_quantiles_three_vectors(self):
        result = self.make_result()
        vectors = traverse_pc(result, 0, [0.05, 0.5, 0.95])
        assert len(vectors) == 3
        assert all(v.shape == (4,) for v in vectors)

    def test_median_of_symmetric_scores_is_mean(self):
        base = pca(np.array([[-2.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [2.0, 0.0]]))
        (vector,) = traverse_pc(base, 0, [0.5])
        np.testing.assert_allclose(vector, base.mean, atol=1e-14)

    def test_moves_only_along_component(self):
        result = self.make_result()
        low, high = traverse_pc(result, 1, [0.1, 0.9])
        delta = high - low
        component = result.components[:, 1]
        residual = delta - (delta @ component) * component
        assert np.linalg.norm(residual) < 1e-12
        assert delta @ component > 0  # quantiles increase along the component

    def test_bad_component_index(self):
        result = self.make_result()
        with pytest.raises(IndexError):
            traverse_pc(result, 4, [0.5])
        with pytest.raises(IndexError):
            traverse_pc(result, -1, [0.5])

    def test_bad_quantiles(self):
        result = self.make_result()
        for q in (0.0, 1.0, 1.5, -0.2):
            with pytest.raises(ValueError):
                traverse_pc(result, 0, [q])


class TestRigidVectorToTransform:
    def test_round_trip(self):
        rng = np.random.default_rng(16)
        rotation = gram_schmidt_rotation(rng.normal(size=3), rng.normal(size=3))
        translation = rng.uniform(-2, 2, size=3)
        pivot = rng.uniform(-5, 5, size=3)
        vector = np.concatenate([rotation.reshape(-1), translation])
        transform = rigid_vector_to_transform(vector, pivot)
        np.testing.assert_allclose(transform.rotation, rotation, atol=1e-12)
        np.testing.assert_allclose(transform.translation, translation, atol=1e-15)
        np.testing.assert_allclose(transform.pivot, pivot, atol=1e-15)

    def test_projects_back_to_rotation(self):
        rng = np.random.default_rng(17)
        rotation = gram_schmidt_rotation(rng.normal(size=3), rng.normal(size=3))
        vector = np.concatenate([
            (rotation + 0.05 * rng.normal(size=(3, 3))).reshape(-1),
            np.zeros(3),
        ])
        transform = rigid_vector_to_transform(vector, np.zeros(3))
        gram = transform.rotation.T @ transform.rotation
        np.testing.assert_allclose(gram, np.eye(3), atol=1e-10)
        assert np.linalg.det(transform.rotation) == pytest.approx(1.0, abs=1e-10)
