"""Synthetic dataset generator: conformational sampling, poses, and persistence."""

import json

import numpy as np
import pytest
from scipy import stats

from chainfit.datagen import (
    GMMComponent,
    HeterogeneityRecipe,
    generate_dataset,
    generate_morph_dataset,
    gmm_sample,
    load_recipe,
    random_pose,
    rotation_xyz,
    sample_chain_rotation,
    sample_conformation,
)
from chainfit.errors import CapacityError, ConfigError, DimensionMismatchError
from chainfit.imaging import ImagingConfig, load_stack, render_clean
from chainfit.nma import ENMConfig, chain_bases
from chainfit.rigid import ChainTransform, apply_chain_transform, compose_structure
from chainfit.structure import center_of_mass


def tiny_recipe(**overrides):
    defaults = dict(
        num_modes=3,
        gmm=(GMMComponent(1.0, 0.3, 0.1),),
        rotation_half_angles_deg=(4.0, 4.0, 4.0),
        train_count=4,
        val_count=1,
        test_count=1,
        snr_db=-5.0,
        seed=3,
    )
    defaults.update(overrides)
    return HeterogeneityRecipe(**defaults)


class TestRecipe:
    def test_validation(self):
        with pytest.raises(ConfigError):
            tiny_recipe(num_modes=0)
        with pytest.raises(ConfigError):
            tiny_recipe(gmm=())
        with pytest.raises(ConfigError):
            tiny_recipe(gmm=(GMMComponent(0.6, 0.0, 0.1),
                             GMMComponent(0.6, 1.0, 0.1)))
        with pytest.raises(ConfigError):
            tiny_recipe(rotation_half_angles_deg=(1.0, 1.0))
        with pytest.raises(ConfigError):
            tiny_recipe(rotation_half_angles_deg=(1.0, -1.0, 1.0))
        with pytest.raises(ConfigError):
            tiny_recipe(train_count=0)
        with pytest.raises(ConfigError):
            tiny_recipe(seed=-1)
        with pytest.raises(ConfigError):
            GMMComponent(0.5, 0.0, 0.0)

    def test_json_round_trip(self, tmp_path):
        recipe = HeterogeneityRecipe(
            num_modes=7,
            gmm=(GMMComponent(0.25, -1.0, 0.5), GMMComponent(0.75, 2.0, 0.3)),
            rotation_half_angles_deg=(1.0, 2.0, 3.0),
            train_count=10, val_count=2, test_count=3,
            snr_db=None, seed=42,
        )
        assert HeterogeneityRecipe.from_json_dict(recipe.to_json_dict()) == recipe
        path = tmp_path / "recipe.json"
        path.write_text(json.dumps(recipe.to_json_dict()))
        assert load_recipe(path) == recipe

    def test_partial_json_uses_defaults(self):
        recipe = HeterogeneityRecipe.from_json_dict({"num_modes": 4})
        assert recipe.num_modes == 4
        assert recipe.train_count == HeterogeneityRecipe().train_count

    def test_invalid_json_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_recipe(path)


class TestMixtureSampling:
    def test_matches_analytic_cdf(self):
        recipe = HeterogeneityRecipe()
        draws = gmm_sample(recipe, np.random.default_rng(0), 100_000)

        def cdf(x):
            return (0.5 * stats.norm.cdf(x, 0.0, 0.25)
                    + 0.5 * stats.norm.cdf(x, 2.5, 0.25))

        result = stats.kstest(draws, cdf)
        assert result.statistic < 0.01

    def test_component_frequencies(self):
        recipe = HeterogeneityRecipe()
        draws = gmm_sample(recipe, np.random.default_rng(1), 100_000)
        # the components sit 10 sigma apart, so 1.25 classifies essentially
        # every draw correctly
        low = int(np.count_nonzero(draws < 1.25))
        assert abs(low - 50_000) < 3 * np.sqrt(100_000 * 0.25)


class TestRotations:
    def test_rotation_xyz_single_axes(self):
        quarter = np.pi / 2
        np.testing.assert_allclose(
            rotation_xyz([quarter, 0, 0]) @ [0, 1, 0], [0, 0, 1], atol=1e-15)
        np.testing.assert_allclose(
            rotation_xyz([0, quarter, 0]) @ [0, 0, 1], [1, 0, 0], atol=1e-15)
        np.testing.assert_allclose(
            rotation_xyz([0, 0, quarter]) @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    def test_rotation_xyz_composition_order(self):
        angles = np.array([0.3, -0.2, 0.7])
        composed = (rotation_xyz([0, 0, angles[2]])
                    @ rotation_xyz([0, angles[1], 0])
                    @ rotation_xyz([angles[0], 0, 0]))
        np.testing.assert_allclose(rotation_xyz(angles), composed, atol=1e-15)

    def test_sampled_angles_respect_half_angles(self):
        half = (3.0, 7.0, 0.0)
        rng = np.random.default_rng(2)
        for _ in range(200):
            angles, rotation = sample_chain_rotation(half, rng)
            assert np.all(np.abs(np.degrees(angles)) <= np.asarray(half) + 1e-12)
            assert angles[2] == 0.0
            np.testing.assert_allclose(rotation, rotation_xyz(angles), atol=0)

    def test_random_pose_is_valid(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            rotation, translation = random_pose(rng, 64)
            np.testing.assert_allclose(rotation.T @ rotation, np.eye(3), atol=1e-10)
            assert np.linalg.det(rotation) == pytest.approx(1.0, abs=1e-10)
            assert np.all(np.abs(translation) <= 64 / 16.0)


class TestSampleConformation:
    def test_degenerate_recipe_reproduces_reference(self, two_chain, two_chain_bases):
        recipe = tiny_recipe(gmm=(GMMComponent(1.0, 0.0, 1e-15),),
                             rotation_half_angles_deg=(0.0, 0.0, 0.0))
        conformation, latents = sample_conformation(
            two_chain, two_chain_bases, recipe, np.random.default_rng(4))
        np.testing.assert_allclose(conformation.coords, two_chain.coords, atol=1e-10)
        for transform in latents.transforms:
            np.testing.assert_array_equal(transform.rotation, np.eye(3))

    def test_latents_reproduce_conformation(self, two_chain, two_chain_bases):
        recipe = tiny_recipe()
        conformation, latents = sample_conformation(
            two_chain, two_chain_bases, recipe, np.random.default_rng(5))
        rebuilt = compose_structure(two_chain, two_chain_bases, latents)
        np.testing.assert_allclose(rebuilt.coords, conformation.coords, atol=1e-12)

    def test_mode_weight_scale_and_support(self, two_chain, two_chain_bases):
        recipe = tiny_recipe(gmm=(GMMComponent(1.0, 1.0, 1e-15),))
        _, latents = sample_conformation(
            two_chain, two_chain_bases, recipe, np.random.default_rng(6))
        expected = np.sqrt(two_chain.n_atoms / recipe.num_modes)
        for alpha in latents.mode_weights:
            np.testing.assert_allclose(alpha[:3], expected, rtol=1e-9)
            np.testing.assert_array_equal(alpha[3:], 0.0)

    def test_capacity_error(self, two_chain, two_chain_bases):
        recipe = tiny_recipe(num_modes=6)  # bases hold 5 modes per chain
        with pytest.raises(CapacityError):
            sample_conformation(two_chain, two_chain_bases, recipe,
                                np.random.default_rng(7))


class TestGenerateDataset:
    imaging = ImagingConfig(image_size=32, pixel_size=1.5, blob_sigma=1.2,
                            window_sigmas=5.0)

    def test_splits_and_metadata(self, two_chain):
        stacks = generate_dataset(two_chain, tiny_recipe(), self.imaging, None)
        assert set(stacks) == {"train", "val", "test"}
        train = stacks["train"]
        assert train.n_images == 4
        assert stacks["val"].n_images == 1
        assert train.images.dtype == np.float32
        assert len(train.gt_latents) == 4
        assert train.gt_latents[0].pose_rotation is not None
        # the recipe's SNR wins over whatever the imaging config carried
        assert train.config.snr_db == -5.0

    def test_recipe_snr_none_gives_clean_images(self, two_chain, two_chain_bases):
        recipe = tiny_recipe(snr_db=None, train_count=2)
        stacks = generate_dataset(two_chain, recipe, self.imaging, None,
                                  enm=ENMConfig(num_modes=5))
        stack = stacks["train"]
        assert stack.config.snr_db is None
        latents = stack.gt_latents[0]
        conformation = compose_structure(two_chain, two_chain_bases, latents)
        clean = render_clean(conformation,
                             (latents.pose_rotation, latents.pose_translation),
                             stack.config)
        rel = (np.linalg.norm(clean - stack.images[0])
               / np.linalg.norm(stack.images[0]))
        assert rel < 1e-6

    def test_output_layout(self, two_chain, tmp_path):
        out = tmp_path / "dataset"
        generate_dataset(two_chain, tiny_recipe(), self.imaging, out)
        for split in ("train", "val", "test"):
            assert (out / split / "meta.json").exists()
            assert (out / split / "images.f32").exists()
            assert (out / split / "poses.json").exists()
            assert (out / split / "gt_latents.json").exists()
        assert (out / "gt_reference.pdb").exists()
        assert (out / "gt_bases" / "chain_A.basis").exists()
        assert (out / "gt_bases" / "chain_B.basis").exists()
        saved = load_recipe(out / "recipe.json")
        assert saved == tiny_recipe()

    def test_regeneration_is_byte_identical(self, two_chain, tmp_path):
        first = tmp_path / "a"
        second = tmp_path / "b"
        generate_dataset(two_chain, tiny_recipe(), self.imaging, first)
        generate_dataset(two_chain, tiny_recipe(), self.imaging, second)
        for split in ("train", "val", "test"):
            assert ((first / split / "images.f32").read_bytes()
                    == (second / split / "images.f32").read_bytes())
            assert ((first / split / "poses.json").read_bytes()
                    == (second / split / "poses.json").read_bytes())

    def test_seed_changes_images(self, two_chain):
        base = generate_dataset(two_chain, tiny_recipe(), self.imaging, None)
        other = generate_dataset(two_chain, tiny_recipe(seed=4), self.imaging, None)
        assert not np.array_equal(base["train"].images, other["train"].images)

    def test_undersized_mode_basis_rejected(self, two_chain):
        with pytest.raises(ConfigError):
            generate_dataset(two_chain, tiny_recipe(num_modes=3), self.imaging,
                             None, enm=ENMConfig(num_modes=2))


class TestMorphDataset:
    imaging = ImagingConfig(image_size=32, pixel_size=1.5, blob_sigma=1.2,
                            window_sigmas=5.0)

    def make_endpoints(self, two_chain):
        pivot = center_of_mass(two_chain, "B")
        transform = ChainTransform.from_rotation(
            rotation_xyz(np.radians([0.0, 0.0, 15.0])), np.zeros(3), pivot)
        start, stop = two_chain.chain_ranges[two_chain.chain_ids.index("B")]
        coords = two_chain.coords.copy()
        coords[start:stop] = apply_chain_transform(coords[start:stop], transform)
        return two_chain, two_chain.with_coords(coords)

    def test_schedule_and_rerender(self, two_chain):
        conf_a, conf_b = self.make_endpoints(two_chain)
        stack = generate_morph_dataset(conf_a, conf_b, 3, self.imaging, None,
                                       images_per_step=2, seed=5)
        assert stack.n_images == 6
        np.testing.assert_allclose(stack.morph_s, [0, 0, 0.5, 0.5, 1, 1], atol=0)
        midpoint = conf_a.with_coords(0.5 * (conf_a.coords + conf_b.coords))
        for index, conformation in ((0, conf_a), (3, midpoint), (5, conf_b)):
            pose = (stack.rotations[index], stack.translations[index])
            clean = render_clean(conformation, pose, self.imaging)
            rel = (np.linalg.norm(clean - stack.images[index])
                   / np.linalg.norm(stack.images[index]))
            assert rel < 1e-6

    def test_deterministic(self, two_chain):
        conf_a, conf_b = self.make_endpoints(two_chain)
        first = generate_morph_dataset(conf_a, conf_b, 2, self.imaging, None, seed=6)
        second = generate_morph_dataset(conf_a, conf_b, 2, self.imaging, None, seed=6)
        np.testing.assert_array_equal(first.images, second.images)

    def test_saved_stack_keeps_schedule(self, two_chain, tmp_path):
        conf_a, conf_b = self.make_endpoints(two_chain)
        out = tmp_path / "morph"
        stack = generate_morph_dataset(conf_a, conf_b, 4, self.imaging, out, seed=7)
        loaded = load_stack(out)
        np.testing.assert_allclose(loaded.morph_s, stack.morph_s, atol=0)

    def test_validation(self, two_chain):
        conf_a, conf_b = self.make_endpoints(two_chain)
        with pytest.raises(ConfigError):
            generate_morph_dataset(conf_a, conf_b, 1, self.imaging, None)
        with pytest.raises(ConfigError):
            generate_morph_dataset(conf_a, conf_b, 2, self.imaging, None,
                                   images_per_step=0)
        from chainfit.toy import toy_structure

        smaller = toy_structure((12, 9), seed=2)
        with pytest.raises(DimensionMismatchError):
            generate_morph_dataset(conf_a, smaller, 2, self.imaging, None)
