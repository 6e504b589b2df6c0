"""Data-module tests: binarization, k-fold, F1, manifests, synthetic corpus."""

import numpy as np
import pytest

from hicomex.data import (Manifest, Sample, SyntheticSpec, binarize_intensity,
                          f1_per_au, generate_synthetic,
                          kfold_subject_exclusive, load_samples, read_manifest,
                          read_gray_png, write_gray_png, write_manifest,
                          write_synthetic)
from hicomex.errors import ConfigError, DataError


class TestBinarize:
    @pytest.mark.parametrize("raw,expected", [(0, 0), (1, 0), (2, 1), (3, 1),
                                              (4, 1), (5, 1)])
    def test_threshold_at_two(self, raw, expected):
        assert binarize_intensity(raw) == expected

    @pytest.mark.parametrize("raw", [-1, 6, 17])
    def test_out_of_range(self, raw):
        with pytest.raises(DataError):
            binarize_intensity(raw)


def make_samples(subject_counts):
    samples = []
    for subject, count in subject_counts.items():
        for _ in range(count):
            samples.append(Sample(np.zeros((1, 4, 4)), np.zeros(2, dtype=int),
                                  np.zeros((3, 2)), subject))
    return samples


class TestKFold:
    def test_three_subjects_three_folds(self):
        samples = make_samples({"a": 2, "b": 3, "c": 1})
        splits = kfold_subject_exclusive(samples, k=3, seed=0)
        assert len(splits) == 3
        test_subjects = []
        for train, test in splits:
            subjects = {samples[i].subject_id for i in test}
            assert len(subjects) == 1
            test_subjects.append(next(iter(subjects)))
        assert sorted(test_subjects) == ["a", "b", "c"]

    def test_no_leakage_ever(self):
        samples = make_samples({f"s{i}": 2 + i % 3 for i in range(7)})
        for seed in range(30):
            for train, test in kfold_subject_exclusive(samples, k=3, seed=seed):
                train_subjects = {samples[i].subject_id for i in train}
                test_subjects = {samples[i].subject_id for i in test}
                assert not (train_subjects & test_subjects)
                assert len(train) + len(test) == len(samples)

    def test_41_subjects_fold_sizes(self):
        samples = make_samples({f"s{i:02d}": 1 for i in range(41)})
        splits = kfold_subject_exclusive(samples, k=3, seed=7)
        sizes = sorted(len(test) for _, test in splits)
        assert sizes == [13, 14, 14]

    def test_too_few_subjects(self):
        with pytest.raises(DataError):
            kfold_subject_exclusive(make_samples({"a": 5, "b": 5}), k=3, seed=0)


class TestF1:
    def test_perfect(self):
        labels = np.random.default_rng(0).integers(0, 2, (20, 4))
        per_au, macro = f1_per_au(labels, labels)
        assert np.allclose(per_au, 1.0) and macro == 1.0

    def test_hand_computed_counts(self):
        # TP=2, FP=1, FN=1 -> F1 = 4/6
        labels = np.array([[1], [1], [1], [0], [0]])
        preds = np.array([[1], [1], [0], [1], [0]])
        per_au, macro = f1_per_au(preds, labels)
        assert abs(per_au[0] - 2.0 / 3.0) <= 1e-12
        assert abs(macro - 2.0 / 3.0) <= 1e-12

    def test_zero_denominator_convention(self):
        preds = np.zeros((5, 2), dtype=int)
        labels = np.zeros((5, 2), dtype=int)
        per_au, macro = f1_per_au(preds, labels)
        assert np.array_equal(per_au, [0.0, 0.0]) and macro == 0.0

    def test_column_permutation_invariance(self):
        rng = np.random.default_rng(1)
        preds = rng.integers(0, 2, (30, 5))
        labels = rng.integers(0, 2, (30, 5))
        _, macro = f1_per_au(preds, labels)
        perm = rng.permutation(5)
        _, macro_p = f1_per_au(preds[:, perm], labels[:, perm])
        assert macro == macro_p


class TestSyntheticSpec:
    def test_default_valid(self):
        spec = SyntheticSpec()
        assert set(spec.independents) == {6, 10, 14, 17}

    def test_overlapping_groups_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(groups=((1, 2, 5), (5, 7, 9)))

    def test_exclusion_inside_group_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(groups=((1, 2, 5),), exclusions=((5, 12),))

    def test_group_outside_au_list_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(au_ids=(1, 2, 4), groups=((1, 2, 5),))


class TestGenerator:
    def test_exclusion_never_joint(self):
        spec = SyntheticSpec(n_samples=800, noise=0.0, image_size=32)
        _, samples = generate_synthetic(spec, seed=3)
        labels = np.stack([s.au_labels for s in samples])
        i12, i15 = spec.au_ids.index(12), spec.au_ids.index(15)
        assert int((labels[:, i12] & labels[:, i15]).sum()) == 0

    def test_group_cooccurrence_rate(self):
        spec = SyntheticSpec(n_samples=10000, image_size=16, noise=0.0)
        _, samples = generate_synthetic(spec, seed=4)
        labels = np.stack([s.au_labels for s in samples])
        i1, i2 = spec.au_ids.index(1), spec.au_ids.index(2)
        rate = (labels[:, i1] & labels[:, i2]).mean()
        assert abs(rate - spec.group_prob) <= 0.03

    def test_marginals_within_3sigma(self):
        spec = SyntheticSpec(n_samples=4000, image_size=16, noise=0.0)
        _, samples = generate_synthetic(spec, seed=5)
        labels = np.stack([s.au_labels for s in samples])
        n = labels.shape[0]
        expected = {au: spec.group_prob for g in spec.groups for au in g}
        expected.update({spec.exclusions[0][0]: spec.exclusion_probs[0],
                         spec.exclusions[0][1]: spec.exclusion_probs[1]})
        expected.update({au: spec.independent_prob for au in spec.independents})
        for j, au in enumerate(spec.au_ids):
            p = expected[au]
            sigma = np.sqrt(p * (1 - p) / n)
            assert abs(labels[:, j].mean() - p) <= 3 * sigma, f"AU{au}"

    def test_zero_noise_single_subject_deterministic_pixels(self):
        spec = SyntheticSpec(n_samples=300, n_subjects=1, noise=0.0,
                             gain_jitter=0.0, image_size=32)
        _, samples = generate_synthetic(spec, seed=6)
        by_labels = {}
        pairs = 0
        for s in samples:
            key = tuple(s.au_labels)
            if key in by_labels:
                assert np.array_equal(s.image, by_labels[key])
                pairs += 1
            else:
                by_labels[key] = s.image
        assert pairs > 0  # the check actually fired

    def test_same_seed_same_bytes(self, tmp_path):
        spec = SyntheticSpec(n_samples=20, image_size=32)
        for run in ("a", "b"):
            manifest, samples = generate_synthetic(spec, seed=9)
            write_synthetic(manifest, samples, tmp_path / run)
        left = (tmp_path / "a" / "manifest.csv").read_bytes()
        right = (tmp_path / "b" / "manifest.csv").read_bytes()
        assert left == right


class TestManifestRoundTrip:
    def test_f64_round_trip_identical(self, tmp_path):
        spec = SyntheticSpec(n_samples=12, image_size=32)
        manifest, samples = generate_synthetic(spec, seed=7)
        write_synthetic(manifest, samples, tmp_path)
        loaded_manifest = read_manifest(tmp_path / "manifest.csv")
        assert loaded_manifest.au_ids == manifest.au_ids
        assert loaded_manifest.label_mode == "binary"
        loaded = load_samples(loaded_manifest, tmp_path)
        for orig, back in zip(samples, loaded):
            assert np.array_equal(orig.image, back.image)
            assert np.array_equal(orig.au_labels, back.au_labels)
            assert np.array_equal(orig.landmarks, back.landmarks)
            assert orig.subject_id == back.subject_id

    def test_png_round_trip_identical(self, tmp_path):
        spec = SyntheticSpec(n_samples=6, image_size=32)
        manifest, samples = generate_synthetic(spec, seed=8, image_format="png")
        write_synthetic(manifest, samples, tmp_path)
        loaded = load_samples(read_manifest(tmp_path / "manifest.csv"), tmp_path)
        for orig, back in zip(samples, loaded):
            assert np.max(np.abs(orig.image - back.image)) < 1e-12

    def test_intensity_mode_binarizes_on_load(self, tmp_path):
        manifest = Manifest(dataset="disfa-style", au_ids=(1, 2),
                            landmark_count=2, label_mode="intensity",
                            image_size=(4, 4), image_channels=1)
        image = np.zeros((1, 4, 4))
        lms = np.array([[0.1, 0.2], [0.3, 0.4]])
        (tmp_path / "img").mkdir()
        from hicomex.data import write_image
        write_image(tmp_path / "img" / "a.f64", image)
        manifest.rows.append(("img/a.f64", "s0", [3, 1], lms))
        write_manifest(manifest, tmp_path / "m.csv")
        samples = load_samples(read_manifest(tmp_path / "m.csv"), tmp_path)
        assert samples[0].au_labels.tolist() == [1, 0]

    def test_missing_image_errors(self, tmp_path):
        manifest = Manifest(dataset="x", au_ids=(1,), landmark_count=1,
                            label_mode="binary", image_size=(4, 4),
                            image_channels=1)
        manifest.rows.append(("img/gone.f64", "s0", [1],
                              np.array([[0.5, 0.5]])))
        write_manifest(manifest, tmp_path / "m.csv")
        with pytest.raises(DataError, match="missing"):
            load_samples(read_manifest(tmp_path / "m.csv"), tmp_path)


class TestPng:
    def test_png_bytes_round_trip(self, tmp_path):
        gray = np.random.default_rng(10).integers(0, 256, (24, 17),
                                                  dtype=np.uint8)
        write_gray_png(tmp_path / "x.png", gray)
        assert np.array_equal(read_gray_png(tmp_path / "x.png"), gray)
