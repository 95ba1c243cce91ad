import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from diffusion.constants import MODE_CONTROLNET, MODE_SIAMESE
from diffusion.dataset import PairedSample
from diffusion.evaluation.ablation import ablation_settings, run_ablation
from diffusion.evaluation.downstream import (
    ARM_COPY_PASTE,
    ARM_REAL,
    ARM_REAL_SYNTH,
    ARM_SYNTH_ONLY,
    arm_training_sets,
    check_disjoint,
    downstream_experiment,
    summarize_arms,
)
from diffusion.evaluation.features import feature_dim, feature_matrix, image_features
from diffusion.evaluation.metrics import (
    dice_iou,
    diversity,
    frechet_distance,
    frechet_from_stats,
    kid,
    kid_subsets,
    sqrtm_psd,
    texture_fidelity,
)
from diffusion.evaluation.reports import read_csv_report, write_csv_report, write_summary
from diffusion.evaluation.segmenter import SegmenterConfig, train_segmenter
from diffusion.exceptions import ConfigError, DataError, ShapeError
from diffusion.texture import max_freq_error

from .factories import TINY_GENERATOR, tiny_pairs

TINY_SEGMENTER = SegmenterConfig(width=4, iterations=5, batch_size=4)


def square(size=8, top=0, left=0, side=2):
    m = np.zeros((size, size))
    m[top:top + side, left:left + side] = 1.0
    return m


class FrechetTests(SimpleTestCase):
    def test_identical_sets(self):
        feats = np.random.default_rng(0).standard_normal((50, 4))
        self.assertAlmostEqual(frechet_distance(feats, feats), 0.0, places=9)

    def test_one_dimensional_examples(self):
        self.assertAlmostEqual(frechet_from_stats([0.0], [[1.0]], [3.0], [[1.0]]), 9.0, places=12)
        self.assertAlmostEqual(frechet_from_stats([0.0], [[1.0]], [0.0], [[4.0]]), 1.0, places=12)

    def test_symmetric_and_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = rng.standard_normal((12, 3)) * rng.uniform(0.5, 2.0)
            b = rng.standard_normal((12, 3)) + rng.uniform(-1.0, 1.0)
            ab, ba = frechet_distance(a, b), frechet_distance(b, a)
            self.assertGreaterEqual(ab, 0.0)
            self.assertAlmostEqual(ab, ba, delta=1e-8 * max(1.0, ab))

    def test_matrix_root_matches_eigendecomposition(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            b = rng.standard_normal((5, 5))
            a = b @ b.T
            root = sqrtm_psd(a)
            np.testing.assert_allclose(root @ root, a, atol=1e-8)
            np.testing.assert_allclose(root, root.T, atol=1e-12)

    def test_diagonal_fallback(self):
        a = np.random.default_rng(3).standard_normal((3, 5))
        self.assertGreaterEqual(frechet_distance(a, a + 1.0), 0.0)
        with self.assertRaises(DataError):
            frechet_distance(a, a, diagonal_fallback=False)
        with self.assertRaises(ShapeError):
            frechet_distance(a, np.zeros((3, 4)))


class KidTests(SimpleTestCase):
    def test_hand_computed_u_statistic(self):
        pts = np.array([[1.0, 0.0], [0.0, 1.0]])
        # k(a,a) = k(b,b) = 1.5^3, k(a,b) = 1
        self.assertAlmostEqual(kid(pts, pts), 1.0 + 1.0 - 2.0 * (2 * 3.375 + 2.0) / 4.0, places=12)

    def test_same_distribution_is_near_zero(self):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((500, 5)), rng.standard_normal((500, 5))
        _, std = kid_subsets(a, b, subsets=20, subset_size=100)
        self.assertLess(abs(kid(a, b)), 3.0 * std)

    def test_unbiased_over_resamples(self):
        rng = np.random.default_rng(5)
        values = [kid(rng.standard_normal((20, 3)), rng.standard_normal((20, 3))) for _ in range(200)]
        self.assertLess(abs(np.mean(values)), 3.0 * np.std(values) / np.sqrt(len(values)))

    def test_grows_with_offset(self):
        rng = np.random.default_rng(6)
        a, b = rng.standard_normal((100, 4)), rng.standard_normal((100, 4))
        values = [kid(a, b + shift) for shift in (1.0, 2.0, 4.0)]
        self.assertGreater(values[0], 0.0)
        self.assertEqual(values, sorted(values))

    def test_too_few_samples(self):
        with self.assertRaises(DataError):
            kid(np.zeros((1, 3)), np.zeros((4, 3)))


class OverlapTests(SimpleTestCase):
    def test_hand_counts(self):
        same = dice_iou(square(), square())
        self.assertEqual((same.dice, same.iou), (1.0, 1.0))
        apart = dice_iou(square(), square(top=4, left=4))
        self.assertEqual((apart.dice, apart.iou), (0.0, 0.0))
        half = dice_iou(square(), square(left=1))
        self.assertAlmostEqual(half.dice, 0.5)
        self.assertAlmostEqual(half.iou, 1.0 / 3.0)
        empty = dice_iou(np.zeros((4, 4)), np.zeros((4, 4)))
        self.assertEqual((empty.dice, empty.iou), (1.0, 1.0))

    def test_dice_iou_identity_on_random_pairs(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            a = rng.random((6, 6)) < rng.random()
            b = rng.random((6, 6)) < rng.random()
            s = dice_iou(a, b)
            self.assertGreaterEqual(s.dice, s.iou)
            self.assertAlmostEqual(s.dice, 2 * s.iou / (1 + s.iou), places=12)
            if s.dice not in (0.0, 1.0):
                self.assertGreater(s.dice, s.iou)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            dice_iou(np.zeros((4, 4)), np.zeros((4, 5)))


class DiversityAndTextureTests(SimpleTestCase):
    def test_diversity_examples(self):
        self.assertEqual(diversity(np.ones((3, 4))), 0.0)
        self.assertAlmostEqual(diversity(np.array([[0.0, 0.0], [3.0, 4.0]])), 5.0)
        with self.assertRaises(DataError):
            diversity(np.ones((1, 4)))

    def test_uniform_fill_scores_contrast_plus_worst_frequency(self):
        mask = np.zeros((16, 16))
        mask[4:12, 4:12] = 1.0
        g = TINY_GENERATOR
        expected = g.contrast + max_freq_error(g.texture_freq, 16)
        self.assertAlmostEqual(texture_fidelity(np.zeros((16, 16, 3)), mask, g), expected, places=12)

    def test_feature_vectors(self):
        pairs = tiny_pairs(3)
        feats = feature_matrix(pairs)
        self.assertEqual(feats.shape, (3, feature_dim(3)))
        self.assertEqual(feature_dim(3), 29)
        self.assertTrue(np.isfinite(feats).all())
        self.assertEqual(image_features(pairs[0].image, None).shape, (29,))
        with self.assertRaises(DataError):
            feature_matrix([])


class DownstreamTests(SimpleTestCase):
    def setUp(self):
        pairs = tiny_pairs(10)
        self.real, self.synth, self.test = pairs[:4], pairs[4:7], pairs[7:]

    def test_arm_sets(self):
        arms = {(name, mult): train for name, mult, train in arm_training_sets(self.real, self.synth, [0.5])}
        self.assertEqual(len(arms[(ARM_REAL, None)]), 4)
        self.assertEqual(len(arms[(ARM_COPY_PASTE, None)]), 7)
        self.assertEqual(len(arms[(ARM_REAL_SYNTH, None)]), 7)
        self.assertEqual(len(arms[(ARM_SYNTH_ONLY, None)]), 3)
        self.assertEqual(len(arms[(ARM_REAL_SYNTH, 0.5)]), 6)

    def test_empty_synth_matches_real_only(self):
        results = {r.arm: r for r in downstream_experiment(self.real, [], TINY_SEGMENTER, self.test)}
        self.assertNotIn(ARM_SYNTH_ONLY, results)
        self.assertEqual(results[ARM_REAL_SYNTH].dice, results[ARM_REAL].dice)
        self.assertEqual(results[ARM_REAL_SYNTH].iou, results[ARM_REAL].iou)

    def test_reproducible_across_runs(self):
        a = downstream_experiment(self.real, self.synth, TINY_SEGMENTER, self.test, seeds=[0, 1])
        b = downstream_experiment(self.real, self.synth, TINY_SEGMENTER, self.test, seeds=[0, 1], workers=2)
        self.assertEqual([r.to_dict() for r in a], [r.to_dict() for r in b])
        summary = summarize_arms(a)
        self.assertEqual(len(summary), 4)
        self.assertEqual(summary[0]["seeds"], [0, 1])

    def test_overlap_is_rejected(self):
        with self.assertRaises(DataError):
            check_disjoint(self.real, [self.real[0]])
        with self.assertRaises(DataError):
            downstream_experiment(self.real, self.synth, TINY_SEGMENTER, [self.synth[0]])

    def test_segmenter_outputs_probabilities(self):
        model = train_segmenter(self.real, TINY_SEGMENTER)
        images = np.stack([np.transpose(p.image, (2, 0, 1)) for p in self.test])
        probs = model.probabilities(images)
        self.assertEqual(probs.shape, (3, 16, 16))
        self.assertTrue(((probs >= 0) & (probs <= 1)).all())
        with self.assertRaises(DataError):
            train_segmenter([], TINY_SEGMENTER)
        with self.assertRaises(ConfigError):
            SegmenterConfig(width=0)


class AblationTests(SimpleTestCase):
    def test_full_grid_enumeration(self):
        rows = ablation_settings("full")
        self.assertEqual(len(rows), 13)
        self.assertEqual([r.name for r in rows[:8]], [f"setting{i}" for i in range(1, 9)])
        self.assertEqual([r.w_c for r in rows[8:]], [0.0, 0.5, 1.0, 1.5, 2.0])

    def test_setting_one_is_controlnet(self):
        first = ablation_settings("components")[0]
        self.assertEqual(first.mode, MODE_CONTROLNET)
        self.assertEqual(first.overrides()["W_C"], 0.0)
        self.assertFalse(first.overrides()["ONLINE_AUG"])
        self.assertEqual(ablation_settings("components")[-1].mode, MODE_SIAMESE)

    def test_rows_carry_seed_and_hash(self):
        seen = []
        rows = run_ablation(ablation_settings("wc", [0.0, 1.0]), {"N_ITER": 4}, [0, 1],
                            lambda cfg, seed: seen.append(cfg) or {"dice": 0.5})
        self.assertEqual(len(rows), 4)
        self.assertEqual([r["seed"] for r in rows], [0, 1, 0, 1])
        self.assertEqual(len({r["config_hash"] for r in rows}), 4)
        self.assertEqual(seen[0]["SEED"], 0)
        self.assertEqual(rows[2]["w_c"], 1.0)

    def test_unknown_grid(self):
        with self.assertRaises(ConfigError):
            ablation_settings("everything")
        with self.assertRaises(ConfigError):
            ablation_settings("wc", [-1.0])


class ReportTests(SimpleTestCase):
    def test_csv_and_summary(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "r.csv"
            write_csv_report(path, [{"a": 0.1, "b": [1, 2]}, {"a": 2.0, "c": "x"}])
            rows = read_csv_report(path)
            summary = write_summary(Path(tmp), {"path": Path(tmp), "values": np.arange(2)})
            self.assertTrue(summary.exists())
        self.assertEqual(rows[0], {"a": "0.1", "b": "1 2", "c": ""})
        self.assertEqual(rows[1]["c"], "x")
